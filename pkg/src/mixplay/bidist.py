"""Fictitious-population sampling and bidirectional policy distillation.

A training iteration shuffles agent indexes, draws a binary assignment
(1 = trained population acting with the learning policy, 0 = fictitious
population acting with the distilled policy), and every k_d iterations the
distilled policy is either pulled toward the learning policy (forward: KL
descent) or pushed away from it (reverse: KL ascent), alternating.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from . import nn

log = logging.getLogger(__name__)

FORWARD = "F"
REVERSE = "R"

DISTILL_MODES = ("bidist", "forward_only", "none", "perturb")
PERTURB_KINDS = ("entropy", "random", "noise")


@dataclass
class Assignment:
    bits: np.ndarray
    p: float

    @property
    def n_trained(self) -> int:
        return int(self.bits.sum())

    def __len__(self) -> int:
        return len(self.bits)


def sample_assignment(p: float, n: int, rng: np.random.Generator) -> Assignment:
    """Bernoulli(p) per agent, except the last agent is forced to 1 when all
    earlier agents drew 0, so at least one agent is always trained."""
    if not 0.0 < p < 1.0:
        raise ValueError("p must lie in (0, 1)")
    if n < 1:
        raise ValueError("n must be >= 1")
    bits = np.zeros(n, dtype=np.int64)
    for i in range(n):
        if i == n - 1 and not bits[:i].any():
            bits[i] = 1
        else:
            bits[i] = int(rng.random() < p)
    return Assignment(bits, p)


def randomize_indexes(n: int, rng: np.random.Generator) -> np.ndarray:
    return rng.permutation(n)


def sample_training_assignment(p: float, n: int, rng: np.random.Generator) -> Assignment:
    """Shuffle agent indexes, then sample; the forced bit lands on a random agent."""
    order = randomize_indexes(n, rng)
    drawn = sample_assignment(p, n, rng)
    bits = np.zeros(n, dtype=np.int64)
    bits[order] = drawn.bits
    return Assignment(bits, p)


def assignment_probability(bits, p: float) -> float:
    """Closed-form probability of an (unshuffled) assignment vector."""
    bits = list(bits)
    n = len(bits)
    prob = 1.0
    for i, b in enumerate(bits):
        if i == n - 1 and not any(bits[:i]):
            prob *= 1.0 if b == 1 else 0.0
        else:
            prob *= p if b == 1 else 1.0 - p
    return prob


def schedule_step(k: int, k_d: int, mode: str = "bidist") -> str | None:
    """Distillation event at iteration k: odd multiples of k_d forward, even multiples reverse."""
    if k_d < 1:
        raise ValueError("k_d must be >= 1")
    if mode == "none" or k <= 0 or k % k_d:
        return None
    if mode == "forward_only":
        return FORWARD
    return FORWARD if (k // k_d) % 2 == 1 else REVERSE


@dataclass
class DistillSchedule:
    k_d: int = 5
    eta_f: float = 1e-3
    eta_r: float = 1e-5
    distill_epochs: int = 5
    distill_minibatches: int = 5
    mode: str = "bidist"
    perturb_kind: str | None = None
    noise_sigma: float = 0.01
    max_reverse_update_norm: float = 1.0

    def __post_init__(self):
        if self.k_d < 1:
            raise ValueError("k_d must be >= 1")
        if self.mode not in DISTILL_MODES:
            raise ValueError(f"unknown distillation mode {self.mode!r}")
        if self.mode == "perturb" and self.perturb_kind not in PERTURB_KINDS:
            raise ValueError(f"perturb mode needs perturb_kind in {PERTURB_KINDS}")
        if self.eta_r > self.eta_f:
            log.warning("reverse learning rate %g exceeds forward rate %g", self.eta_r, self.eta_f)

    def event(self, k: int) -> str | None:
        return schedule_step(k, self.k_d, "bidist" if self.mode == "perturb" else self.mode)


@dataclass
class DistillResult:
    net: nn.Mlp
    kl_before: float
    kl_after: float
    trace: list[float] = field(default_factory=list)


def mean_kl(teacher: nn.Mlp, student: nn.Mlp, obs: np.ndarray) -> float:
    return float(np.mean(nn.kl_divergence(teacher(obs), student(obs))))


def _minibatches(n: int, k: int, rng: np.random.Generator | None):
    idx = np.arange(n) if rng is None else rng.permutation(n)
    return [mb for mb in np.array_split(idx, min(k, n)) if len(mb)]


def _distill(buffer, teacher, student, lr, epochs, minibatches, sign, opt, rng, max_update_norm=None, trace=False):
    obs = np.asarray(buffer, dtype=np.float64)
    net = student.copy()
    if len(obs) == 0:
        log.warning("empty distillation buffer; skipping")
        kl = float("nan")
        return DistillResult(net, kl, kl)
    if opt is None:
        opt = nn.AdamState.zeros(net.spec.n_params)
    start = net.params.copy()
    targets = teacher(obs)
    kl_before = mean_kl(teacher, net, obs)
    history = []
    kick = None
    for _ in range(epochs):
        for mb in _minibatches(len(obs), minibatches, rng):
            loss, grad = nn.kl_loss_and_grad(targets[mb], net, obs[mb])
            if sign > 0 and loss <= 1e-12:
                # KL ascent has a zero gradient at its minimum; step off it along one fixed random direction
                if kick is None:
                    kick = (rng or np.random.default_rng(0)).standard_normal(net.params.shape)
                    kick /= np.linalg.norm(kick)
                net.params = net.params + lr * kick
            else:
                net.params = nn.adam_step(net.params, -sign * grad, opt, lr)
            if trace:
                history.append(mean_kl(teacher, net, obs))
    if max_update_norm is not None:
        delta = net.params - start
        norm = np.linalg.norm(delta)
        if norm > max_update_norm:
            net.params = start + delta * (max_update_norm / norm)
    return DistillResult(net, kl_before, mean_kl(teacher, net, obs), history)


def forward_distill(buffer, teacher: nn.Mlp, student: nn.Mlp, eta_f: float = 1e-3, epochs: int = 5,
                    minibatches: int = 1, opt: nn.AdamState | None = None,
                    rng: np.random.Generator | None = None, trace: bool = False) -> DistillResult:
    """Adam descent on mean KL(teacher || student) over buffer observations.

    Each epoch is one pass over the buffer in `minibatches` chunks. The
    teacher is only read; no gradient reaches it.
    """
    return _distill(buffer, teacher, student, eta_f, epochs, minibatches, -1, opt, rng, trace=trace)


def reverse_distill(buffer, teacher: nn.Mlp, student: nn.Mlp, eta_r: float = 1e-5, epochs: int = 5,
                    minibatches: int = 1, opt: nn.AdamState | None = None,
                    rng: np.random.Generator | None = None, max_update_norm: float | None = 1.0,
                    trace: bool = False) -> DistillResult:
    """Adam ascent on the same KL; total parameter displacement per call is capped."""
    return _distill(buffer, teacher, student, eta_r, epochs, minibatches, +1, opt, rng, max_update_norm, trace)


def apply_perturbation(kind: str, student: nn.Mlp, buffer, steps: int = 25, lr: float = 1e-5,
                       sigma: float = 0.01, rng: np.random.Generator | None = None,
                       opt: nn.AdamState | None = None) -> nn.Mlp:
    """Perturbation baselines for the reverse phase.

    entropy: `steps` Adam ascent steps on the mean policy entropy over the buffer.
    random: re-draw the output layer from the initialization distribution.
    noise: add N(0, sigma^2) to every parameter once.
    """
    rng = rng if rng is not None else np.random.default_rng(0)
    net = student.copy()
    if kind == "entropy":
        obs = np.asarray(buffer, dtype=np.float64)
        opt = opt if opt is not None else nn.AdamState.zeros(net.spec.n_params)
        for _ in range(steps):
            _, grad = nn.entropy_loss_and_grad(net, obs)
            net.params = nn.adam_step(net.params, -grad, opt, lr)
    elif kind == "random":
        W, b = nn.unpack(net.spec, net.params)[-1]
        W[...] = nn.orthogonal(rng, W.shape, 0.01)
        b[...] = 0.0
    elif kind == "noise":
        if sigma > 0:
            net.params = net.params + rng.normal(0.0, sigma, net.params.shape)
    else:
        raise ValueError(f"unknown perturbation {kind!r}")
    return net


def preferred_actions(net: nn.Mlp, obs: np.ndarray) -> np.ndarray:
    # np.argmax returns the lowest index among ties
    return np.argmax(net(np.atleast_2d(obs)), axis=-1)


def preference_shift_rate(teacher: nn.Mlp, student: nn.Mlp, obs: np.ndarray) -> float:
    """Fraction of observations whose argmax action differs between the two policies."""
    obs = np.atleast_2d(obs)
    if len(obs) == 0:
        return 0.0
    return float(np.mean(preferred_actions(teacher, obs) != preferred_actions(student, obs)))


class Distiller:
    """Owns the distilled policy and its optimizer state across events."""

    def __init__(self, net: nn.Mlp, schedule: DistillSchedule, rng: np.random.Generator):
        self.net = net
        self.schedule = schedule
        self.rng = rng
        self.forward_opt = nn.AdamState.zeros(net.spec.n_params)
        self.reverse_opt = nn.AdamState.zeros(net.spec.n_params)

    def run_event(self, event: str, teacher: nn.Mlp, buffer: np.ndarray) -> dict:
        s = self.schedule
        obs = np.asarray(buffer)
        if event == FORWARD:
            res = forward_distill(obs, teacher, self.net, s.eta_f, s.distill_epochs, s.distill_minibatches,
                                  self.forward_opt, self.rng)
            self.net = res.net
            before, after = res.kl_before, res.kl_after
        elif s.mode == "perturb":
            before = mean_kl(teacher, self.net, obs)
            epochs_steps = s.distill_epochs * s.distill_minibatches
            self.net = apply_perturbation(s.perturb_kind, self.net, obs, epochs_steps, s.eta_r,
                                          s.noise_sigma, self.rng, self.reverse_opt)
            after = mean_kl(teacher, self.net, obs)
        else:
            res = reverse_distill(obs, teacher, self.net, s.eta_r, s.distill_epochs, s.distill_minibatches,
                                  self.reverse_opt, self.rng, s.max_reverse_update_norm)
            self.net = res.net
            before, after = res.kl_before, res.kl_after
        return {"kl_before": before, "kl_after": after, "shift_rate": preference_shift_rate(teacher, self.net, obs)}


# ---------------------------------------------------------------- baselines

PP_CURRENT_PROB = 0.7


@dataclass
class PolicyPool:
    """Current learning policy plus an append-only history of frozen snapshots."""

    current: nn.Mlp | None = None
    history: list[np.ndarray] = field(default_factory=list)

    def append(self, params: np.ndarray) -> None:
        snap = np.array(params, dtype=np.float64, copy=True)
        snap.flags.writeable = False
        self.history.append(snap)


def pp_sample(pool: PolicyPool, rng: np.random.Generator, current_prob: float = PP_CURRENT_PROB):
    """Current policy with probability 0.7, else a uniformly drawn historical snapshot.

    Returns None for "current" and the snapshot parameters otherwise.
    """
    if not pool.history:
        return None
    if rng.random() < current_prob:
        return None
    return pool.history[int(rng.integers(len(pool.history)))]


class RankedMemory:
    """Snapshots keyed by floor(return / bucket_width).

    The bucket width is 1/10 of the return range seen over the first
    `warmup` stores; entries arriving during warmup are held back and filed
    once the width is fixed.
    """

    def __init__(self, bucket_width: float | None = None, warmup: int = 10, levels: int = 10):
        self.bucket_width = bucket_width
        self.warmup = warmup
        self.levels = levels
        self.entries: dict[int, list[np.ndarray]] = {}
        self._pending: list[tuple[float, np.ndarray]] = []

    def __len__(self) -> int:
        return sum(len(v) for v in self.entries.values())

    def key(self, episode_return: float) -> int:
        return int(np.floor(episode_return / self.bucket_width))

    def store(self, episode_return: float, params: np.ndarray) -> None:
        snap = np.array(params, dtype=np.float64, copy=True)
        snap.flags.writeable = False
        if self.bucket_width is None:
            self._pending.append((float(episode_return), snap))
            if len(self._pending) < self.warmup:
                return
            rets = [r for r, _ in self._pending]
            span = max(rets) - min(rets)
            self.bucket_width = span / self.levels if span > 0 else 1.0
            pending, self._pending = self._pending, []
            for r, s in pending:
                self.entries.setdefault(self.key(r), []).append(s)
            return
        self.entries.setdefault(self.key(episode_return), []).append(snap)

    def sample(self, rng: np.random.Generator) -> np.ndarray:
        """A uniformly drawn level, then a uniformly drawn entry within it."""
        keys = sorted(self.entries)
        level = keys[int(rng.integers(len(keys)))]
        entries = self.entries[level]
        return entries[int(rng.integers(len(entries)))]


def rpm_store_and_sample(memory: RankedMemory, episode_return: float | None, params: np.ndarray | None,
                         n_agents: int, p: float, rng: np.random.Generator) -> list[np.ndarray | None]:
    """File the finished episode's policy, then draw per-agent replacements for the next episode.

    Each agent independently swaps in a stored snapshot with probability p;
    None means "keep the current policy".
    """
    if episode_return is not None and params is not None:
        memory.store(episode_return, params)
    if len(memory) == 0:
        return [None] * n_agents
    out: list[np.ndarray | None] = []
    for _ in range(n_agents):
        out.append(memory.sample(rng) if rng.random() < p else None)
    return out
