"""Parameter-shared MAPPO: rollouts, GAE, clipped policy objective, Huber critic."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field

import numpy as np

from . import envs, nn
from .seeding import derive_rng


@dataclass
class PpoConfig:
    clip: float = 0.2
    gamma: float = 0.99
    gae_lambda: float = 0.95
    epochs: int = 5
    minibatches: int = 5
    entropy_coef: float = 0.01
    value_huber_delta: float = 10.0
    grad_clip_norm: float = 10.0
    actor_lr: float = 5e-4
    critic_lr: float = 5e-4
    adam_eps: float = 1e-5
    rollout_threads: int = 16
    episode_length: int = 200
    hidden: tuple[int, ...] = (64, 64)
    # fictitious agents' samples also update the learning policy
    train_on_fictitious: bool = False

    def __post_init__(self):
        self.hidden = tuple(self.hidden)
        if not 0.0 < self.clip < 1.0:
            raise ValueError("clip must lie in (0, 1)")
        for name in ("actor_lr", "critic_lr", "adam_eps", "value_huber_delta", "grad_clip_norm"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if self.epochs < 1 or self.minibatches < 1 or self.rollout_threads < 1:
            raise ValueError("epochs, minibatches and rollout_threads must be >= 1")


@dataclass
class TrajectoryBatch:
    """Arrays indexed (worker, timestep, agent, ...)."""

    obs: np.ndarray
    states: np.ndarray
    actions: np.ndarray
    rewards: np.ndarray
    logp: np.ndarray
    values: np.ndarray  # (W, T + 1, N); last slice is the bootstrap value
    dones: np.ndarray  # (W, T)
    trained: np.ndarray  # (W, N) bool, seat acted with the learning policy
    assignment: np.ndarray | None = None
    advantages: np.ndarray | None = None
    returns: np.ndarray | None = None

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.actions.shape

    def episode_returns(self) -> np.ndarray:
        """Undiscounted per-agent return of every worker episode, (W, N)."""
        return self.rewards.sum(axis=1)

    def per_capita_return(self) -> float:
        return float(self.episode_returns().mean())


@dataclass
class Learner:
    actor: nn.Mlp
    critic: nn.Mlp
    actor_opt: nn.AdamState = field(repr=False, default=None)
    critic_opt: nn.AdamState = field(repr=False, default=None)

    @classmethod
    def create(cls, spec: envs.GameSpec, config: PpoConfig, seed: int) -> "Learner":
        actor_spec = nn.MlpSpec((spec.obs_dim, *config.hidden, spec.action_count), "relu", "softmax")
        critic_spec = nn.MlpSpec((spec.state_dim, *config.hidden, 1), "relu", "linear")
        actor = nn.Mlp.init(actor_spec, derive_rng(seed, "actor_init"))
        critic = nn.Mlp.init(critic_spec, derive_rng(seed, "critic_init"))
        return cls(
            actor,
            critic,
            nn.AdamState.zeros(actor_spec.n_params, eps=config.adam_eps),
            nn.AdamState.zeros(critic_spec.n_params, eps=config.adam_eps),
        )


def sample_categorical(probs: np.ndarray, u: np.ndarray) -> np.ndarray:
    """Inverse-CDF sampling, one uniform draw per row."""
    cdf = np.cumsum(probs, axis=-1)
    idx = (cdf <= u[..., None]).sum(axis=-1)
    return np.minimum(idx, probs.shape[-1] - 1)


def collect_with_seats(
    spec: envs.GameSpec,
    seats: list[list[nn.Mlp]],
    trained: np.ndarray,
    critic: nn.Mlp | None,
    seed: int,
    iteration: int = 0,
) -> TrajectoryBatch:
    """Run one episode per worker, agent i of worker w acting with seats[w][i].

    Worker w draws environment and action randomness from
    ``derive_rng(seed, "rollout", iteration, w)``; workers are merged in index order.
    """
    W, N, T = len(seats), spec.n_agents, spec.episode_length
    if any(len(row) != N for row in seats):
        raise ValueError("every worker needs one policy per agent")
    groups: dict[int, tuple[nn.Mlp, list[int], list[int]]] = {}
    for w, row in enumerate(seats):
        for i, net in enumerate(row):
            g = groups.setdefault(id(net), (net, [], []))
            g[1].append(w)
            g[2].append(i)

    rngs = [derive_rng(seed, "rollout", iteration, w) for w in range(W)]
    states, obs0 = [], []
    for w in range(W):
        st, o = envs.reset(spec, int(rngs[w].integers(2**63)))
        states.append(st)
        obs0.append(o)
    cur = np.stack(obs0)

    obs = np.zeros((W, T, N, spec.obs_dim))
    gstate = np.zeros((W, T, N, spec.state_dim))
    actions = np.zeros((W, T, N), dtype=np.int64)
    rewards = np.zeros((W, T, N))
    logp = np.zeros((W, T, N))
    values = np.zeros((W, T + 1, N))
    dones = np.zeros((W, T), dtype=bool)
    eye = np.eye(N)

    def critic_inputs(o):
        flat = o.reshape(W, 1, N * spec.obs_dim)
        return np.concatenate([np.broadcast_to(flat, (W, N, flat.shape[-1])), np.broadcast_to(eye, (W, N, N))], axis=-1)

    for t in range(T):
        obs[:, t] = cur
        gstate[:, t] = critic_inputs(cur)
        u = np.stack([r.random(N) for r in rngs])
        for net, ws, is_ in groups.values():
            p = net(cur[ws, is_])
            a = sample_categorical(p, u[ws, is_])
            actions[ws, t, is_] = a
            logp[ws, t, is_] = np.log(p[np.arange(len(a)), a])
        nxt = np.empty_like(cur)
        for w in range(W):
            res = envs.step(spec, states[w], actions[w, t])
            rewards[w, t] = res.rewards
            nxt[w] = res.observations
            dones[w, t] = res.done
        cur = nxt

    if critic is not None:
        values[:, :T] = critic(gstate.reshape(-1, spec.state_dim)).reshape(W, T, N)
        # every episode ends at done, so the bootstrap value stays zero
    return TrajectoryBatch(obs, gstate, actions, rewards, logp, values, dones, np.asarray(trained, dtype=bool))


def collect_rollout(
    spec: envs.GameSpec,
    learning: nn.Mlp,
    distilled: nn.Mlp | None,
    assignment,
    config: PpoConfig,
    seed: int,
    critic: nn.Mlp | None = None,
    iteration: int = 0,
    allow_all_fictitious: bool = False,
) -> TrajectoryBatch:
    """Trained agents (bit 1) act with `learning`, fictitious agents (bit 0) with `distilled`."""
    bits = np.asarray(getattr(assignment, "bits", assignment), dtype=np.int64)
    if bits.shape != (spec.n_agents,):
        raise ValueError("assignment length must equal n_agents")
    if not bits.any() and not allow_all_fictitious:
        raise nn.ContractError("assignment has no trained agent")
    if not bits.all() and distilled is None:
        raise nn.ContractError("fictitious agents need a distilled policy")
    row = [learning if b else distilled for b in bits]
    seats = [row for _ in range(config.rollout_threads)]
    trained = np.tile(bits.astype(bool), (config.rollout_threads, 1))
    batch = collect_with_seats(spec, seats, trained, critic, seed, iteration)
    batch.assignment = bits
    return batch


def gae(rewards: np.ndarray, values: np.ndarray, dones: np.ndarray, gamma: float, lam: float):
    """GAE over the time axis (axis 1); values carry one extra bootstrap step."""
    W, T = rewards.shape[:2]
    adv = np.zeros_like(rewards)
    last = np.zeros_like(rewards[:, 0])
    for t in range(T - 1, -1, -1):
        nonterminal = (1.0 - dones[:, t].astype(np.float64)).reshape((W,) + (1,) * (rewards.ndim - 2))
        delta = rewards[:, t] + gamma * values[:, t + 1] * nonterminal - values[:, t]
        last = delta + gamma * lam * nonterminal * last
        adv[:, t] = last
    return adv, adv + values[:, :T]


def compute_gae(batch: TrajectoryBatch, config: PpoConfig) -> TrajectoryBatch:
    batch.advantages, batch.returns = gae(batch.rewards, batch.values, batch.dones, config.gamma, config.gae_lambda)
    return batch


def clip_objective(ratio, advantage, eps: float):
    """Per-sample clipped surrogate min(r A, clip(r, 1 - eps, 1 + eps) A)."""
    ratio = np.asarray(ratio, dtype=np.float64)
    return np.minimum(ratio * advantage, np.clip(ratio, 1.0 - eps, 1.0 + eps) * advantage)


def clip_objective_grad(ratio, advantage, eps: float):
    """d/d(ratio) of clip_objective."""
    ratio = np.asarray(ratio, dtype=np.float64)
    unclipped = ratio * advantage <= np.clip(ratio, 1.0 - eps, 1.0 + eps) * advantage
    inside = (ratio > 1.0 - eps) & (ratio < 1.0 + eps)
    return np.where(unclipped | inside, advantage, 0.0)


def actor_loss_and_grad(actor: nn.Mlp, obs, actions, old_logp, adv, config: PpoConfig):
    """Loss = -(mean clip objective + entropy_coef * mean entropy)."""
    q, cache = nn.forward(actor.spec, actor.params, obs)
    B = len(actions)
    rows = np.arange(B)
    qa = q[rows, actions]
    ratio = np.exp(np.log(qa) - old_logp)
    obj = clip_objective(ratio, adv, config.clip)
    ent = -(q * np.log(q)).sum(axis=1)
    g_out = np.zeros_like(q)
    g_out[rows, actions] = -clip_objective_grad(ratio, adv, config.clip) * ratio / qa / B
    g_out += config.entropy_coef * (np.log(q) + 1.0) / B
    grad = nn.backward(actor.spec, actor.params, cache, g_out)
    loss = -(obj.mean() + config.entropy_coef * ent.mean())
    info = {
        "policy_loss": float(-obj.mean()),
        "entropy": float(ent.mean()),
        "clip_fraction": float(np.mean(np.abs(ratio - 1.0) > config.clip)),
    }
    return float(loss), grad, info


def critic_loss_and_grad(critic: nn.Mlp, states, returns, config: PpoConfig):
    v, cache = nn.forward(critic.spec, critic.params, states)
    v = v[:, 0]
    B = len(returns)
    loss = float(nn.huber_loss(v, returns, config.value_huber_delta).mean())
    g_out = (nn.huber_grad(v, returns, config.value_huber_delta) / B)[:, None]
    return loss, nn.backward(critic.spec, critic.params, cache, g_out)


def _policy_sample_mask(batch: TrajectoryBatch, config: PpoConfig) -> np.ndarray:
    W, T, N = batch.shape
    seat_mask = batch.trained
    if config.train_on_fictitious or not seat_mask.any():
        seat_mask = np.ones_like(seat_mask)
    return np.broadcast_to(seat_mask[:, None, :], (W, T, N)).reshape(-1)


def ppo_update(batch: TrajectoryBatch, learner: Learner, config: PpoConfig, rng: np.random.Generator) -> dict:
    """epochs x minibatches clipped-PPO passes; updates the learner in place.

    Only seats that acted with the learning policy feed the policy gradient
    (all seats when none did, or when train_on_fictitious is set); the critic
    fits every seat's returns.
    """
    if batch.advantages is None:
        compute_gae(batch, config)
    obs = batch.obs.reshape(-1, batch.obs.shape[-1])
    states = batch.states.reshape(-1, batch.states.shape[-1])
    actions = batch.actions.reshape(-1)
    old_logp = batch.logp.reshape(-1)
    returns = batch.returns.reshape(-1)
    adv = batch.advantages.reshape(-1).copy()

    pol_idx = np.flatnonzero(_policy_sample_mask(batch, config))
    a_sel = adv[pol_idx]
    adv[pol_idx] = (a_sel - a_sel.mean()) / (a_sel.std() + 1e-8)
    all_idx = np.arange(len(actions))

    info = {"policy_loss": [], "value_loss": [], "entropy": [], "clip_fraction": [], "actor_grad_norm": [], "critic_grad_norm": []}
    for _ in range(config.epochs):
        p_perm = rng.permutation(pol_idx)
        c_perm = rng.permutation(all_idx)
        for mb_p, mb_c in zip(np.array_split(p_perm, config.minibatches), np.array_split(c_perm, config.minibatches)):
            if len(mb_p):
                _, g, ainfo = actor_loss_and_grad(learner.actor, obs[mb_p], actions[mb_p], old_logp[mb_p], adv[mb_p], config)
                g, gn = nn.clip_grad_norm(g, config.grad_clip_norm)
                learner.actor.params = nn.adam_step(learner.actor.params, g, learner.actor_opt, config.actor_lr)
                for k in ("policy_loss", "entropy", "clip_fraction"):
                    info[k].append(ainfo[k])
                info["actor_grad_norm"].append(gn)
            if len(mb_c):
                vloss, g = critic_loss_and_grad(learner.critic, states[mb_c], returns[mb_c], config)
                g, gn = nn.clip_grad_norm(g, config.grad_clip_norm)
                learner.critic.params = nn.adam_step(learner.critic.params, g, learner.critic_opt, config.critic_lr)
                info["value_loss"].append(vloss)
                info["critic_grad_norm"].append(gn)
    out = {k: float(np.mean(v)) if v else 0.0 for k, v in info.items()}
    bad = [k for k, v in out.items() if not np.isfinite(v)]
    if bad or not np.all(np.isfinite(learner.actor.params)) or not np.all(np.isfinite(learner.critic.params)):
        raise FloatingPointError(f"non-finite PPO update: {out}")
    return out


def with_episode_length(spec: envs.GameSpec, config: PpoConfig) -> envs.GameSpec:
    return dataclasses.replace(spec, episode_length=config.episode_length)
