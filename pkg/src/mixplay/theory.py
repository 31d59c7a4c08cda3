"""Lipschitz, covering-radius and generalization-bound calculators, plus the
preference-shift margin algebra."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.spatial.distance import cdist

from . import nn


@dataclass(frozen=True)
class ArchSpec:
    n_c: int = 0
    n_a: int = 0
    n_f: int = 0
    alpha: float = 1.0
    beta: float = 1.0
    action_count: int = 8

    def __post_init__(self):
        if self.alpha <= 0 or self.beta <= 0:
            raise ValueError("alpha and beta must be positive")
        if min(self.n_c, self.n_a, self.n_f) < 0:
            raise ValueError("layer counts must be non-negative")
        if self.action_count < 2:
            raise ValueError("action_count must be >= 2")


@dataclass(frozen=True)
class BoundInputs:
    delta: float
    lipschitz: float
    loss_bound: float
    confidence: float
    n: int
    action_count: int

    def __post_init__(self):
        if self.delta < 0:
            raise ValueError("delta must be >= 0")
        if self.lipschitz <= 0 or self.loss_bound <= 0:
            raise ValueError("lipschitz constant and loss bound must be positive")
        if not 0.0 < self.confidence < 1.0:
            raise ValueError("confidence must lie in (0, 1)")
        if self.n < 1:
            raise ValueError("n must be >= 1")


def softmax_lipschitz_factor(action_count: int) -> float:
    return math.sqrt(action_count - 1) / action_count


def lipschitz_constant(arch: ArchSpec) -> float:
    """sqrt(|A|-1)/|A| * alpha^(n_c + n_f) * (alpha^3 beta^2 + alpha)^n_a."""
    a, b = arch.alpha, arch.beta
    return (softmax_lipschitz_factor(arch.action_count)
            * a ** (arch.n_c + arch.n_f)
            * (a**3 * b**2 + a) ** arch.n_a)


def softmax_jacobian(p: np.ndarray) -> np.ndarray:
    p = np.asarray(p, dtype=np.float64)
    return np.diag(p) - np.outer(p, p)


def softmax_jacobian_fro_norm(p) -> float:
    p = np.asarray(p, dtype=np.float64)
    s2 = float(np.sum(p**2))
    off = s2 * s2 - float(np.sum(p**4))  # sum over k != j of p_k^2 p_j^2
    diag = float(np.sum(p**2 * (1.0 - p) ** 2))
    return math.sqrt(max(off + diag, 0.0))


def row_abs_sum_bound(net: nn.Mlp) -> float:
    """Smallest alpha with sum_k |w_jk| <= alpha for every row j of every layer."""
    return max(float(np.abs(W).sum(axis=1).max()) for W, _ in nn.unpack(net.spec, net.params))


def conform_to_alpha(net: nn.Mlp, alpha: float) -> nn.Mlp:
    """Rescale each weight row whose absolute sum exceeds alpha onto the bound."""
    out = net.copy()
    for W, _ in nn.unpack(out.spec, out.params):
        sums = np.abs(W).sum(axis=1)
        scale = np.where(sums > alpha, alpha / np.maximum(sums, 1e-300), 1.0)
        W *= scale[:, None]
    return out


def clip_to_ball(x: np.ndarray, beta: float) -> np.ndarray:
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    norms = np.linalg.norm(x, axis=1, keepdims=True)
    return np.where(norms > beta, x * (beta / np.maximum(norms, 1e-300)), x)


def lipschitz_ratios(net: nn.Mlp, xs: np.ndarray, ys: np.ndarray, beta: float) -> np.ndarray:
    xs, ys = clip_to_ball(xs, beta), clip_to_ball(ys, beta)
    num = np.linalg.norm(net(xs) - net(ys), axis=1)
    den = np.linalg.norm(xs - ys, axis=1)
    keep = den > 0
    return num[keep] / den[keep]


def empirical_lipschitz_estimate(net: nn.Mlp, xs: np.ndarray, ys: np.ndarray, beta: float) -> float:
    """max over pairs of ||pi(x) - pi(y)|| / ||x - y||, inputs clipped to the beta-ball."""
    r = lipschitz_ratios(net, xs, ys, beta)
    return float(r.max()) if len(r) else 0.0


def mlp_arch(net: nn.Mlp, alpha: float, beta: float) -> ArchSpec:
    """An MLP counts every linear layer, output layer included, as fully connected."""
    return ArchSpec(0, 0, net.spec.n_layers, alpha, beta, net.spec.n_out)


def delta_cover_radius(cover_set, target_set) -> float:
    """Smallest delta such that balls of radius delta around cover_set contain target_set."""
    cover = np.asarray(cover_set, dtype=np.float64)
    target = np.asarray(target_set, dtype=np.float64)
    if cover.ndim == 1:
        cover = cover[:, None]
    if target.ndim == 1:
        target = target[:, None]
    if len(cover) == 0:
        raise ValueError("cover set is empty")
    if len(target) == 0:
        return 0.0
    return float(cdist(target, cover).min(axis=1).max())


def generalization_bound(b: BoundInputs) -> float:
    """delta * lambda * (1 + L |A|) + sqrt(L^2 log(1/conf) / (2n))."""
    first = b.delta * b.lipschitz * (1.0 + b.loss_bound * b.action_count)
    second = math.sqrt(b.loss_bound**2 * math.log(1.0 / b.confidence) / (2.0 * b.n))
    return first + second


@dataclass(frozen=True)
class ShiftQuery:
    phi_probs: tuple[float, ...]
    preferred: int
    challenger: int

    def __post_init__(self):
        p = np.asarray(self.phi_probs, dtype=np.float64)
        if abs(p.sum() - 1.0) > 1e-9 or np.any(p < 0):
            raise ValueError("phi_probs must be a probability vector")
        n = len(p)
        if not (0 <= self.preferred < n and 0 <= self.challenger < n) or self.preferred == self.challenger:
            raise ValueError("preferred and challenger must be distinct valid indexes")


def min_shift_margin(q: ShiftQuery) -> float:
    """Least mass moved from the preferred to the challenger action that flips their order."""
    p = q.phi_probs
    return max((p[q.preferred] - p[q.challenger]) / 2.0, 0.0)


def loose_shift_margin(q: ShiftQuery) -> float:
    """The weaker sufficient condition Delta > pi(p) - pi(k)."""
    p = q.phi_probs
    return max(p[q.preferred] - p[q.challenger], 0.0)


def transfer(phi_probs, p: int, k: int, delta: float) -> np.ndarray:
    out = np.array(phi_probs, dtype=np.float64)
    out[p] -= delta
    out[k] += delta
    return out


def shifts_preference(phi_probs, p: int, k: int, delta: float) -> bool:
    moved = transfer(phi_probs, p, k, delta)
    return bool(moved[k] > moved[p])


def kl_change_under_transfer(theta_probs, phi_probs, p: int, k: int, delta: float) -> float:
    """KL(theta || phi') - KL(theta || phi), phi' moving delta from action p to action k.

    Evaluated as sum_j theta_j log(phi_j / phi'_j) over the two touched actions.
    """
    theta = np.asarray(theta_probs, dtype=np.float64)
    phi = np.asarray(phi_probs, dtype=np.float64)
    if not 0 <= delta < phi[p]:
        raise ValueError("delta must lie in [0, phi[p])")
    return float(theta[p] * math.log(phi[p] / (phi[p] - delta))
                 + theta[k] * math.log(phi[k] / (phi[k] + delta)))


def uniform_kl_change_lower_bound(theta_pref: float, n: int, delta: float) -> float:
    """theta_p * log(1 / (1 - (n delta)^2)), the lower bound at a uniform phi."""
    return theta_pref * math.log(1.0 / (1.0 - (n * delta) ** 2))
