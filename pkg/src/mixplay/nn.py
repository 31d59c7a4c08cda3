"""Dense MLPs with manual backpropagation, Adam, and distribution primitives.

Parameters live in one flat float64 vector. Canonical layout (version 1):
layers in order from input to output; for each layer the weight matrix of
shape (out, in) stored row-major, followed by its bias of length out.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

PROB_FLOOR = 1e-8
LAYOUT_VERSION = 1


class ShapeError(ValueError):
    pass


class ContractError(ValueError):
    pass


@dataclass(frozen=True)
class MlpSpec:
    layer_widths: tuple[int, ...]
    activation: str = "relu"
    head: str = "softmax"

    def __post_init__(self):
        object.__setattr__(self, "layer_widths", tuple(int(w) for w in self.layer_widths))
        if len(self.layer_widths) < 2:
            raise ValueError("MlpSpec needs at least an input and an output width")
        if any(w < 1 for w in self.layer_widths):
            raise ValueError(f"layer widths must be positive: {self.layer_widths}")
        if self.activation not in ("relu", "tanh"):
            raise ValueError(f"unknown activation {self.activation!r}")
        if self.head not in ("softmax", "linear"):
            raise ValueError(f"unknown head {self.head!r}")
        if self.head == "softmax" and self.layer_widths[-1] < 2:
            raise ValueError("softmax head needs at least two actions")

    @property
    def n_in(self) -> int:
        return self.layer_widths[0]

    @property
    def n_out(self) -> int:
        return self.layer_widths[-1]

    @property
    def n_layers(self) -> int:
        return len(self.layer_widths) - 1

    @property
    def n_params(self) -> int:
        w = self.layer_widths
        return sum(w[i + 1] * w[i] + w[i + 1] for i in range(len(w) - 1))

    def to_dict(self) -> dict:
        return {"layer_widths": list(self.layer_widths), "activation": self.activation, "head": self.head}

    @classmethod
    def from_dict(cls, d: dict) -> "MlpSpec":
        return cls(tuple(d["layer_widths"]), d.get("activation", "relu"), d.get("head", "softmax"))


def layer_slices(spec: MlpSpec) -> list[tuple[slice, tuple[int, int], slice]]:
    """Offsets of (weights, weight shape, bias) per layer in the flat vector."""
    out = []
    off = 0
    w = spec.layer_widths
    for i in range(len(w) - 1):
        n_in, n_out = w[i], w[i + 1]
        ws = slice(off, off + n_out * n_in)
        off += n_out * n_in
        bs = slice(off, off + n_out)
        off += n_out
        out.append((ws, (n_out, n_in), bs))
    return out


def unpack(spec: MlpSpec, flat: np.ndarray) -> list[tuple[np.ndarray, np.ndarray]]:
    """Views (W, b) into `flat`; writing to them writes into the vector."""
    if flat.shape != (spec.n_params,):
        raise ShapeError(f"expected {spec.n_params} parameters, got {flat.shape}")
    return [(flat[ws].reshape(shape), flat[bs]) for ws, shape, bs in layer_slices(spec)]


def flat_offset(spec: MlpSpec, layer: int, row: int, col: int | None = None) -> int:
    """Flat index of weight (layer, row, col), or of bias (layer, row) when col is None."""
    ws, (n_out, n_in), bs = layer_slices(spec)[layer]
    if col is None:
        return bs.start + row
    return ws.start + row * n_in + col


def orthogonal(rng: np.random.Generator, shape: tuple[int, int], gain: float) -> np.ndarray:
    rows, cols = shape
    a = rng.standard_normal((max(rows, cols), min(rows, cols)))
    q, r = np.linalg.qr(a)
    q = q * np.sign(np.diag(r))
    if rows < cols:
        q = q.T
    return gain * q[:rows, :cols]


def init_params(spec: MlpSpec, rng: np.random.Generator, output_gain: float | None = None) -> np.ndarray:
    """Orthogonal weights, zero biases. Hidden gain sqrt(2) for relu, 5/3 for tanh."""
    if output_gain is None:
        output_gain = 0.01 if spec.head == "softmax" else 1.0
    hidden_gain = np.sqrt(2.0) if spec.activation == "relu" else 5.0 / 3.0
    flat = np.zeros(spec.n_params)
    layers = unpack(spec, flat)
    for i, (W, _) in enumerate(layers):
        gain = output_gain if i == len(layers) - 1 else hidden_gain
        W[...] = orthogonal(rng, W.shape, gain)
    return flat


@dataclass
class Mlp:
    """A feedforward network; with a softmax head it is a policy."""

    spec: MlpSpec
    params: np.ndarray = field(repr=False)

    def __post_init__(self):
        self.params = np.asarray(self.params, dtype=np.float64)
        if self.params.shape != (self.spec.n_params,):
            raise ShapeError(f"expected {self.spec.n_params} parameters, got {self.params.shape}")

    @classmethod
    def init(cls, spec: MlpSpec, rng: np.random.Generator, output_gain: float | None = None) -> "Mlp":
        return cls(spec, init_params(spec, rng, output_gain))

    def copy(self) -> "Mlp":
        return Mlp(self.spec, self.params.copy())

    def __call__(self, x: np.ndarray) -> np.ndarray:
        return forward(self.spec, self.params, x)[0]

    def param_hash(self) -> str:
        return param_hash(self.params)


PolicyNet = Mlp


def _activate(kind: str, z: np.ndarray) -> np.ndarray:
    return np.maximum(z, 0.0) if kind == "relu" else np.tanh(z)


def _activate_grad(kind: str, z: np.ndarray, a: np.ndarray) -> np.ndarray:
    return (z > 0.0).astype(np.float64) if kind == "relu" else 1.0 - a * a


def softmax(z: np.ndarray) -> np.ndarray:
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def floor_probs(p: np.ndarray, eps: float = PROB_FLOOR) -> np.ndarray:
    """eps + (1 - A eps) p: every entry >= eps and the sum stays 1."""
    a = p.shape[-1]
    return eps + (1.0 - a * eps) * p


def forward(spec: MlpSpec, params: np.ndarray, x: np.ndarray):
    """Run the net on one input (1-D) or a batch (2-D); returns (output, cache)."""
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 1
    X = x[None, :] if single else x
    if X.ndim != 2 or X.shape[1] != spec.n_in:
        raise ShapeError(f"input width {X.shape[-1]} does not match net input {spec.n_in}")
    layers = unpack(spec, params)
    inputs, pre = [], []
    h = X
    for i, (W, b) in enumerate(layers):
        inputs.append(h)
        z = h @ W.T + b
        pre.append(z)
        h = _activate(spec.activation, z) if i < len(layers) - 1 else z
    cache = {"inputs": inputs, "pre": pre, "single": single}
    if spec.head == "softmax":
        raw = softmax(h)
        out = floor_probs(raw)
        cache["raw"] = raw
    else:
        out = h
    cache["out"] = out
    return (out[0] if single else out), cache


def backward(spec: MlpSpec, params: np.ndarray, cache: dict, grad_out: np.ndarray) -> np.ndarray:
    """Gradient of a scalar loss w.r.t. the flat parameters.

    `grad_out` is dL/d(output): w.r.t. the floored probabilities for a
    softmax head, w.r.t. the raw outputs for a linear head.
    """
    g = np.asarray(grad_out, dtype=np.float64)
    if cache["single"]:
        g = g[None, :]
    if spec.head == "softmax":
        raw = cache["raw"]
        g_p = (1.0 - raw.shape[-1] * PROB_FLOOR) * g
        g = raw * (g_p - (g_p * raw).sum(axis=-1, keepdims=True))
    layers = unpack(spec, params)
    grad = np.zeros_like(params)
    glayers = unpack(spec, grad)
    for i in range(len(layers) - 1, -1, -1):
        W, _ = layers[i]
        gW, gb = glayers[i]
        gW[...] = g.T @ cache["inputs"][i]
        gb[...] = g.sum(axis=0)
        if i > 0:
            g = g @ W
            a = cache["inputs"][i]
            g = g * _activate_grad(spec.activation, cache["pre"][i - 1], a)
    return grad


def forward_policy(net: Mlp, obs: np.ndarray) -> np.ndarray:
    if net.spec.head != "softmax":
        raise ContractError("forward_policy needs a softmax head")
    return forward(net.spec, net.params, obs)[0]


def _check_dist(p: np.ndarray, name: str, tol: float = 1e-6) -> np.ndarray:
    p = np.asarray(p, dtype=np.float64)
    s = p.sum(axis=-1)
    if np.any(np.abs(s - 1.0) > tol) or np.any(p < 0):
        raise ContractError(f"{name} is not a probability distribution (sums {s})")
    return p


def kl_divergence(p, q) -> float | np.ndarray:
    """KL(p || q), along the last axis."""
    p = _check_dist(p, "p")
    q = _check_dist(q, "q")
    if p.shape != q.shape:
        raise ContractError(f"length mismatch {p.shape} vs {q.shape}")
    with np.errstate(divide="ignore", invalid="ignore"):
        terms = np.where(p > 0, p * (np.log(p) - np.log(q)), 0.0)
    return terms.sum(axis=-1)


def entropy(p) -> float | np.ndarray:
    p = _check_dist(p, "p")
    with np.errstate(divide="ignore", invalid="ignore"):
        terms = np.where(p > 0, p * np.log(p), 0.0)
    return -terms.sum(axis=-1)


def kl_loss_and_grad(teacher_probs: np.ndarray, student: Mlp, obs: np.ndarray):
    """Mean over the batch of KL(teacher || student(obs)) and its parameter gradient."""
    t = _check_dist(teacher_probs, "teacher_probs")
    q, cache = forward(student.spec, student.params, obs)
    if t.shape != q.shape:
        raise ShapeError(f"teacher shape {t.shape} vs student output {q.shape}")
    n = 1 if q.ndim == 1 else q.shape[0]
    loss = float(np.sum(kl_divergence(t, q))) / n
    grad = backward(student.spec, student.params, cache, -t / q / n)
    return loss, grad


def kl_grad_wrt_student(teacher_probs: np.ndarray, student: Mlp, obs: np.ndarray) -> np.ndarray:
    return kl_loss_and_grad(teacher_probs, student, obs)[1]


def entropy_loss_and_grad(net: Mlp, obs: np.ndarray):
    """Mean entropy of the policy over a batch, and its parameter gradient."""
    q, cache = forward(net.spec, net.params, obs)
    n = 1 if q.ndim == 1 else q.shape[0]
    h = float(np.sum(entropy(q))) / n
    grad = backward(net.spec, net.params, cache, -(np.log(q) + 1.0) / n)
    return h, grad


def huber_loss(pred, target, delta: float = 10.0):
    if delta <= 0:
        raise ValueError("delta must be positive")
    d = np.abs(np.asarray(pred, dtype=np.float64) - target)
    return np.where(d <= delta, 0.5 * d * d, delta * (d - 0.5 * delta))


def huber_grad(pred, target, delta: float = 10.0):
    d = np.asarray(pred, dtype=np.float64) - target
    return np.clip(d, -delta, delta)


def clip_grad_norm(grad: np.ndarray, max_norm: float) -> tuple[np.ndarray, float]:
    norm = float(np.linalg.norm(grad))
    if norm > max_norm:
        grad = grad * (max_norm / norm)
    return grad, norm


@dataclass
class AdamState:
    first_moment: np.ndarray
    second_moment: np.ndarray
    step_count: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-5

    @classmethod
    def zeros(cls, n: int, **kw) -> "AdamState":
        return cls(np.zeros(n), np.zeros(n), **kw)


def adam_step(params: np.ndarray, grads: np.ndarray, state: AdamState, lr: float) -> np.ndarray:
    """One bias-corrected Adam descent step. Mutates `state`, returns new params."""
    if params.shape != grads.shape or params.shape != state.first_moment.shape:
        raise ShapeError("params, grads and Adam state must have equal length")
    state.step_count += 1
    t = state.step_count
    state.first_moment = state.beta1 * state.first_moment + (1 - state.beta1) * grads
    state.second_moment = state.beta2 * state.second_moment + (1 - state.beta2) * grads * grads
    m_hat = state.first_moment / (1 - state.beta1**t)
    v_hat = state.second_moment / (1 - state.beta2**t)
    return params - lr * m_hat / (np.sqrt(v_hat) + state.eps)


def relabel_actions(net: Mlp, permutation) -> Mlp:
    """Policy that plays permutation[a] wherever `net` plays a."""
    perm = np.asarray(permutation, dtype=np.int64)
    if sorted(perm.tolist()) != list(range(net.spec.n_out)):
        raise ValueError("permutation must permute the output actions")
    out = net.copy()
    W, b = unpack(out.spec, out.params)[-1]
    W[perm], b[perm] = W.copy(), b.copy()
    return out


def relabel_actions(net: Mlp, permutation) -> Mlp:
    """Policy that plays permutation[a] wherever `net` plays a."""
    perm = np.asarray(permutation, dtype=np.int64)
    if sorted(perm.tolist()) != list(range(net.spec.n_out)):
        raise ValueError("permutation must permute the output actions")
    out = net.copy()
    W, b = unpack(out.spec, out.params)[-1]
    W[perm], b[perm] = W.copy(), b.copy()
    return out


def param_hash(values: np.ndarray) -> str:
    return hashlib.sha256(np.ascontiguousarray(values, dtype="<f8").tobytes()).hexdigest()


def to_checkpoint(net: Mlp) -> dict:
    return {
        "spec": net.spec.to_dict(),
        "layout_version": LAYOUT_VERSION,
        "values": [float(v) for v in net.params],
    }


def from_checkpoint(doc: dict) -> Mlp:
    if doc.get("layout_version") != LAYOUT_VERSION:
        raise ValueError(f"unsupported layout_version {doc.get('layout_version')!r}")
    return Mlp(MlpSpec.from_dict(doc["spec"]), np.array(doc["values"], dtype=np.float64))


def save_checkpoint(net: Mlp, path: str | Path) -> None:
    # json writes floats with repr(), which round-trips float64 exactly
    Path(path).write_text(json.dumps(to_checkpoint(net)))


def load_checkpoint(path: str | Path) -> Mlp:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"checkpoint not found: {path}")
    return from_checkpoint(json.loads(path.read_text()))
