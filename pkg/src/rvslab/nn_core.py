"""Two-hidden-layer ReLU policy network written directly in numpy.

Everything is float64. Parameters live in an ordered dict so that gradient
dicts, Adam moments and the checkpoint format all share one declaration
order: ``W1, b1, W2, b2, W3, b3`` and, for Gaussian heads, ``log_std``.
"""

from __future__ import annotations

import io
import json
import math
import struct
from dataclasses import dataclass, field

import numpy as np

from rvslab.seeding import derive_rng

LOG_STD_BOUNDS = (-5.0, 2.0)
ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8

CHECKPOINT_MAGIC = b"RVSC"
CHECKPOINT_VERSION = 1

_HALF_LOG_2PI = 0.5 * math.log(2.0 * math.pi)


class NonFiniteError(FloatingPointError):
    """Raised when an input, loss or gradient contains NaN or inf."""


class CheckpointFormatError(ValueError):
    def __init__(self, message: str, offset: int | None = None):
        if offset is not None:
            message = f"{message} (at byte {offset})"
        super().__init__(message)
        self.offset = offset


# ---------------------------------------------------------------------------
# Heads


@dataclass(frozen=True)
class CategoricalHead:
    """Independent softmax over ``bins`` equal-width bins for each action dim.

    A discrete action space with K actions is the special case
    ``low=-0.5, high=K-0.5, bins=K``: bin centers are then exactly 0..K-1.
    """

    low: tuple[float, ...]
    high: tuple[float, ...]
    bins: int = 15

    kind = "categorical"

    def __post_init__(self):
        if self.bins < 2:
            raise ValueError("categorical head needs at least 2 bins per dimension")
        if len(self.low) != len(self.high) or not self.low:
            raise ValueError("low/high must be non-empty and of equal length")
        if any(h <= l for l, h in zip(self.low, self.high)):
            raise ValueError("every high bound must exceed its low bound")

    @classmethod
    def for_discrete(cls, n_actions: int) -> "CategoricalHead":
        return cls(low=(-0.5,), high=(n_actions - 0.5,), bins=n_actions)

    @property
    def action_dims(self) -> int:
        return len(self.low)

    @property
    def output_dim(self) -> int:
        return self.action_dims * self.bins

    def centers(self) -> np.ndarray:
        low = np.asarray(self.low, dtype=np.float64)[:, None]
        width = (np.asarray(self.high, dtype=np.float64) - np.asarray(self.low))[:, None] / self.bins
        return low + (np.arange(self.bins) + 0.5) * width

    def to_bins(self, actions: np.ndarray) -> tuple[np.ndarray, int]:
        """Map continuous actions to bin indices; returns (indices, n_out_of_range)."""
        actions = np.asarray(actions, dtype=np.float64).reshape(-1, self.action_dims)
        low = np.asarray(self.low)
        high = np.asarray(self.high)
        outside = int(np.count_nonzero((actions < low) | (actions > high)))
        idx = np.floor((actions - low) / (high - low) * self.bins).astype(np.int64)
        return np.clip(idx, 0, self.bins - 1), outside

    def to_dict(self) -> dict:
        return {"kind": "categorical", "low": list(self.low), "high": list(self.high), "bins": self.bins}


@dataclass(frozen=True)
class GaussianHead:
    """Diagonal Gaussian; the mean comes from the network, log-std is a free vector."""

    action_dims: int

    kind = "gaussian"

    def __post_init__(self):
        if self.action_dims < 1:
            raise ValueError("gaussian head needs at least one action dimension")

    @property
    def output_dim(self) -> int:
        return self.action_dims

    def to_dict(self) -> dict:
        return {"kind": "gaussian", "action_dims": self.action_dims}


HeadSpec = CategoricalHead | GaussianHead


def head_from_dict(d: dict) -> HeadSpec:
    if d["kind"] == "categorical":
        return CategoricalHead(tuple(float(x) for x in d["low"]), tuple(float(x) for x in d["high"]), int(d["bins"]))
    if d["kind"] == "gaussian":
        return GaussianHead(int(d["action_dims"]))
    raise ValueError(f"unknown head kind {d['kind']!r}")


@dataclass
class HeadOutputs:
    """Per-example distribution parameters.

    ``logits`` has shape (N, action_dims, bins) for categorical heads;
    ``mean`` (N, action_dims) and ``log_std`` (action_dims,) for Gaussian.
    ``cache`` holds the intermediates needed by :func:`nll_loss`.
    """

    head: HeadSpec
    logits: np.ndarray | None = None
    mean: np.ndarray | None = None
    log_std: np.ndarray | None = None
    cache: dict | None = field(default=None, repr=False)

    def __len__(self):
        return len(self.logits if self.logits is not None else self.mean)

    def row(self, i: int) -> "HeadOutputs":
        if self.logits is not None:
            return HeadOutputs(self.head, logits=self.logits[i : i + 1])
        return HeadOutputs(self.head, mean=self.mean[i : i + 1], log_std=self.log_std)


# ---------------------------------------------------------------------------
# Network


class MlpPolicy:
    """``input -> fc -> relu -> dropout -> fc -> relu -> dropout -> head``."""

    def __init__(self, input_dim: int, hidden_width: int, head: HeadSpec, dropout_p: float = 0.0):
        if input_dim < 1 or hidden_width < 1:
            raise ValueError(f"dimensions must be positive (input_dim={input_dim}, hidden_width={hidden_width})")
        if not 0.0 <= dropout_p < 1.0:
            raise ValueError(f"dropout_p must be in [0, 1), got {dropout_p}")
        self.input_dim = int(input_dim)
        self.hidden_width = int(hidden_width)
        self.head = head
        self.dropout_p = float(dropout_p)
        out = head.output_dim
        self.params: dict[str, np.ndarray] = {
            "W1": np.zeros((hidden_width, input_dim)),
            "b1": np.zeros(hidden_width),
            "W2": np.zeros((hidden_width, hidden_width)),
            "b2": np.zeros(hidden_width),
            "W3": np.zeros((out, hidden_width)),
            "b3": np.zeros(out),
        }
        if isinstance(head, GaussianHead):
            self.params["log_std"] = np.zeros(head.action_dims)
        # out-of-range categorical targets seen by nll_loss
        self.clamped_actions = 0

    def num_parameters(self) -> int:
        return sum(p.size for p in self.params.values())

    def copy(self) -> "MlpPolicy":
        other = MlpPolicy(self.input_dim, self.hidden_width, self.head, self.dropout_p)
        other.params = {k: v.copy() for k, v in self.params.items()}
        other.clamped_actions = self.clamped_actions
        return other

    def same_parameters(self, other: "MlpPolicy") -> bool:
        return self.params.keys() == other.params.keys() and all(
            np.array_equal(self.params[k], other.params[k]) for k in self.params
        )

    def draw_masks(self, batch_size: int, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray] | None:
        """Inverted-dropout masks for both hidden layers (None when p == 0)."""
        if self.dropout_p == 0.0:
            return None
        keep = 1.0 - self.dropout_p
        shape = (batch_size, self.hidden_width)
        m1 = (rng.random(shape) < keep) / keep
        m2 = (rng.random(shape) < keep) / keep
        return m1, m2

    def forward(self, x, train: bool = False, rng: np.random.Generator | None = None,
                masks=None, gates=None) -> HeadOutputs:
        return forward(self, x, train=train, rng=rng, masks=masks, gates=gates)


def init_mlp(input_dim: int, hidden_width: int, head: HeadSpec, seed: int, dropout_p: float = 0.0) -> MlpPolicy:
    """Fan-in uniform init: weights ~ U(-sqrt(6/fan_in), sqrt(6/fan_in)), zero biases."""
    policy = MlpPolicy(input_dim, hidden_width, head, dropout_p)
    rng = derive_rng(seed, "init_mlp")
    for name in ("W1", "W2", "W3"):
        w = policy.params[name]
        bound = math.sqrt(6.0 / w.shape[1])
        policy.params[name] = rng.uniform(-bound, bound, size=w.shape)
    return policy


def forward(policy: MlpPolicy, x, train: bool = False, rng: np.random.Generator | None = None,
            masks=None, gates=None) -> HeadOutputs:
    """Compute head parameters for a batch of ``[state, condition]`` rows.

    In train mode with ``dropout_p > 0`` masks are drawn from ``rng`` unless
    given explicitly. ``gates`` optionally fixes the ReLU on/off pattern,
    which the gradient checker uses to step across kinks.
    """
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 1:
        x = x[None, :]
    if x.ndim != 2 or x.shape[1] != policy.input_dim:
        raise ValueError(f"expected input with {policy.input_dim} columns, got shape {x.shape}")
    if not np.all(np.isfinite(x)):
        raise NonFiniteError("non-finite network input")
    p = policy.params
    if train and masks is None and policy.dropout_p > 0.0:
        if rng is None:
            raise ValueError("train-mode dropout needs an rng")
        masks = policy.draw_masks(len(x), rng)
    if not train:
        masks = None

    z1 = x @ p["W1"].T + p["b1"]
    g1 = (z1 > 0) if gates is None else gates[0]
    h1 = z1 * g1
    if masks is not None:
        h1 = h1 * masks[0]
    z2 = h1 @ p["W2"].T + p["b2"]
    g2 = (z2 > 0) if gates is None else gates[1]
    h2 = z2 * g2
    if masks is not None:
        h2 = h2 * masks[1]
    out = h2 @ p["W3"].T + p["b3"]

    cache = {"x": x, "g1": g1, "g2": g2, "h1": h1, "h2": h2, "masks": masks}
    head = policy.head
    if isinstance(head, CategoricalHead):
        return HeadOutputs(head, logits=out.reshape(len(x), head.action_dims, head.bins), cache=cache)
    return HeadOutputs(head, mean=out, log_std=p["log_std"].copy(), cache=cache)


def _log_softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=-1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))


def head_nll(outputs: HeadOutputs, actions) -> tuple[float, np.ndarray, np.ndarray | None, int]:
    """Mean NLL and its gradient w.r.t. the raw head output (and log_std).

    Returns ``(loss, d_out, d_log_std, n_clamped)``.
    """
    head = outputs.head
    n = len(outputs)
    actions = np.asarray(actions, dtype=np.float64).reshape(n, head.action_dims)
    if isinstance(head, CategoricalHead):
        idx, n_clamped = head.to_bins(actions)
        logp = _log_softmax(outputs.logits)
        rows = np.arange(n)[:, None]
        dims = np.arange(head.action_dims)[None, :]
        loss = -logp[rows, dims, idx].sum() / n
        grad = np.exp(logp)
        grad[rows, dims, idx] -= 1.0
        return float(loss), grad.reshape(n, -1) / n, None, n_clamped
    log_std = outputs.log_std
    inv_var = np.exp(-2.0 * log_std)
    diff = outputs.mean - actions
    sq = diff * diff * inv_var
    loss = (0.5 * sq.sum() + n * (log_std.sum() + head.action_dims * _HALF_LOG_2PI)) / n
    d_mean = diff * inv_var / n
    d_log_std = (1.0 - sq).sum(axis=0) / n
    return float(loss), d_mean, d_log_std, 0


def backward(policy: MlpPolicy, cache: dict, d_out: np.ndarray) -> dict[str, np.ndarray]:
    p = policy.params
    masks = cache["masks"]
    grads = {}
    grads["W3"] = d_out.T @ cache["h2"]
    grads["b3"] = d_out.sum(axis=0)
    dh2 = d_out @ p["W3"]
    if masks is not None:
        dh2 = dh2 * masks[1]
    dz2 = dh2 * cache["g2"]
    grads["W2"] = dz2.T @ cache["h1"]
    grads["b2"] = dz2.sum(axis=0)
    dh1 = dz2 @ p["W2"]
    if masks is not None:
        dh1 = dh1 * masks[0]
    dz1 = dh1 * cache["g1"]
    grads["W1"] = dz1.T @ cache["x"]
    grads["b1"] = dz1.sum(axis=0)
    return {k: grads[k] for k in ("W1", "b1", "W2", "b2", "W3", "b3")}


def nll_loss(policy: MlpPolicy, outputs: HeadOutputs, actions) -> tuple[float, dict[str, np.ndarray]]:
    """Mean negative log-likelihood of ``actions`` and gradients for every parameter.

    ``outputs`` must come from :func:`forward` on the same policy (it carries
    the backward cache). Categorical targets outside [low, high] are clamped to
    the edge bin and counted in ``policy.clamped_actions``.
    """
    if outputs.cache is None:
        raise ValueError("outputs carry no backward cache; call forward() on this policy")
    loss, d_out, d_log_std, n_clamped = head_nll(outputs, actions)
    policy.clamped_actions += n_clamped
    grads = backward(policy, outputs.cache, d_out)
    if d_log_std is not None:
        grads["log_std"] = d_log_std
    return loss, grads


def loss_and_grad(policy: MlpPolicy, x, actions, train: bool = False, rng=None, masks=None):
    return nll_loss(policy, forward(policy, x, train=train, rng=rng, masks=masks), actions)


# ---------------------------------------------------------------------------
# Optimizer


class AdamState:
    def __init__(self, policy: MlpPolicy, beta1: float = ADAM_BETA1, beta2: float = ADAM_BETA2, eps: float = ADAM_EPS):
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.step = 0
        self.m = {k: np.zeros_like(v) for k, v in policy.params.items()}
        self.v = {k: np.zeros_like(v) for k, v in policy.params.items()}

    def copy(self) -> "AdamState":
        other = object.__new__(AdamState)
        other.beta1, other.beta2, other.eps, other.step = self.beta1, self.beta2, self.eps, self.step
        other.m = {k: a.copy() for k, a in self.m.items()}
        other.v = {k: a.copy() for k, a in self.v.items()}
        return other

    def equals(self, other: "AdamState") -> bool:
        return (
            (self.beta1, self.beta2, self.eps, self.step) == (other.beta1, other.beta2, other.eps, other.step)
            and all(np.array_equal(self.m[k], other.m[k]) and np.array_equal(self.v[k], other.v[k]) for k in self.m)
        )


def adam_step(policy: MlpPolicy, grads: dict[str, np.ndarray], state: AdamState, learning_rate: float) -> MlpPolicy:
    """One bias-corrected Adam update, in place. Non-finite gradients abort before any change."""
    for name, p in policy.params.items():
        g = grads[name]
        if g.shape != p.shape:
            raise ValueError(f"gradient for {name} has shape {g.shape}, parameter has {p.shape}")
        if not np.all(np.isfinite(g)):
            raise NonFiniteError(f"non-finite gradient for {name}")
    state.step += 1
    t = state.step
    c1 = 1.0 - state.beta1**t
    c2 = 1.0 - state.beta2**t
    for name, p in policy.params.items():
        g = grads[name]
        m, v = state.m[name], state.v[name]
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * (g * g)
        p -= learning_rate * (m / c1) / (np.sqrt(v / c2) + state.eps)
    if "log_std" in policy.params:
        np.clip(policy.params["log_std"], *LOG_STD_BOUNDS, out=policy.params["log_std"])
    return policy


# ---------------------------------------------------------------------------
# Verification


def gradient_check(policy: MlpPolicy, batch, epsilon: float = 1e-5, train: bool = False,
                   rng: np.random.Generator | None = None) -> float:
    """Largest relative error between backprop and central differences.

    ``batch`` is ``(inputs, actions)``. In train mode the dropout masks are
    drawn once and held fixed across all perturbations. When a perturbation
    flips a ReLU, that coordinate is re-differenced with the unperturbed
    on/off pattern held fixed, i.e. inside the linear piece where the analytic
    gradient is defined.
    """
    if not 0.0 < epsilon <= 1e-3:
        raise ValueError("epsilon must be in (0, 1e-3]")
    x, actions = batch
    x = np.asarray(x, dtype=np.float64)
    masks = None
    if train and policy.dropout_p > 0.0:
        if rng is None:
            raise ValueError("train-mode check needs an rng for the frozen masks")
        masks = policy.draw_masks(len(x), rng)
    base = forward(policy, x, train=train, masks=masks)
    gates = (base.cache["g1"], base.cache["g2"])
    _, analytic = nll_loss(policy, base, actions)

    def loss_at(fixed_gates):
        out = forward(policy, x, train=train, masks=masks, gates=fixed_gates)
        return head_nll(out, actions)[0], out.cache

    def flipped(cache):
        return not (np.array_equal(cache["g1"], gates[0]) and np.array_equal(cache["g2"], gates[1]))

    worst = 0.0
    for name, param in policy.params.items():
        flat = param.reshape(-1)
        ga = analytic[name].reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + epsilon
            lp, cp = loss_at(None)
            flat[i] = orig - epsilon
            lm, cm = loss_at(None)
            if flipped(cp) or flipped(cm):
                flat[i] = orig + epsilon
                lp, _ = loss_at(gates)
                flat[i] = orig - epsilon
                lm, _ = loss_at(gates)
            flat[i] = orig
            gn = (lp - lm) / (2.0 * epsilon)
            err = abs(ga[i] - gn) / max(1e-8, abs(ga[i]) + abs(gn))
            worst = max(worst, err)
    return worst


# ---------------------------------------------------------------------------
# Acting


def sample_action(outputs: HeadOutputs, mode: str = "stochastic", rng: np.random.Generator | None = None) -> np.ndarray:
    """Actions of shape (N, action_dims).

    Categorical actions are bin centers (argmax breaks ties toward the lowest
    bin); deterministic Gaussian actions are the mean itself.
    """
    if mode not in ("stochastic", "deterministic"):
        raise ValueError(f"unknown sampling mode {mode!r}")
    head = outputs.head
    if isinstance(head, CategoricalHead):
        logits = outputs.logits
        if mode == "deterministic":
            idx = np.argmax(logits, axis=-1)
        else:
            probs = np.exp(_log_softmax(logits))
            cdf = np.cumsum(probs, axis=-1)
            u = rng.random(logits.shape[:-1])[..., None]
            idx = np.minimum((cdf <= u * cdf[..., -1:]).sum(axis=-1), head.bins - 1)
        centers = head.centers()
        return centers[np.arange(head.action_dims)[None, :], idx]
    if mode == "deterministic":
        return outputs.mean.copy()
    return outputs.mean + np.exp(outputs.log_std) * rng.standard_normal(outputs.mean.shape)


# ---------------------------------------------------------------------------
# Checkpoint encoding


def encode_checkpoint(policy: MlpPolicy, adam: AdamState | None, metadata: dict | None = None) -> bytes:
    """Serialize a policy (and optionally its optimizer state) to bytes.

    Layout: ``RVSC`` magic, u32 version, u32 header length, UTF-8 JSON header
    (dims, head spec, dropout, parameter shapes), the parameters as
    little-endian float64 in declaration order, a u8 Adam flag followed by the
    step counter and both moment sets, then a length-prefixed JSON metadata
    blob. All integers are little-endian.
    """
    header = {
        "input_dim": policy.input_dim,
        "hidden_width": policy.hidden_width,
        "dropout_p": policy.dropout_p,
        "head": policy.head.to_dict(),
        "params": [[k, list(v.shape)] for k, v in policy.params.items()],
        "clamped_actions": policy.clamped_actions,
    }
    buf = io.BytesIO()
    hbytes = json.dumps(header, sort_keys=True).encode("utf-8")
    buf.write(CHECKPOINT_MAGIC)
    buf.write(struct.pack("<II", CHECKPOINT_VERSION, len(hbytes)))
    buf.write(hbytes)
    for v in policy.params.values():
        buf.write(np.ascontiguousarray(v, dtype="<f8").tobytes())
    if adam is None:
        buf.write(struct.pack("<B", 0))
    else:
        buf.write(struct.pack("<B", 1))
        buf.write(struct.pack("<Qddd", adam.step, adam.beta1, adam.beta2, adam.eps))
        for k in policy.params:
            buf.write(np.ascontiguousarray(adam.m[k], dtype="<f8").tobytes())
        for k in policy.params:
            buf.write(np.ascontiguousarray(adam.v[k], dtype="<f8").tobytes())
    mbytes = json.dumps(metadata or {}, sort_keys=True).encode("utf-8")
    buf.write(struct.pack("<Q", len(mbytes)))
    buf.write(mbytes)
    return buf.getvalue()


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, n: int, what: str) -> bytes:
        if self.pos + n > len(self.data):
            raise CheckpointFormatError(f"truncated checkpoint while reading {what}", self.pos)
        chunk = self.data[self.pos : self.pos + n]
        self.pos += n
        return chunk

    def unpack(self, fmt: str, what: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt), what))

    def array(self, shape, what: str) -> np.ndarray:
        count = int(np.prod(shape)) if len(shape) else 1
        raw = self.take(8 * count, what)
        return np.frombuffer(raw, dtype="<f8").astype(np.float64).reshape(shape)


def decode_checkpoint(data: bytes) -> tuple[MlpPolicy, AdamState | None, dict]:
    r = _Reader(data)
    if r.take(4, "magic") != CHECKPOINT_MAGIC:
        raise CheckpointFormatError("not a policy checkpoint (bad magic)", 0)
    version, hlen = r.unpack("<II", "header")
    if version != CHECKPOINT_VERSION:
        raise CheckpointFormatError(f"unsupported checkpoint version {version}", 4)
    try:
        header = json.loads(r.take(hlen, "header").decode("utf-8"))
        head = head_from_dict(header["head"])
        policy = MlpPolicy(header["input_dim"], header["hidden_width"], head, header["dropout_p"])
    except (ValueError, KeyError, TypeError) as exc:
        raise CheckpointFormatError(f"corrupt checkpoint header: {exc}", 12) from exc
    shapes = [(k, tuple(s)) for k, s in header["params"]]
    if [k for k, _ in shapes] != list(policy.params) or any(
        policy.params[k].shape != s for k, s in shapes
    ):
        raise CheckpointFormatError("parameter layout does not match header dimensions", 12)
    for k, shape in shapes:
        policy.params[k] = r.array(shape, f"parameter {k}")
    policy.clamped_actions = int(header.get("clamped_actions", 0))
    (has_adam,) = r.unpack("<B", "optimizer flag")
    adam = None
    if has_adam:
        adam = AdamState(policy)
        adam.step, adam.beta1, adam.beta2, adam.eps = r.unpack("<Qddd", "optimizer header")
        for k, shape in shapes:
            adam.m[k] = r.array(shape, f"first moment {k}")
        for k, shape in shapes:
            adam.v[k] = r.array(shape, f"second moment {k}")
    (mlen,) = r.unpack("<Q", "metadata length")
    try:
        metadata = json.loads(r.take(mlen, "metadata").decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointFormatError(f"corrupt metadata block: {exc}", r.pos) from exc
    if r.pos != len(data):
        raise CheckpointFormatError("trailing bytes after metadata", r.pos)
    return policy, adam, metadata
