"""Offline trajectories, hindsight relabeling, baseline filters and file formats.

Timesteps are 1-based in the docstrings to match the usual RL notation
(``s_1 .. s_T``); arrays are of course 0-based, so ``states[t - 1]`` is s_t.
"""

from __future__ import annotations

import hashlib
import io
import json
import math
import struct
from dataclasses import dataclass, field
from fractions import Fraction
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np

from rvslab.seeding import derive_rng

DATASET_MAGIC = b"RVSD"
DATASET_VERSION = 1
JSONL_FORMAT = "rvs-dataset"


class DatasetFormatError(ValueError):
    """Malformed dataset file. ``line`` (text) or ``offset`` (binary) locates the problem."""

    def __init__(self, message: str, line: int | None = None, offset: int | None = None):
        where = []
        if line is not None:
            where.append(f"line {line}")
        if offset is not None:
            where.append(f"byte {offset}")
        super().__init__(f"{message} ({', '.join(where)})" if where else message)
        self.line = line
        self.offset = offset


def _frozen(a, ndim: int) -> np.ndarray:
    arr = np.array(a, dtype=np.float64)
    if ndim == 2 and arr.ndim == 1:
        arr = arr[:, None]
    if arr.ndim != ndim:
        raise ValueError(f"expected a {ndim}-d array, got shape {arr.shape}")
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True, eq=False)
class Trajectory:
    """One episode. ``terminated`` is true when it ended before the horizon."""

    states: np.ndarray
    actions: np.ndarray
    rewards: np.ndarray
    terminated: bool = False

    def __post_init__(self):
        object.__setattr__(self, "states", _frozen(self.states, 2))
        object.__setattr__(self, "actions", _frozen(self.actions, 2))
        object.__setattr__(self, "rewards", _frozen(self.rewards, 1))
        object.__setattr__(self, "terminated", bool(self.terminated))
        T = len(self.states)
        if T < 1 or len(self.actions) != T or len(self.rewards) != T:
            raise ValueError(
                f"trajectory arrays must share a length >= 1 "
                f"(states {len(self.states)}, actions {len(self.actions)}, rewards {len(self.rewards)})"
            )
        for name in ("states", "actions", "rewards"):
            if not np.all(np.isfinite(getattr(self, name))):
                raise ValueError(f"non-finite entries in trajectory {name}")

    def __len__(self) -> int:
        return len(self.states)

    @property
    def total_reward(self) -> float:
        return float(self.rewards.sum())

    def __eq__(self, other):
        if not isinstance(other, Trajectory):
            return NotImplemented
        return (
            self.terminated == other.terminated
            and np.array_equal(self.states, other.states)
            and np.array_equal(self.actions, other.actions)
            and np.array_equal(self.rewards, other.rewards)
        )

    __hash__ = None


@dataclass(frozen=True, eq=False)
class Dataset:
    env_id: str
    horizon: int
    trajectories: tuple[Trajectory, ...]
    provenance: str = ""
    env_spec: dict | None = field(default=None, compare=False)

    def __post_init__(self):
        object.__setattr__(self, "trajectories", tuple(self.trajectories))
        if not self.trajectories:
            raise ValueError("a dataset needs at least one trajectory")
        if self.horizon < max(len(t) for t in self.trajectories):
            raise ValueError("horizon is shorter than the longest trajectory")
        sd = {t.states.shape[1] for t in self.trajectories}
        ad = {t.actions.shape[1] for t in self.trajectories}
        if len(sd) != 1 or len(ad) != 1:
            raise ValueError("all trajectories must share state and action dimensions")

    def __len__(self) -> int:
        return len(self.trajectories)

    def __iter__(self):
        return iter(self.trajectories)

    def __getitem__(self, i) -> Trajectory:
        return self.trajectories[i]

    @property
    def state_dim(self) -> int:
        return self.trajectories[0].states.shape[1]

    @property
    def action_dim(self) -> int:
        return self.trajectories[0].actions.shape[1]

    @property
    def num_transitions(self) -> int:
        return sum(len(t) for t in self.trajectories)

    def returns(self) -> np.ndarray:
        return np.array([t.total_reward for t in self.trajectories])

    def subset(self, indices: Iterable[int], note: str | None = None) -> "Dataset":
        prov = self.provenance if note is None else f"{self.provenance}|{note}"
        return Dataset(self.env_id, self.horizon, tuple(self.trajectories[i] for i in indices), prov, self.env_spec)

    def __eq__(self, other):
        if not isinstance(other, Dataset):
            return NotImplemented
        return (
            (self.env_id, self.horizon, self.provenance) == (other.env_id, other.horizon, other.provenance)
            and len(self) == len(other)
            and all(a == b for a, b in zip(self.trajectories, other.trajectories))
        )

    __hash__ = None

    def content_hash(self) -> str:
        return hashlib.sha256(encode_binary(self)).hexdigest()


# ---------------------------------------------------------------------------
# Outcomes


_GOAL_EXTRACTORS: dict[str, Callable[[np.ndarray], np.ndarray]] = {}


def register_goal_extractor(name: str, fn: Callable[[np.ndarray], np.ndarray]) -> None:
    _GOAL_EXTRACTORS[name] = fn


def get_goal_extractor(name: str) -> Callable[[np.ndarray], np.ndarray]:
    try:
        return _GOAL_EXTRACTORS[name]
    except KeyError:
        raise KeyError(f"unknown goal extractor {name!r}; known: {sorted(_GOAL_EXTRACTORS)}") from None


register_goal_extractor("identity", lambda s: np.array(s, dtype=np.float64, copy=True))
register_goal_extractor("xy", lambda s: np.array(s[..., :2], dtype=np.float64, copy=True))
register_goal_extractor("first", lambda s: np.array(s[..., :1], dtype=np.float64, copy=True))


@dataclass(frozen=True)
class GoalOutcome:
    """Condition on a state visited later in the same trajectory (RvS-G)."""

    extractor: str = "identity"
    kind = "goal"

    def condition_dim(self, state_dim: int) -> int:
        return len(get_goal_extractor(self.extractor)(np.zeros(state_dim)))


@dataclass(frozen=True)
class AvgReturnOutcome:
    """Condition on the average reward-to-go with the horizon fixed in the denominator (RvS-R)."""

    kind = "avg_return"

    def condition_dim(self, state_dim: int) -> int:
        return 1


@dataclass(frozen=True)
class NoOutcome:
    """Unconditioned behavior cloning."""

    kind = "none"

    def condition_dim(self, state_dim: int) -> int:
        return 0


OutcomeSpec = GoalOutcome | AvgReturnOutcome | NoOutcome


def outcome_from_dict(d: dict) -> OutcomeSpec:
    kind = d["kind"]
    if kind == "goal":
        return GoalOutcome(d.get("extractor", "identity"))
    if kind == "avg_return":
        return AvgReturnOutcome()
    if kind == "none":
        return NoOutcome()
    raise ValueError(f"unknown outcome kind {kind!r}")


def outcome_to_dict(o: OutcomeSpec) -> dict:
    d = {"kind": o.kind}
    if isinstance(o, GoalOutcome):
        d["extractor"] = o.extractor
    return d


def sample_goal(traj: Trajectory, t: int, rng: np.random.Generator, extractor: str = "identity") -> np.ndarray:
    """Goal for timestep ``t``: extractor(s_t') with t' uniform over t+1..T."""
    T = len(traj)
    if not 1 <= t < T:
        raise ValueError(f"timestep {t} has no future state in a length-{T} trajectory")
    t_future = int(rng.integers(t + 1, T + 1))
    return get_goal_extractor(extractor)(traj.states[t_future - 1])


def avg_return_to_go(traj: Trajectory, t: int, horizon: int) -> float:
    """(r_t + ... + r_T) / (H - t + 1); steps after an early end count as zero reward."""
    T = len(traj)
    if not 1 <= t <= T:
        raise ValueError(f"timestep {t} outside 1..{T}")
    if horizon < T:
        raise ValueError(f"horizon {horizon} shorter than trajectory length {T}")
    # fsum is correctly rounded, so the result does not depend on summation order
    return math.fsum(traj.rewards[t - 1 :].tolist()) / (horizon - t + 1)


@dataclass
class Batch:
    states: np.ndarray
    conditions: np.ndarray
    actions: np.ndarray
    traj_index: np.ndarray
    timestep: np.ndarray

    def __len__(self):
        return len(self.states)

    def inputs(self) -> np.ndarray:
        return np.concatenate([self.states, self.conditions], axis=1)


class BatchSampler:
    """Vectorized hindsight relabeling over a fixed dataset.

    Sampling order per example: trajectory uniform, then timestep uniform over
    that trajectory's valid range (``timesteps="uniform"``), or a transition
    chosen uniformly across the whole dataset (``timesteps="length_weighted"``).
    """

    def __init__(self, dataset: Dataset, outcome: OutcomeSpec, timesteps: str = "uniform"):
        if timesteps not in ("uniform", "length_weighted"):
            raise ValueError(f"unknown timestep sampling {timesteps!r}")
        self.dataset = dataset
        self.outcome = outcome
        self.timesteps = timesteps
        lengths = np.array([len(t) for t in dataset], dtype=np.int64)
        self.lengths = lengths
        self.offsets = np.concatenate([[0], np.cumsum(lengths)[:-1]])
        self.states = np.concatenate([t.states for t in dataset])
        self.actions = np.concatenate([t.actions for t in dataset])
        if isinstance(outcome, GoalOutcome):
            self.valid = lengths - 1
            self.eligible = np.flatnonzero(self.valid > 0)
            if self.eligible.size == 0:
                raise ValueError("goal relabeling needs at least one trajectory with two or more steps")
            ext = get_goal_extractor(outcome.extractor)
            self.goals = np.stack([ext(s) for s in self.states]) if len(self.states) else None
        else:
            self.valid = lengths
            self.eligible = np.arange(len(dataset))
            if isinstance(outcome, AvgReturnOutcome):
                H = dataset.horizon
                self.rtg = np.array(
                    [avg_return_to_go(tr, t, H) for tr in dataset for t in range(1, len(tr) + 1)]
                )
        self.condition_dim = outcome.condition_dim(dataset.state_dim)
        weights = self.valid[self.eligible].astype(np.float64)
        self.cum_valid = np.cumsum(weights)

    def sample(self, batch_size: int, rng: np.random.Generator) -> Batch:
        if batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.timesteps == "uniform":
            ti = self.eligible[rng.integers(0, len(self.eligible), size=batch_size)]
            t = 1 + np.floor(rng.random(batch_size) * self.valid[ti]).astype(np.int64)
        else:
            flat = rng.integers(0, int(self.cum_valid[-1]), size=batch_size)
            k = np.searchsorted(self.cum_valid, flat, side="right")
            ti = self.eligible[k]
            before = np.where(k > 0, self.cum_valid[np.maximum(k - 1, 0)], 0).astype(np.int64)
            t = 1 + flat - before
        row = self.offsets[ti] + t - 1
        states = self.states[row]
        actions = self.actions[row]
        if isinstance(self.outcome, GoalOutcome):
            # t' uniform over t+1..T
            span = self.lengths[ti] - t
            t_future = t + 1 + np.floor(rng.random(batch_size) * span).astype(np.int64)
            conditions = self.goals[self.offsets[ti] + t_future - 1]
        elif isinstance(self.outcome, AvgReturnOutcome):
            conditions = self.rtg[row][:, None]
        else:
            conditions = np.zeros((batch_size, 0))
        return Batch(states, conditions, actions, ti, t)


def build_batch(dataset: Dataset, outcome: OutcomeSpec, batch_size: int, rng: np.random.Generator,
                timesteps: str = "uniform") -> Batch:
    return BatchSampler(dataset, outcome, timesteps).sample(batch_size, rng)


# ---------------------------------------------------------------------------
# Filters, splits, scores


def filter_top_fraction(dataset: Dataset, fraction: float) -> Dataset:
    """Keep the ceil(fraction * N) highest-return trajectories; ties go to the earlier index."""
    if not 0.0 < fraction <= 1.0:
        raise ValueError("fraction must be in (0, 1]")
    n = len(dataset)
    # decimal reading of the fraction, so 0.1 * 10 keeps exactly one trajectory
    k = min(n, math.ceil(Fraction(repr(float(fraction))) * n))
    order = np.lexsort((np.arange(n), -dataset.returns()))
    keep = np.sort(order[:k])
    return dataset.subset(keep.tolist(), note=f"top{fraction:g}")


def reward_equals_one(traj: Trajectory) -> bool:
    return bool(np.any(traj.rewards == 1.0))


def filter_successful(dataset: Dataset, success_predicate: Callable[[Trajectory], bool] = reward_equals_one) -> Dataset:
    keep = [i for i, t in enumerate(dataset) if success_predicate(t)]
    if not keep:
        raise ValueError("no trajectory satisfies the success predicate")
    return dataset.subset(keep, note="successful")


def split_indices(n: int, train_fraction: float, seed: int) -> tuple[np.ndarray, np.ndarray]:
    if n < 2:
        raise ValueError("need at least two trajectories to split")
    if not 0.0 < train_fraction < 1.0:
        raise ValueError("train_fraction must be in (0, 1)")
    n_train = min(max(int(math.floor(train_fraction * n + 1e-9)), 1), n - 1)
    perm = derive_rng(seed, "split").permutation(n)
    return np.sort(perm[:n_train]), np.sort(perm[n_train:])


def split_train_validation(dataset: Dataset, train_fraction: float = 0.8, seed: int = 0) -> tuple[Dataset, Dataset]:
    """Split whole trajectories; sizes are (floor(f*N), rest), each side non-empty."""
    tr, va = split_indices(len(dataset), train_fraction, seed)
    return dataset.subset(tr.tolist(), note="train"), dataset.subset(va.tolist(), note="validation")


def normalized_score(raw_return: float, random_ref: float, expert_ref: float) -> float:
    if expert_ref == random_ref:
        raise ValueError("expert and random reference scores must differ")
    return 100.0 * (raw_return - random_ref) / (expert_ref - random_ref)


# ---------------------------------------------------------------------------
# Serialization


def _header(dataset: Dataset) -> dict:
    h = {"env_id": dataset.env_id, "horizon_H": dataset.horizon, "provenance": dataset.provenance}
    if dataset.env_spec is not None:
        h["env_spec"] = dataset.env_spec
    return h


def encode_jsonl(dataset: Dataset) -> str:
    lines = [json.dumps({"format": JSONL_FORMAT, "version": DATASET_VERSION, **_header(dataset)}, sort_keys=True)]
    for t in dataset:
        rec = {
            "states": t.states.tolist(),
            "actions": t.actions.tolist(),
            "rewards": t.rewards.tolist(),
            "terminated": t.terminated,
        }
        lines.append(json.dumps(rec))
    return "\n".join(lines) + "\n"


def decode_jsonl(text: str) -> Dataset:
    lines = text.splitlines()
    if not lines:
        raise DatasetFormatError("empty file", line=1)
    try:
        prologue = json.loads(lines[0])
    except json.JSONDecodeError as exc:
        raise DatasetFormatError(f"bad prologue record: {exc.msg}", line=1) from exc
    if not isinstance(prologue, dict) or prologue.get("format") != JSONL_FORMAT:
        raise DatasetFormatError("missing dataset prologue", line=1)
    if prologue.get("version") != DATASET_VERSION:
        raise DatasetFormatError(f"unsupported version {prologue.get('version')}", line=1)
    trajs = []
    for lineno, line in enumerate(lines[1:], start=2):
        if not line.strip():
            continue
        try:
            rec = json.loads(line)
            trajs.append(Trajectory(rec["states"], rec["actions"], rec["rewards"], rec["terminated"]))
        except json.JSONDecodeError as exc:
            raise DatasetFormatError(f"bad record: {exc.msg}", line=lineno) from exc
        except (KeyError, TypeError, ValueError) as exc:
            raise DatasetFormatError(f"invalid trajectory record: {exc}", line=lineno) from exc
    try:
        return Dataset(prologue["env_id"], int(prologue["horizon_H"]), tuple(trajs),
                       prologue.get("provenance", ""), prologue.get("env_spec"))
    except (KeyError, ValueError) as exc:
        raise DatasetFormatError(f"invalid dataset: {exc}", line=1) from exc


def encode_binary(dataset: Dataset) -> bytes:
    """``RVSD`` magic, u32 version, length-prefixed JSON header, u32 state/action
    dims, u64 trajectory count, then per trajectory: u32 length T, u8 terminated
    flag, T*state_dim states, T*action_dim actions, T rewards (little-endian f64).
    """
    buf = io.BytesIO()
    header = json.dumps(_header(dataset), sort_keys=True).encode("utf-8")
    buf.write(DATASET_MAGIC)
    buf.write(struct.pack("<II", DATASET_VERSION, len(header)))
    buf.write(header)
    buf.write(struct.pack("<IIQ", dataset.state_dim, dataset.action_dim, len(dataset)))
    for t in dataset:
        buf.write(struct.pack("<IB", len(t), int(t.terminated)))
        for arr in (t.states, t.actions, t.rewards):
            buf.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())
    return buf.getvalue()


def decode_binary(data: bytes) -> Dataset:
    pos = 0

    def take(n, what):
        nonlocal pos
        if pos + n > len(data):
            raise DatasetFormatError(f"truncated file while reading {what}", offset=pos)
        chunk = data[pos : pos + n]
        pos += n
        return chunk

    if take(4, "magic") != DATASET_MAGIC:
        raise DatasetFormatError("not a binary dataset (bad magic)", offset=0)
    version, hlen = struct.unpack("<II", take(8, "version"))
    if version != DATASET_VERSION:
        raise DatasetFormatError(f"unsupported version {version}", offset=4)
    try:
        header = json.loads(take(hlen, "header").decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise DatasetFormatError(f"bad header: {exc}", offset=12) from exc
    sd, ad, n = struct.unpack("<IIQ", take(16, "dimensions"))
    trajs = []
    for k in range(n):
        start = pos
        T, term = struct.unpack("<IB", take(5, f"trajectory {k} length"))
        arrays = []
        for dim, name in ((sd, "states"), (ad, "actions"), (1, "rewards")):
            raw = take(8 * T * dim, f"trajectory {k} {name}")
            arrays.append(np.frombuffer(raw, dtype="<f8").reshape(T, dim) if name != "rewards"
                          else np.frombuffer(raw, dtype="<f8"))
        try:
            trajs.append(Trajectory(arrays[0], arrays[1], arrays[2], bool(term)))
        except ValueError as exc:
            raise DatasetFormatError(f"invalid trajectory {k}: {exc}", offset=start) from exc
    if pos != len(data):
        raise DatasetFormatError("trailing bytes after last trajectory", offset=pos)
    try:
        return Dataset(header["env_id"], int(header["horizon_H"]), tuple(trajs),
                       header.get("provenance", ""), header.get("env_spec"))
    except (KeyError, ValueError) as exc:
        raise DatasetFormatError(f"invalid dataset: {exc}", offset=12) from exc


def save_dataset(dataset: Dataset, path, fmt: str | None = None) -> Path:
    """Write ``.jsonl`` (text) or anything else (binary) unless ``fmt`` says otherwise."""
    path = Path(path)
    fmt = fmt or ("jsonl" if path.suffix == ".jsonl" else "binary")
    if fmt == "jsonl":
        path.write_text(encode_jsonl(dataset), encoding="utf-8")
    elif fmt == "binary":
        path.write_bytes(encode_binary(dataset))
    else:
        raise ValueError(f"unknown dataset format {fmt!r}")
    return path


def load_dataset(path) -> Dataset:
    data = Path(path).read_bytes()
    if data[:4] == DATASET_MAGIC:
        return decode_binary(data)
    try:
        text = data.decode("utf-8")
    except UnicodeDecodeError as exc:
        raise DatasetFormatError("neither a binary dataset nor UTF-8 text", offset=exc.start) from exc
    return decode_jsonl(text)


def concat_datasets(parts: Sequence[Dataset], provenance: str | None = None) -> Dataset:
    first = parts[0]
    if any(p.env_id != first.env_id for p in parts):
        raise ValueError("cannot concatenate datasets from different environments")
    trajs = tuple(t for p in parts for t in p)
    prov = provenance if provenance is not None else "+".join(p.provenance for p in parts)
    return Dataset(first.env_id, max(p.horizon for p in parts), trajs, prov, first.env_spec)
