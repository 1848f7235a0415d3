"""The RvS training loop: relabel, score the log-likelihood, step Adam, repeat.

Gradient steps are the unit of budget. A run is a pure function of
``(dataset, config)``: one random stream (derived from ``config.seed``) feeds
batch sampling and dropout, and is saved in checkpoints so a resumed run
continues exactly where the uninterrupted one would be.
"""

from __future__ import annotations

import csv
import dataclasses
import io
import json
import logging
import math
import warnings
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from itertools import product
from pathlib import Path
from typing import Callable

import numpy as np

from rvslab import nn_core
from rvslab.environments import Discrete, check_compatible, get_spec
from rvslab.nn_core import AdamState, CategoricalHead, GaussianHead, MlpPolicy, NonFiniteError
from rvslab.seeding import derive_rng
from rvslab.trajectory_data import (
    AvgReturnOutcome,
    BatchSampler,
    Dataset,
    GoalOutcome,
    NoOutcome,
    OutcomeSpec,
    outcome_from_dict,
    outcome_to_dict,
    split_indices,
)

log = logging.getLogger(__name__)

METRICS_COLUMNS = ("step", "train_loss", "val_loss", "eval_return", "eval_success")
D4RL_EPOCH_LENGTH = 2000 * math.comb(50, 2)


class DatasetHashWarning(UserWarning):
    pass


class TrainingAborted(RuntimeError):
    """Non-finite loss or gradient. ``artifact`` holds the last good parameters."""

    def __init__(self, message: str, artifact: "PolicyArtifact", metrics: "MetricsLog"):
        super().__init__(message)
        self.artifact = artifact
        self.metrics = metrics


@dataclass
class TrainConfig:
    hidden_width: int = 256
    learning_rate: float = 1e-3
    dropout_p: float = 0.1
    batch_size: int = 256
    total_gradient_steps: int = 20_000
    outcome: str = "goal"  # goal | avg_return | none
    goal_extractor: str | None = None  # None: the environment's registered extractor
    head: str = "categorical"  # categorical | gaussian
    bins: int = 15
    seed: int = 0
    validation_fraction: float = 0.2
    eval_every: int = 1000
    eval_rollouts: int = 0
    action_mode: str | None = None  # None: stochastic for categorical, deterministic for gaussian
    normalize_condition: bool = False
    timestep_sampling: str = "uniform"  # uniform | length_weighted
    probe_size: int = 2048
    return_target: float | None = None  # episode-return units; evaluation of return-conditioned policies

    def __post_init__(self):
        for name in ("hidden_width", "batch_size", "bins", "eval_every", "probe_size"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")
        if self.total_gradient_steps < 0 or self.eval_rollouts < 0 or self.seed < 0:
            raise ValueError("step counts, rollout counts and seeds must be non-negative")
        if not 0.0 <= self.dropout_p < 1.0:
            raise ValueError("dropout_p must be in [0, 1)")
        if not 0.0 <= self.validation_fraction < 1.0:
            raise ValueError("validation_fraction must be in [0, 1)")
        if self.outcome not in ("goal", "avg_return", "none"):
            raise ValueError(f"unknown outcome {self.outcome!r}")
        if self.head not in ("categorical", "gaussian"):
            raise ValueError(f"unknown head {self.head!r}")
        if self.action_mode not in (None, "stochastic", "deterministic"):
            raise ValueError(f"unknown action mode {self.action_mode!r}")
        if self.timestep_sampling not in ("uniform", "length_weighted"):
            raise ValueError(f"unknown timestep sampling {self.timestep_sampling!r}")

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_mapping(cls, mapping: dict) -> "TrainConfig":
        """Build from a flat or sectioned mapping; section names are ignored."""
        flat = {}
        for key, value in mapping.items():
            if isinstance(value, dict):
                flat.update(value)
            else:
                flat[key] = value
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = sorted(set(flat) - known)
        if unknown:
            raise ValueError(f"unknown config keys: {', '.join(unknown)}")
        return cls(**flat)

    def replace(self, **changes) -> "TrainConfig":
        return dataclasses.replace(self, **changes)


def load_config(path) -> TrainConfig:
    """Read a TOML run configuration (``[model]``, ``[optim]``, ... sections allowed)."""
    try:
        import tomllib
    except ModuleNotFoundError:  # Python < 3.11
        import tomli as tomllib
    with open(path, "rb") as f:
        return TrainConfig.from_mapping(tomllib.load(f))


def make_outcome(config: TrainConfig, env_id: str) -> OutcomeSpec:
    if config.outcome == "goal":
        extractor = config.goal_extractor or get_spec(env_id).goal_extractor
        if extractor is None:
            raise ValueError(f"{env_id} has no goal extractor; set goal_extractor explicitly")
        return GoalOutcome(extractor)
    if config.outcome == "avg_return":
        return AvgReturnOutcome()
    return NoOutcome()


def make_head(config: TrainConfig, env_id: str):
    space = get_spec(env_id).action_space
    if isinstance(space, Discrete):
        if config.head != "categorical":
            raise ValueError("discrete action spaces need a categorical head")
        return CategoricalHead.for_discrete(space.n)
    if config.head == "categorical":
        return CategoricalHead(tuple(space.low), tuple(space.high), config.bins)
    return GaussianHead(space.dims)


# ---------------------------------------------------------------------------
# Artifacts and logs


@dataclass
class PolicyArtifact:
    policy: MlpPolicy
    config: TrainConfig
    env_id: str
    outcome: OutcomeSpec
    state_dim: int
    dataset_hash: str
    adam: AdamState | None = None
    step: int = 0
    rng_state: dict | None = None
    condition_scale: tuple[list[float], list[float]] | None = None

    @property
    def condition_dim(self) -> int:
        return self.policy.input_dim - self.state_dim

    @property
    def action_mode(self) -> str:
        if self.config.action_mode is not None:
            return self.config.action_mode
        return "stochastic" if isinstance(self.policy.head, CategoricalHead) else "deterministic"

    def inputs(self, states, conditions) -> np.ndarray:
        states = np.atleast_2d(np.asarray(states, dtype=np.float64))
        conditions = np.asarray(conditions, dtype=np.float64).reshape(len(states), -1)
        if conditions.shape[1] != self.condition_dim:
            raise ValueError(f"policy expects {self.condition_dim}-d conditions, got {conditions.shape[1]}")
        if self.condition_scale is not None:
            lo, hi = (np.asarray(v) for v in self.condition_scale)
            conditions = (conditions - lo) / np.where(hi > lo, hi - lo, 1.0)
        return np.concatenate([states, conditions], axis=1)

    def metadata(self) -> dict:
        return {
            "config": self.config.to_dict(),
            "env_id": self.env_id,
            "outcome": outcome_to_dict(self.outcome),
            "state_dim": self.state_dim,
            "dataset_hash": self.dataset_hash,
            "step": self.step,
            "rng_state": self.rng_state,
            "condition_scale": self.condition_scale,
        }


@dataclass
class MetricsRecord:
    step: int
    train_loss: float
    val_loss: float
    eval_return: float | None = None
    eval_success: float | None = None


@dataclass
class Provenance:
    """Which dataset trajectories fed gradient updates (indices into the full dataset)."""

    train_indices: np.ndarray
    val_indices: np.ndarray
    gradient_counts: np.ndarray


@dataclass
class MetricsLog:
    records: list[MetricsRecord] = field(default_factory=list)
    provenance: Provenance | None = None

    def append(self, record: MetricsRecord) -> None:
        if self.records and record.step <= self.records[-1].step:
            raise ValueError("metrics steps must be strictly increasing")
        self.records.append(record)

    def __len__(self):
        return len(self.records)

    def __getitem__(self, i):
        return self.records[i]

    def to_csv(self) -> str:
        def fmt(v):
            if v is None:
                return ""
            return repr(float(v)) if isinstance(v, float) else str(v)

        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(METRICS_COLUMNS)
        for r in self.records:
            w.writerow([fmt(getattr(r, c)) for c in METRICS_COLUMNS])
        return buf.getvalue()

    @classmethod
    def from_csv(cls, text: str) -> "MetricsLog":
        rows = list(csv.DictReader(io.StringIO(text)))
        out = cls()
        for row in rows:
            opt = lambda k: float(row[k]) if row[k] != "" else None  # noqa: E731
            out.append(MetricsRecord(int(row["step"]), float(row["train_loss"]), float(row["val_loss"]),
                                     opt("eval_return"), opt("eval_success")))
        return out

    def same_values(self, other: "MetricsLog") -> bool:
        return self.to_csv() == other.to_csv()


# ---------------------------------------------------------------------------
# Training


def _probe(sampler: BatchSampler | None, size: int, rng) -> tuple[np.ndarray, np.ndarray] | None:
    if sampler is None:
        return None
    b = sampler.sample(size, rng)
    return b.inputs(), b.actions


def _probe_loss(artifact: PolicyArtifact, probe) -> float:
    if probe is None:
        return float("nan")
    x, actions = probe
    if artifact.condition_scale is not None:
        sd = artifact.state_dim
        x = artifact.inputs(x[:, :sd], x[:, sd:])
    out = nn_core.forward(artifact.policy, x, train=False)
    return nn_core.head_nll(out, actions)[0]


def _condition_scale(sampler: BatchSampler) -> tuple[list[float], list[float]] | None:
    if isinstance(sampler.outcome, GoalOutcome):
        c = sampler.goals
    elif isinstance(sampler.outcome, AvgReturnOutcome):
        c = sampler.rtg[:, None]
    else:
        return None
    return c.min(axis=0).tolist(), c.max(axis=0).tolist()


Evaluator = Callable[[PolicyArtifact, int], tuple[float, float]]


def train(dataset: Dataset, config: TrainConfig, evaluator: Evaluator | None = None,
          resume: PolicyArtifact | None = None, resume_log: MetricsLog | None = None) -> tuple[PolicyArtifact, MetricsLog]:
    """Run ``config.total_gradient_steps`` RvS updates on ``dataset``.

    ``evaluator(artifact, step)`` is called at every metrics checkpoint when
    ``config.eval_rollouts > 0``. Passing ``resume`` continues a checkpointed
    run; the result is bit-identical to never having stopped.
    """
    check_compatible(dataset, dataset.env_id)
    outcome = make_outcome(config, dataset.env_id)
    n = len(dataset)
    if config.validation_fraction > 0 and n >= 2:
        train_idx, val_idx = split_indices(n, 1.0 - config.validation_fraction, config.seed)
    else:
        train_idx, val_idx = np.arange(n), np.arange(0)
    train_set = dataset.subset(train_idx.tolist(), note="train")
    sampler = BatchSampler(train_set, outcome, config.timestep_sampling)
    val_sampler = None
    if len(val_idx):
        try:
            val_sampler = BatchSampler(dataset.subset(val_idx.tolist(), note="validation"), outcome)
        except ValueError:
            log.warning("validation split has no trajectory usable for %s relabeling", outcome.kind)
    probe_rng = derive_rng(config.seed, "probe")
    train_probe = _probe(sampler, config.probe_size, probe_rng)
    val_probe = _probe(val_sampler, config.probe_size, probe_rng)

    data_hash = dataset.content_hash()
    if resume is None:
        head = make_head(config, dataset.env_id)
        policy = nn_core.init_mlp(dataset.state_dim + sampler.condition_dim, config.hidden_width, head,
                                  config.seed, config.dropout_p)
        rng = derive_rng(config.seed, "train")
        artifact = PolicyArtifact(policy, config, dataset.env_id, outcome, dataset.state_dim, data_hash,
                                  AdamState(policy), 0, None,
                                  _condition_scale(sampler) if config.normalize_condition else None)
        metrics = MetricsLog()
    else:
        if resume.dataset_hash != data_hash:
            warnings.warn("resuming on a dataset that differs from the checkpoint's", DatasetHashWarning)
        artifact = dataclasses.replace(resume, policy=resume.policy.copy(),
                                       adam=resume.adam.copy() if resume.adam else AdamState(resume.policy),
                                       config=config)
        rng = derive_rng(config.seed, "train")
        if resume.rng_state is not None:
            rng.bit_generator.state = resume.rng_state
        metrics = MetricsLog(list(resume_log.records) if resume_log else [])

    counts = np.zeros(n, dtype=np.int64)
    metrics.provenance = Provenance(train_idx, val_idx, counts)
    policy, adam = artifact.policy, artifact.adam

    def checkpoint(step: int):
        artifact.step = step
        artifact.rng_state = rng.bit_generator.state
        if metrics.records and metrics.records[-1].step >= step:
            return
        rec = MetricsRecord(step, _probe_loss(artifact, train_probe), _probe_loss(artifact, val_probe))
        if evaluator is not None and config.eval_rollouts > 0:
            rec.eval_return, rec.eval_success = evaluator(artifact, step)
        metrics.append(rec)

    checkpoint(artifact.step)
    for step in range(artifact.step + 1, config.total_gradient_steps + 1):
        batch = sampler.sample(config.batch_size, rng)
        x = artifact.inputs(batch.states, batch.conditions)
        loss, grads = nn_core.loss_and_grad(policy, x, batch.actions, train=True, rng=rng)
        try:
            if not math.isfinite(loss):
                raise NonFiniteError(f"non-finite loss {loss}")
            nn_core.adam_step(policy, grads, adam, config.learning_rate)
        except NonFiniteError as exc:
            artifact.step = step - 1
            raise TrainingAborted(f"step {step}: {exc}", artifact, metrics) from exc
        np.add.at(counts, train_idx[batch.traj_index], 1)
        if step % config.eval_every == 0 or step == config.total_gradient_steps:
            checkpoint(step)
    artifact.rng_state = rng.bit_generator.state
    return artifact, metrics


def epoch_length(dataset: Dataset | int, convention: str = "pair_count", constant: int = D4RL_EPOCH_LENGTH,
                 horizon: int | None = None) -> int:
    """Gradient examples per epoch: N * C(H, 2) start-goal pairs, or a fixed constant."""
    if convention == "fixed":
        return int(constant)
    if convention != "pair_count":
        raise ValueError(f"unknown epoch convention {convention!r}")
    if isinstance(dataset, Dataset):
        n, h = len(dataset), horizon or dataset.horizon
    else:
        n, h = int(dataset), horizon or 50
    return n * math.comb(h, 2)


# ---------------------------------------------------------------------------
# Checkpoints


def save_checkpoint(artifact: PolicyArtifact, path) -> Path:
    path = Path(path)
    path.write_bytes(nn_core.encode_checkpoint(artifact.policy, artifact.adam, artifact.metadata()))
    return path


def load_checkpoint(path, dataset: Dataset | None = None) -> PolicyArtifact:
    """Load a checkpoint; warns (does not fail) when ``dataset`` is not the training set."""
    policy, adam, meta = nn_core.decode_checkpoint(Path(path).read_bytes())
    try:
        config = TrainConfig(**meta["config"])
        artifact = PolicyArtifact(policy, config, meta["env_id"], outcome_from_dict(meta["outcome"]),
                                  int(meta["state_dim"]), meta["dataset_hash"], adam, int(meta["step"]),
                                  meta.get("rng_state"),
                                  tuple(meta["condition_scale"]) if meta.get("condition_scale") else None)
    except (KeyError, TypeError, ValueError) as exc:
        raise nn_core.CheckpointFormatError(f"checkpoint metadata incomplete: {exc}") from exc
    if dataset is not None and dataset.content_hash() != artifact.dataset_hash:
        warnings.warn(f"{path}: checkpoint was trained on a different dataset", DatasetHashWarning)
    return artifact


# ---------------------------------------------------------------------------
# Sweeps


SWEEP_AXES = {"width": "hidden_width", "dropout": "dropout_p", "batch": "batch_size"}
SWEEP_COLUMNS = ("cell", "width", "dropout", "batch", "seed", "status", "eval_success", "eval_return",
                 "normalized_score", "train_loss", "val_loss")


def sweep_cells(base_config: TrainConfig, axes: dict, seeds) -> list[dict]:
    if not axes or any(len(v) == 0 for v in axes.values()):
        raise ValueError("sweep axes must be non-empty")
    if not seeds:
        raise ValueError("a sweep needs at least one seed")
    unknown = set(axes) - set(SWEEP_AXES)
    if unknown:
        raise ValueError(f"unknown sweep axes: {sorted(unknown)}")
    names = [a for a in SWEEP_AXES if a in axes]
    cells = []
    for values in product(*(axes[a] for a in names)):
        for seed in seeds:
            overrides = {SWEEP_AXES[a]: v for a, v in zip(names, values)}
            cfg = base_config.replace(seed=int(seed), **overrides)
            cells.append({"cell": len(cells), "config": cfg})
    return cells


def run_cell(dataset: Dataset, config: TrainConfig, n_eval: int, eval_seed: int) -> dict:
    """Train one sweep cell and evaluate it; failures become a status, not an exception."""
    from rvslab.evaluation import default_plan, evaluate

    row = {"width": config.hidden_width, "dropout": config.dropout_p, "batch": config.batch_size,
           "seed": config.seed}
    try:
        artifact, metrics = train(dataset, config)
        report = evaluate(dataset.env_id, artifact, default_plan(artifact), n_eval, eval_seed)
        last = metrics.records[-1]
        row.update(status="ok", eval_success=report.success_rate, eval_return=report.mean_return,
                   normalized_score=report.normalized_score, train_loss=last.train_loss,
                   val_loss=last.val_loss)
    except Exception as exc:  # a failed cell must not sink the sweep
        log.exception("sweep cell failed")
        row.update(status=f"failed: {type(exc).__name__}: {exc}", eval_success=None, eval_return=None,
                   normalized_score=None, train_loss=None, val_loss=None)
    return row


def _run_cell_star(args):
    return run_cell(*args)


def run_sweep(dataset: Dataset, base_config: TrainConfig, axes: dict, seeds, n_eval: int = 200,
              eval_seed: int = 0, workers: int = 1) -> list[dict]:
    """Train the full cross product of ``axes`` for every seed and evaluate each cell.

    Each cell is determined by its own config (seed included), so the rows do
    not depend on ``workers``.
    """
    cells = sweep_cells(base_config, axes, seeds)
    jobs = [(dataset, c["config"], n_eval, eval_seed) for c in cells]
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            rows = list(pool.map(_run_cell_star, jobs))
    else:
        rows = [run_cell(*j) for j in jobs]
    for c, row in zip(cells, rows):
        row["cell"] = c["cell"]
    return rows


def sweep_to_csv(rows: list[dict]) -> str:
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=SWEEP_COLUMNS, lineterminator="\n", extrasaction="ignore")
    w.writeheader()
    for r in rows:
        w.writerow({k: ("" if r.get(k) is None else (repr(r[k]) if isinstance(r[k], float) else r[k]))
                    for k in SWEEP_COLUMNS})
    return buf.getvalue()


def config_json(config: TrainConfig) -> str:
    return json.dumps(config.to_dict(), sort_keys=True)
