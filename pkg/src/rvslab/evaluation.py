"""Rollouts and the analyses built on them.

Rollouts inside :func:`evaluate` run in lockstep chunks of ``EVAL_CHUNK`` so
the network sees one batched forward pass per step. Rollout ``i`` always uses
reset seed ``derive_seed(seed, "rollout", i)`` and its own action stream, and
chunk boundaries are fixed, so results do not depend on ``workers``.
"""

from __future__ import annotations

import csv
import io
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from rvslab import nn_core
from rvslab.environments import EnvError, EnvState, audit_stitching_dataset, get_env
from rvslab.seeding import derive_rng, derive_seed
from rvslab.training import PolicyArtifact, DatasetHashWarning
from rvslab.trajectory_data import (
    AvgReturnOutcome,
    Dataset,
    GoalOutcome,
    NoOutcome,
    Trajectory,
    filter_top_fraction,
    get_goal_extractor,
    normalized_score,
)

EVAL_CHUNK = 50


# ---------------------------------------------------------------------------
# Conditioning plans


@dataclass(frozen=True)
class FixedGoal:
    goal: tuple[float, ...]

    def describe(self) -> str:
        return "goal=" + " ".join(repr(float(v)) for v in self.goal)


@dataclass(frozen=True)
class FixedReturnTarget:
    """Condition on a constant average per-step return for the whole episode.

    With ``recompute=True`` the condition is instead the average still needed
    to hit ``value * H`` in total (an ablation; not the default).
    """

    value: float
    recompute: bool = False

    @classmethod
    def from_episode_return(cls, target_return: float, horizon: int, recompute: bool = False):
        return cls(target_return / horizon, recompute)

    def describe(self) -> str:
        return f"return_target={self.value!r}" + (" recompute" if self.recompute else "")


@dataclass(frozen=True)
class DynamicGoal:
    """Command ``waypoints`` in order, moving on once within ``radius`` of the current one.

    The environment's own goal (used for success and termination) is the last
    waypoint. ``radius=None`` means the environment's success radius.
    """

    waypoints: tuple[tuple[float, ...], ...]
    radius: float | None = None

    def describe(self) -> str:
        return "waypoints=" + ";".join(" ".join(repr(float(v)) for v in w) for w in self.waypoints)


@dataclass(frozen=True)
class Unconditioned:
    """No condition vector (behavior cloning). ``goal`` is only used to score success."""

    goal: tuple[float, ...] | None = None

    def describe(self) -> str:
        return "unconditioned" + ("" if self.goal is None else " goal=" + " ".join(repr(float(v)) for v in self.goal))


Plan = FixedGoal | FixedReturnTarget | DynamicGoal | Unconditioned


def _env_goal(plan: Plan):
    if isinstance(plan, FixedGoal):
        return plan.goal
    if isinstance(plan, DynamicGoal):
        return plan.waypoints[-1]
    if isinstance(plan, Unconditioned):
        return plan.goal
    return None


# ---------------------------------------------------------------------------
# Rollouts


@dataclass
class RolloutResult:
    seed: int
    plan: str
    states: list[np.ndarray] = field(default_factory=list)
    actions: list[np.ndarray] = field(default_factory=list)
    rewards: list[float] = field(default_factory=list)
    conditions: list[np.ndarray] = field(default_factory=list)
    success: bool = False
    switch_steps: list[int] = field(default_factory=list)
    goal: tuple[float, ...] | None = None

    @property
    def episode_return(self) -> float:
        if not self.actions and self.success:
            return 1.0  # commanded goal was the start state
        return float(sum(self.rewards))

    @property
    def length(self) -> int:
        return len(self.actions)

    def to_trajectory(self, horizon: int) -> Trajectory:
        if not self.actions:
            raise ValueError("zero-length rollout has no trajectory")
        return Trajectory(np.array(self.states[: len(self.actions)]), np.array(self.actions),
                          np.array(self.rewards), len(self.actions) < horizon)


class _Runner:
    """Per-rollout bookkeeping: environment state, condition schedule, action stream."""

    def __init__(self, env, artifact: PolicyArtifact, plan: Plan, seed: int):
        self.env = env
        self.plan = plan
        self.rng = derive_rng(seed, "rollout_actions")
        self.result = RolloutResult(seed, plan.describe(), goal=_env_goal(plan))
        outcome = artifact.outcome
        if isinstance(plan, (FixedGoal, DynamicGoal)) and not isinstance(outcome, GoalOutcome):
            raise ValueError("goal plans need a goal-conditioned policy")
        if isinstance(plan, FixedReturnTarget) and not isinstance(outcome, AvgReturnOutcome):
            raise ValueError("return targets need a return-conditioned policy")
        if isinstance(plan, Unconditioned) and not isinstance(outcome, NoOutcome):
            raise ValueError("unconditioned plans need an unconditioned policy")
        self.waypoint = 0
        self.radius = env.spec.success_radius if not isinstance(plan, DynamicGoal) or plan.radius is None else plan.radius
        self.state: EnvState = env.reset(seed, _env_goal(plan))
        self.result.success = self.state.reached
        self._maybe_advance()

    @property
    def done(self) -> bool:
        return self.state.done

    def _maybe_advance(self):
        if not isinstance(self.plan, DynamicGoal):
            return
        wp = self.plan.waypoints
        while self.waypoint < len(wp) - 1:
            achieved = self.env.extract_goal(self.state.observation())
            if np.linalg.norm(achieved - np.asarray(wp[self.waypoint])) <= self.radius + 1e-12:
                self.waypoint += 1
                self.result.switch_steps.append(self.state.elapsed)
            else:
                break

    def condition(self) -> np.ndarray:
        p = self.plan
        if isinstance(p, FixedGoal):
            return np.asarray(p.goal, dtype=np.float64)
        if isinstance(p, DynamicGoal):
            return np.asarray(p.waypoints[self.waypoint], dtype=np.float64)
        if isinstance(p, FixedReturnTarget):
            if not p.recompute:
                return np.array([p.value])
            H, t = self.env.spec.horizon, self.state.elapsed + 1
            return np.array([(p.value * H - sum(self.result.rewards)) / (H - t + 1)])
        return np.zeros(0)

    def advance(self, action: np.ndarray, condition: np.ndarray):
        obs = self.state.observation()
        self.state, reward, _ = self.env.step(self.state, action)
        r = self.result
        r.states.append(obs)
        r.actions.append(np.asarray(action, dtype=np.float64))
        r.rewards.append(reward)
        r.conditions.append(condition)
        r.success = self.state.reached
        self._maybe_advance()

    def finish(self) -> RolloutResult:
        self.result.states.append(self.state.observation())
        return self.result


def _run_lockstep(env_id: str, artifact: PolicyArtifact, plans: Sequence[Plan], seeds: Sequence[int],
                  mode: str | None) -> list[RolloutResult]:
    env = get_env(env_id)
    mode = mode or artifact.action_mode
    runners = [_Runner(env, artifact, p, s) for p, s in zip(plans, seeds)]
    while True:
        active = [r for r in runners if not r.done]
        if not active:
            break
        conds = [r.condition() for r in active]
        x = artifact.inputs(np.stack([r.state.observation() for r in active]), np.stack(conds))
        out = nn_core.forward(artifact.policy, x, train=False)
        for i, (runner, cond) in enumerate(zip(active, conds)):
            action = nn_core.sample_action(out.row(i), mode, runner.rng)[0]
            runner.advance(action, cond)
    return [r.finish() for r in runners]


def rollout(env, artifact: PolicyArtifact, plan: Plan, seed: int, mode: str | None = None) -> RolloutResult:
    """One episode: condition per ``plan``, act per ``mode``, stop at done or horizon."""
    env = get_env(env)
    _check_env(env.spec.env_id, artifact)
    return _run_lockstep(env.spec.env_id, artifact, [plan], [seed], mode)[0]


def _check_env(env_id: str, artifact: PolicyArtifact):
    if artifact.env_id != env_id:
        raise EnvError(f"policy was trained on {artifact.env_id}, not {env_id}")


# ---------------------------------------------------------------------------
# Reports


@dataclass
class EvalReport:
    env_id: str
    n_rollouts: int
    success_rate: float
    mean_return: float
    std_return: float
    normalized_score: float
    records: list[RolloutResult]
    plan: str

    @classmethod
    def from_records(cls, env_id: str, records: list[RolloutResult], plan: str) -> "EvalReport":
        spec = get_env(env_id).spec
        returns = np.array([r.episode_return for r in records])
        mean = float(returns.mean())
        return cls(
            env_id=env_id,
            n_rollouts=len(records),
            success_rate=100.0 * sum(r.success for r in records) / len(records),
            mean_return=mean,
            std_return=float(returns.std()),
            normalized_score=normalized_score(mean, spec.random_return, spec.expert_return),
            records=records,
            plan=plan,
        )

    def summary(self) -> dict:
        return {
            "env_id": self.env_id,
            "n_rollouts": self.n_rollouts,
            "success_rate": self.success_rate,
            "mean_return": self.mean_return,
            "std_return": self.std_return,
            "normalized_score": self.normalized_score,
            "plan": self.plan,
        }

    def to_csv(self) -> str:
        buf = io.StringIO()
        for k, v in self.summary().items():
            buf.write(f"# {k}: {v!r}\n" if isinstance(v, float) else f"# {k}: {v}\n")
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["rollout", "seed", "success", "return", "length", "goal", "plan"])
        for i, r in enumerate(self.records):
            goal = "" if r.goal is None else " ".join(repr(float(v)) for v in r.goal)
            w.writerow([i, r.seed, int(r.success), repr(r.episode_return), r.length, goal, r.plan])
        return buf.getvalue()


def read_eval_summary(text: str) -> dict:
    """Parse the ``# key: value`` header block of an eval CSV."""
    out = {}
    for line in text.splitlines():
        if not line.startswith("# "):
            break
        key, _, value = line[2:].partition(": ")
        try:
            out[key] = float(value) if key not in ("env_id", "plan") else value
        except ValueError:
            out[key] = value
    return out


PlanGenerator = Callable[[int, int], Plan]


def default_plan(artifact: PolicyArtifact, return_target: float | None = None, stitching: bool | None = None) -> PlanGenerator:
    """Plan generator for the policy's outcome type.

    Goal policies get goals from the environment's evaluation distribution;
    return policies need an explicit target (episode-return units); BC policies
    run unconditioned but are still scored against an evaluation goal.
    """
    env = get_env(artifact.env_id)
    outcome = artifact.outcome
    kw = {} if stitching is None else {"stitching": stitching}

    def eval_goal(i, seed):
        return env.sample_eval_goal(derive_seed(seed, "eval_goal", i), **kw)

    if isinstance(outcome, GoalOutcome):
        return lambda i, seed: FixedGoal(eval_goal(i, seed))
    if isinstance(outcome, AvgReturnOutcome):
        target = return_target if return_target is not None else artifact.config.return_target
        if target is None:
            raise ValueError("return-conditioned policies need a return target (no automatic choice is made)")
        plan = FixedReturnTarget.from_episode_return(target, env.spec.horizon)
        return lambda i, seed: plan
    if not env.spec.terminate_on_goal:
        return lambda i, seed: Unconditioned()
    return lambda i, seed: Unconditioned(eval_goal(i, seed))


def _chunk_job(args):
    return _run_lockstep(*args)


def run_rollouts(env_id: str, artifact: PolicyArtifact, plans: Sequence[Plan], seeds: Sequence[int],
                 mode: str | None = None, workers: int = 1) -> list[RolloutResult]:
    jobs = [(env_id, artifact, plans[k : k + EVAL_CHUNK], seeds[k : k + EVAL_CHUNK], mode)
            for k in range(0, len(plans), EVAL_CHUNK)]
    if workers > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            chunks = list(pool.map(_chunk_job, jobs))
    else:
        chunks = [_chunk_job(j) for j in jobs]
    return [r for c in chunks for r in c]


def evaluate(env, artifact: PolicyArtifact, plan_generator: PlanGenerator | Plan | None = None,
             n_rollouts: int = 200, seed: int = 0, mode: str | None = None, workers: int = 1) -> EvalReport:
    """Run ``n_rollouts`` independent episodes and aggregate them."""
    if n_rollouts < 1:
        raise ValueError("n_rollouts must be >= 1")
    env_id = get_env(env).spec.env_id
    _check_env(env_id, artifact)
    if plan_generator is None:
        plan_generator = default_plan(artifact)
    if not callable(plan_generator):
        fixed = plan_generator
        plan_generator = lambda i, s: fixed  # noqa: E731
    plans = [plan_generator(i, seed) for i in range(n_rollouts)]
    seeds = [derive_seed(seed, "rollout", i) for i in range(n_rollouts)]
    records = run_rollouts(env_id, artifact, plans, seeds, mode, workers)
    distinct = {p.describe() for p in plans}
    plan_desc = plans[0].describe() if len(distinct) == 1 else f"{type(plans[0]).__name__} x{len(distinct)}"
    return EvalReport.from_records(env_id, records, plan_desc)


def make_checkpoint_evaluator(n_rollouts: int = 20, seed: int = 0, return_target: float | None = None):
    """Evaluator hook for :func:`rvslab.training.train` (mid-training rollouts)."""

    def evaluator(artifact: PolicyArtifact, step: int):
        report = evaluate(artifact.env_id, artifact, default_plan(artifact, return_target), n_rollouts,
                          derive_seed(seed, "checkpoint_eval", step))
        return report.mean_return, report.success_rate

    return evaluator


# ---------------------------------------------------------------------------
# Analyses


REWARD_SWEEP_COLUMNS = ("target", "condition", "mean_return", "std_return", "normalized_score", "n")


def parse_range(spec: str) -> list[float]:
    """``"start:stop:step"`` (inclusive stop) or a comma-separated list."""
    if ":" in spec:
        parts = [float(p) for p in spec.split(":")]
        if len(parts) != 3 or parts[2] <= 0:
            raise ValueError(f"bad range {spec!r}; expected start:stop:step with step > 0")
        start, stop, step = parts
        n = int(math.floor((stop - start) / step + 1e-9)) + 1
        if n < 1:
            raise ValueError(f"empty range {spec!r}")
        return [start + k * step for k in range(n)]
    return [float(p) for p in spec.split(",") if p.strip()]


def reward_target_sweep(env, artifact: PolicyArtifact, targets: Sequence[float], n_per_target: int = 50,
                        seed: int = 0, mode: str | None = None, workers: int = 1) -> list[dict]:
    """Achieved return for each commanded episode-return target."""
    if not isinstance(artifact.outcome, AvgReturnOutcome):
        raise ValueError("reward target sweeps need a return-conditioned policy")
    env = get_env(env)
    rows = []
    for k, target in enumerate(targets):
        plan = FixedReturnTarget.from_episode_return(target, env.spec.horizon)
        rep = evaluate(env, artifact, plan, n_per_target, derive_seed(seed, "target", k), mode, workers)
        rows.append({"target": float(target), "condition": plan.value, "mean_return": rep.mean_return,
                     "std_return": rep.std_return, "normalized_score": rep.normalized_score, "n": n_per_target})
    return rows


def rows_to_csv(rows: list[dict], columns: Sequence[str]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(columns)
    for r in rows:
        w.writerow(["" if r.get(c) is None else (repr(r[c]) if isinstance(r[c], float) else r[c]) for c in columns])
    return buf.getvalue()


def _end_states(dataset: Dataset, indices, extractor: str) -> np.ndarray:
    ext = get_goal_extractor(extractor)
    goals = []
    for i in indices:
        t = dataset[i]
        tail = max(1, math.ceil(0.1 * len(t)))
        goals.extend(ext(s) for s in t.states[len(t) - tail :])
    return np.array(goals)


def goal_pools(dataset: Dataset, extractor: str) -> dict[str, np.ndarray | None]:
    """Candidate goals: states from the last 10% of the top-10% trajectories by return / by length."""
    n = len(dataset)
    k = math.ceil(0.1 * n)
    returns = dataset.returns()
    lengths = np.array([len(t) for t in dataset])
    by_length = np.sort(np.lexsort((np.arange(n), -lengths))[:k])
    pools = {"length_goal": _end_states(dataset, by_length, extractor), "reward_goal": None}
    if np.ptp(returns) > 0 or np.any(np.concatenate([t.rewards for t in dataset]) != 0):
        top = filter_top_fraction(dataset, 0.1)
        top_ids = [i for i, t in enumerate(dataset) if any(t is u for u in top)]
        pools["reward_goal"] = _end_states(dataset, top_ids, extractor)
    return pools


@dataclass
class StrategyResult:
    strategy: str
    available: bool
    mean_return: float | None = None
    normalized_score: float | None = None
    success_rate: float | None = None
    n_rollouts: int = 0
    best_goal: tuple[float, ...] | None = None
    offline: bool = True
    note: str = ""


def goal_strategy_compare(env, dataset: Dataset, artifact: PolicyArtifact,
                          strategies: Sequence[str] = ("reward_goal", "length_goal", "optimized_goal"),
                          n_rollouts: int = 200, n_candidates: int = 200, n_per_candidate: int = 10,
                          seed: int = 0, workers: int = 1) -> dict[str, StrategyResult]:
    """Compare ways of choosing a goal for a goal-conditioned policy on a reward task.

    ``optimized_goal`` searches ``n_candidates`` length goals with
    ``n_per_candidate`` rollouts each and keeps the best; it queries the
    environment and so is not offline.
    """
    valid = {"reward_goal", "length_goal", "optimized_goal"}
    if not set(strategies) <= valid:
        raise ValueError(f"strategies must be a subset of {sorted(valid)}")
    if not isinstance(artifact.outcome, GoalOutcome):
        raise ValueError("goal strategies need a goal-conditioned policy")
    env = get_env(env)
    pools = goal_pools(dataset, artifact.outcome.extractor)
    results = {}

    def from_pool(pool, tag):
        def gen(i, s):
            rng = derive_rng(s, tag, i)
            return FixedGoal(tuple(float(v) for v in pool[int(rng.integers(len(pool)))]))
        return gen

    for name in strategies:
        if name == "reward_goal" and pools["reward_goal"] is None:
            results[name] = StrategyResult(name, False, note="dataset has no reward signal")
            continue
        if name in ("reward_goal", "length_goal"):
            rep = evaluate(env, artifact, from_pool(pools[name], name), n_rollouts, derive_seed(seed, name),
                           workers=workers)
            results[name] = StrategyResult(name, True, rep.mean_return, rep.normalized_score, rep.success_rate,
                                           rep.n_rollouts)
            continue
        pool = pools["length_goal"]
        pick = derive_rng(seed, "optimized_candidates").integers(len(pool), size=n_candidates)
        candidates = [tuple(float(v) for v in pool[j]) for j in pick]
        plans = [FixedGoal(c) for c in candidates for _ in range(n_per_candidate)]
        seeds = [derive_seed(seed, "optimized", i) for i in range(len(plans))]
        records = run_rollouts(env.spec.env_id, artifact, plans, seeds, None, workers)
        per_goal = np.array([r.episode_return for r in records]).reshape(n_candidates, n_per_candidate)
        means = per_goal.mean(axis=1)
        best = int(np.argmax(means))
        best_records = records[best * n_per_candidate : (best + 1) * n_per_candidate]
        rep = EvalReport.from_records(env.spec.env_id, best_records, FixedGoal(candidates[best]).describe())
        results[name] = StrategyResult(name, True, rep.mean_return, rep.normalized_score, rep.success_rate,
                                       len(records), candidates[best], offline=False,
                                       note="uses environment access - not strictly offline")
    return results


class StitchingAuditError(RuntimeError):
    pass


@dataclass
class StitchingReport:
    rvs: EvalReport
    bc: EvalReport | None
    audit_passed: bool

    @property
    def rvs_success(self) -> float:
        return self.rvs.success_rate

    @property
    def bc_success(self) -> float | None:
        return None if self.bc is None else self.bc.success_rate


def stitching_eval(artifact: PolicyArtifact, dataset: Dataset, bc_artifact: PolicyArtifact | None = None,
                   n_rollouts: int = 200, seed: int = 0, workers: int = 1) -> StitchingReport:
    """Command goal C from region-A starts; BC on the same data is the contrast."""
    import warnings

    if dataset.env_id != "stitch_maze" or artifact.env_id != "stitch_maze":
        raise EnvError("stitching evaluation is defined for stitch_maze only")
    offenders = audit_stitching_dataset(dataset)
    if offenders:
        raise StitchingAuditError(f"{len(offenders)} trajectories already connect A and C (e.g. #{offenders[0]})")
    data_hash = dataset.content_hash()
    for a in (artifact, bc_artifact):
        if a is not None and a.dataset_hash != data_hash:
            warnings.warn("policy was not trained on the audited dataset", DatasetHashWarning)
    env = get_env("stitch_maze")
    goal_c = env.sample_eval_goal(seed, stitching=True)
    rvs = evaluate(env, artifact, FixedGoal(goal_c), n_rollouts, seed, workers=workers)
    bc = None
    if bc_artifact is not None:
        bc = evaluate(env, bc_artifact, Unconditioned(goal_c), n_rollouts, seed, workers=workers)
    return StitchingReport(rvs, bc, True)
