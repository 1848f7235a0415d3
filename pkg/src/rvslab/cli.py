"""``rvslab`` command line: collect, train, eval, sweep, interpolate, report.

Exit codes: 0 success, 2 usage or missing input, 3 I/O failure, 4 numeric failure.
Every command writes into an output directory holding one ``manifest.json``
that records the arguments, resolved config, seeds and file hashes.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import platform
import sys
import time
import warnings
from datetime import datetime, timezone
from pathlib import Path

import numpy as np

from rvslab import __version__
from rvslab.environments import EnvError, collect_random, collect_scripted, env_ids, get_env
from rvslab.evaluation import (
    REWARD_SWEEP_COLUMNS,
    StitchingAuditError,
    default_plan,
    evaluate,
    goal_strategy_compare,
    parse_range,
    reward_target_sweep,
    rows_to_csv,
    read_eval_summary,
    stitching_eval,
)
from rvslab.nn_core import CheckpointFormatError
from rvslab.training import (
    MetricsLog,
    TrainConfig,
    TrainingAborted,
    load_checkpoint,
    load_config,
    run_sweep,
    save_checkpoint,
    sweep_to_csv,
    train,
)
from rvslab.trajectory_data import DatasetFormatError, concat_datasets, load_dataset, save_dataset

log = logging.getLogger("rvslab")

EXIT_OK, EXIT_USAGE, EXIT_IO, EXIT_NUMERIC = 0, 2, 3, 4


class CliError(Exception):
    def __init__(self, message: str, code: int = EXIT_USAGE):
        super().__init__(message)
        self.code = code


# ---------------------------------------------------------------------------
# Helpers


def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def _timestamp() -> str:
    return datetime.now(timezone.utc).strftime("%Y%m%dT%H%M%S")


def _csv_name(out_dir: Path, env_id: str, analysis: str) -> Path:
    base = f"{env_id}_{analysis}_{_timestamp()}"
    path, k = out_dir / f"{base}.csv", 1
    while path.exists():
        path, k = out_dir / f"{base}_{k}.csv", k + 1
    return path


class Run:
    """Per-command context: path resolution, output bookkeeping, manifest."""

    def __init__(self, args, argv):
        self.args = args
        self.argv = list(argv)
        self.workdir = Path(args.workdir).resolve()
        self.started = time.time()
        self.inputs: dict[str, Path] = {}
        self.outputs: list[Path] = []
        self.config: dict = {}
        self.seeds: dict = {}

    def path(self, p) -> Path:
        p = Path(p)
        return p if p.is_absolute() else self.workdir / p

    def input(self, p, role: str) -> Path:
        path = self.path(p)
        if not path.exists():
            raise CliError(f"{role} not found: {path}")
        self.inputs[role] = path
        return path

    def out_dir(self) -> Path:
        out = self.path(self.args.out)
        try:
            out.mkdir(parents=True, exist_ok=True)
        except OSError as exc:
            raise CliError(f"cannot create output directory {out}: {exc}", EXIT_IO) from exc
        return out

    def write(self, path: Path, data: str | bytes) -> Path:
        try:
            if isinstance(data, bytes):
                path.write_bytes(data)
            else:
                path.write_text(data, encoding="utf-8")
        except OSError as exc:
            raise CliError(f"cannot write {path}: {exc}", EXIT_IO) from exc
        self.outputs.append(path)
        return path

    def produced(self, path: Path) -> Path:
        self.outputs.append(path)
        return path

    def manifest(self, out_dir: Path) -> Path:
        data = {
            "command": self.args.command,
            "argv": self.argv,
            "workdir": str(self.workdir),
            "config": self.config,
            "seeds": self.seeds,
            "inputs": {k: {"path": str(p), "sha256": _sha256(p) if p.is_file() else None}
                       for k, p in self.inputs.items()},
            "outputs": {p.name: _sha256(p) for p in self.outputs if p.exists()},
            "wall_clock_seconds": round(time.time() - self.started, 3),
            "finished_utc": datetime.now(timezone.utc).isoformat(timespec="seconds"),
            "tool_version": __version__,
            "python": platform.python_version(),
            "numpy": np.__version__,
        }
        path = out_dir / "manifest.json"
        try:
            path.write_text(json.dumps(data, indent=2, sort_keys=True) + "\n", encoding="utf-8")
        except OSError as exc:
            raise CliError(f"cannot write {path}: {exc}", EXIT_IO) from exc
        return path


def _load_dataset(run: Run, p, role: str = "dataset"):
    path = run.input(p, role)
    try:
        return load_dataset(path)
    except DatasetFormatError as exc:
        raise CliError(f"{path}: {exc}", EXIT_IO) from exc
    except OSError as exc:
        raise CliError(f"cannot read {path}: {exc}", EXIT_IO) from exc


def _load_checkpoint(run: Run, p, dataset=None, role: str = "checkpoint"):
    path = run.input(p, role)
    try:
        return load_checkpoint(path, dataset)
    except CheckpointFormatError as exc:
        raise CliError(f"{path}: {exc}", EXIT_IO) from exc
    except OSError as exc:
        raise CliError(f"cannot read {path}: {exc}", EXIT_IO) from exc


def _histogram_summary(returns: np.ndarray, bins: int = 10) -> str:
    if returns.min() == returns.max():
        return f"all returns = {returns[0]:g}"
    counts, edges = np.histogram(returns, bins=bins)
    return "\n".join(f"  [{lo:8.3f}, {hi:8.3f}) {c:6d}" for lo, hi, c in zip(edges[:-1], edges[1:], counts))


# ---------------------------------------------------------------------------
# Commands


def cmd_collect(run: Run) -> int:
    a = run.args
    if a.env not in env_ids():
        raise CliError(f"unknown environment {a.env!r}; available: {', '.join(env_ids())}")
    env = get_env(a.env)
    collectors = [c.strip() for c in a.collector.split(",") if c.strip()]
    parts = []
    for c in collectors:
        if c == "random":
            if a.steps is None:
                raise CliError("--collector random needs --steps")
            parts.append(collect_random(env, a.steps, a.seed))
        else:
            if c not in env.scripted_policies:
                raise CliError(f"{a.env} has no collector {c!r}; available: random, "
                               + ", ".join(env.scripted_policies))
            if a.episodes is None:
                raise CliError(f"--collector {c} needs --episodes")
            parts.append(collect_scripted(env, c, a.episodes, a.seed, a.noise))
    dataset = parts[0] if len(parts) == 1 else concat_datasets(parts)
    out = run.out_dir()
    path = out / ("dataset.jsonl" if a.format == "jsonl" else "dataset.rvsd")
    try:
        save_dataset(dataset, path, a.format)
    except OSError as exc:
        raise CliError(f"cannot write {path}: {exc}", EXIT_IO) from exc
    run.produced(path)
    run.config = {"env": a.env, "collectors": collectors, "steps": a.steps, "episodes": a.episodes,
                  "noise": a.noise, "format": a.format}
    run.seeds = {"seed": a.seed}
    run.manifest(out)
    returns = dataset.returns()
    print(f"{len(dataset)} trajectories, {dataset.num_transitions} transitions -> {path}")
    print(f"episode return: mean {returns.mean():.4f}, min {returns.min():.4f}, max {returns.max():.4f}")
    print(_histogram_summary(returns))
    return EXIT_OK


_CONFIG_FLAGS = {
    "width": "hidden_width",
    "lr": "learning_rate",
    "dropout": "dropout_p",
    "batch_size": "batch_size",
    "steps": "total_gradient_steps",
    "outcome": "outcome",
    "goal_extractor": "goal_extractor",
    "head": "head",
    "bins": "bins",
    "val_fraction": "validation_fraction",
    "eval_every": "eval_every",
    "eval_rollouts": "eval_rollouts",
    "action_mode": "action_mode",
    "return_target": "return_target",
    "timestep_sampling": "timestep_sampling",
}


def _resolve_config(run: Run) -> TrainConfig:
    a = run.args
    try:
        config = load_config(run.input(a.config, "config")) if a.config else TrainConfig()
        overrides = {field: getattr(a, flag) for flag, field in _CONFIG_FLAGS.items() if getattr(a, flag) is not None}
        if a.normalize_condition:
            overrides["normalize_condition"] = True
        if a.seed is not None:
            overrides["seed"] = a.seed
        return config.replace(**overrides)
    except (ValueError, TypeError) as exc:
        raise CliError(f"bad configuration: {exc}") from exc


def cmd_train(run: Run) -> int:
    from rvslab.evaluation import make_checkpoint_evaluator

    a = run.args
    dataset = _load_dataset(run, a.dataset)
    config = _resolve_config(run)
    resume, resume_log = None, None
    if a.resume:
        resume = _load_checkpoint(run, a.resume, dataset, role="resume")
        metrics_path = Path(run.inputs["resume"]).with_name("metrics.csv")
        if metrics_path.exists():
            resume_log = MetricsLog.from_csv(metrics_path.read_text())
    evaluator = make_checkpoint_evaluator(config.eval_rollouts, config.seed) if config.eval_rollouts else None
    run.config = config.to_dict()
    run.seeds = {"seed": config.seed}
    out = run.out_dir()
    code = EXIT_OK
    try:
        artifact, metrics = train(dataset, config, evaluator, resume, resume_log)
    except TrainingAborted as exc:
        artifact, metrics, code = exc.artifact, exc.metrics, EXIT_NUMERIC
        print(f"training aborted: {exc}", file=sys.stderr)
    except (ValueError, EnvError) as exc:
        raise CliError(str(exc)) from exc
    try:
        run.produced(save_checkpoint(artifact, out / "checkpoint.rvsc"))
    except OSError as exc:
        raise CliError(f"cannot write checkpoint: {exc}", EXIT_IO) from exc
    metrics_csv = run.write(out / "metrics.csv", metrics.to_csv())
    if len(metrics.records):
        from rvslab.plotting import plot_metrics

        run.produced(plot_metrics(metrics_csv, out / "metrics.png"))
    run.manifest(out)
    last = metrics.records[-1] if len(metrics.records) else None
    if last is not None:
        print(f"step {last.step}: train_loss {last.train_loss:.6f} val_loss "
              f"{'n/a' if last.val_loss is None else f'{last.val_loss:.6f}'} -> {out / 'checkpoint.rvsc'}")
    return code


def cmd_eval(run: Run) -> int:
    a = run.args
    dataset = _load_dataset(run, a.dataset) if a.dataset else None
    artifact = _load_checkpoint(run, a.checkpoint, dataset)
    out = run.out_dir()
    run.seeds = {"seed": a.seed}
    run.config = {"analysis": a.analysis, "n": a.n, "mode": a.mode, "return_target": a.return_target,
                  "workers": a.workers}
    env_id = artifact.env_id
    try:
        if a.analysis == "rollouts":
            plan = default_plan(artifact, a.return_target)
            report = evaluate(env_id, artifact, plan, a.n, a.seed, a.mode, a.workers)
            path = run.write(_csv_name(out, env_id, "eval"), report.to_csv())
            print(f"success_rate {report.success_rate:.1f}% mean_return {report.mean_return:.4f} "
                  f"normalized_score {report.normalized_score:.2f} ({report.n_rollouts} rollouts) -> {path}")
        elif a.analysis == "goal_strategies":
            if dataset is None:
                raise CliError("--analysis goal_strategies needs --dataset")
            run.config.update(candidates=a.candidates, per_candidate=a.per_candidate)
            results = goal_strategy_compare(env_id, dataset, artifact, n_rollouts=a.n, n_candidates=a.candidates,
                                            n_per_candidate=a.per_candidate, seed=a.seed, workers=a.workers)
            cols = ("strategy", "available", "mean_return", "normalized_score", "success_rate", "n_rollouts",
                    "best_goal", "offline", "note")
            rows = []
            for r in results.values():
                row = dict(vars(r))
                row["best_goal"] = None if r.best_goal is None else " ".join(repr(v) for v in r.best_goal)
                rows.append(row)
                print(f"{r.strategy}: " + ("unavailable (" + r.note + ")" if not r.available else
                                           f"mean_return {r.mean_return:.4f} success {r.success_rate:.1f}%"
                                           + ("" if r.offline else " [" + r.note + "]")))
            run.write(_csv_name(out, env_id, "goal_strategies"), rows_to_csv(rows, cols))
        else:
            if dataset is None:
                raise CliError("--analysis stitching needs --dataset")
            bc = _load_checkpoint(run, a.bc_checkpoint, dataset, role="bc_checkpoint") if a.bc_checkpoint else None
            rep = stitching_eval(artifact, dataset, bc, a.n, a.seed, a.workers)
            rows = [{"policy": "rvs_g", "success_rate": rep.rvs.success_rate, "mean_return": rep.rvs.mean_return,
                     "n": rep.rvs.n_rollouts, "audit_passed": rep.audit_passed}]
            if rep.bc is not None:
                rows.append({"policy": "bc", "success_rate": rep.bc.success_rate, "mean_return": rep.bc.mean_return,
                             "n": rep.bc.n_rollouts, "audit_passed": rep.audit_passed})
            run.write(_csv_name(out, env_id, "stitching"),
                      rows_to_csv(rows, ("policy", "success_rate", "mean_return", "n", "audit_passed")))
            for r in rows:
                print(f"{r['policy']}: goal-C success {r['success_rate']:.1f}%")
    except StitchingAuditError as exc:
        raise CliError(f"dataset audit failed, refusing to report: {exc}") from exc
    except (ValueError, EnvError) as exc:
        raise CliError(str(exc)) from exc
    run.manifest(out)
    return EXIT_OK


def cmd_interpolate(run: Run) -> int:
    from rvslab.plotting import plot_interpolation

    a = run.args
    artifact = _load_checkpoint(run, a.checkpoint)
    try:
        targets = parse_range(a.targets)
        rows = reward_target_sweep(artifact.env_id, artifact, targets, a.n_per_target, a.seed, a.mode, a.workers)
    except ValueError as exc:
        raise CliError(str(exc)) from exc
    out = run.out_dir()
    run.config = {"targets": targets, "n_per_target": a.n_per_target, "mode": a.mode, "workers": a.workers}
    run.seeds = {"seed": a.seed}
    path = run.write(_csv_name(out, artifact.env_id, "interpolate"), rows_to_csv(rows, REWARD_SWEEP_COLUMNS))
    run.produced(plot_interpolation(path, path.with_suffix(".png")))
    run.manifest(out)
    for r in rows:
        print(f"target {r['target']:8.3f} -> achieved {r['mean_return']:8.3f} +- {r['std_return']:.3f}")
    return EXIT_OK


def _int_list(s: str) -> list[int]:
    return [int(v) for v in s.split(",") if v.strip()]


def _float_list(s: str) -> list[float]:
    return [float(v) for v in s.split(",") if v.strip()]


def cmd_sweep(run: Run) -> int:
    from rvslab.plotting import plot_sweep

    a = run.args
    dataset = _load_dataset(run, a.dataset)
    base = _resolve_config(run)
    axes = {}
    try:
        if a.widths:
            axes["width"] = _int_list(a.widths)
        if a.dropouts:
            axes["dropout"] = _float_list(a.dropouts)
        if a.batch_sizes:
            axes["batch"] = _int_list(a.batch_sizes)
        seeds = _int_list(a.seeds)
        rows = run_sweep(dataset, base, axes, seeds, a.n_eval, a.seed or 0, a.workers)
    except ValueError as exc:
        raise CliError(str(exc)) from exc
    out = run.out_dir()
    run.config = {"base": base.to_dict(), "axes": axes, "n_eval": a.n_eval, "workers": a.workers}
    run.seeds = {"cell_seeds": seeds, "eval_seed": a.seed or 0}
    path = run.write(_csv_name(out, dataset.env_id, "sweep"), sweep_to_csv(rows))
    if any(r["status"] == "ok" for r in rows):
        run.produced(plot_sweep(path, path.with_suffix(".png")))
    run.manifest(out)
    failed = sum(r["status"] != "ok" for r in rows)
    print(f"{len(rows)} cells ({failed} failed) -> {path}")
    return EXIT_OK


REPORT_METRICS = ("success_rate", "mean_return", "normalized_score")


def _summarize(summaries: list[dict]) -> list[dict]:
    by_env: dict[str, list[dict]] = {}
    for s in summaries:
        by_env.setdefault(s["env_id"], []).append(s)
    rows = []
    for env_id in sorted(by_env):
        group = by_env[env_id]
        row = {"env_id": env_id, "n_runs": len(group)}
        for m in REPORT_METRICS:
            vals = np.array([float(s[m]) for s in group])
            row[f"{m}_mean"] = float(vals.mean())
            row[f"{m}_std"] = float(vals.std())
        rows.append(row)
    return rows


def cmd_report(run: Run) -> int:
    from rvslab import plotting

    a = run.args
    files = []
    for i, p in enumerate(a.inputs):
        path = run.input(p, f"input_{i}")
        files.extend(sorted(path.rglob("*.csv")) if path.is_dir() else [path])
    eval_files = [f for f in files if "_eval_" in f.name]
    if not eval_files:
        raise CliError("no evaluation CSVs (<env>_eval_<timestamp>.csv) among the inputs")
    try:
        summaries = [read_eval_summary(f.read_text()) for f in eval_files]
    except OSError as exc:
        raise CliError(f"cannot read inputs: {exc}", EXIT_IO) from exc
    for f, s in zip(eval_files, summaries):
        if "env_id" not in s:
            raise CliError(f"{f} has no summary header")
    rows = _summarize(summaries)
    out = run.out_dir()
    cols = ["env_id", "n_runs"] + [f"{m}_{k}" for m in REPORT_METRICS for k in ("mean", "std")]
    path = run.write(_csv_name(out, "suite", "report"), rows_to_csv(rows, cols))
    run.produced(plotting.plot_report(path, path.with_suffix(".png")))
    for f in files:  # figures for any other analysis CSVs found among the inputs
        target = out / f"{f.parent.name}_{f.stem}.png"
        try:
            if "_interpolate_" in f.name:
                run.produced(plotting.plot_interpolation(f, target))
            elif "_sweep_" in f.name:
                run.produced(plotting.plot_sweep(f, target))
            elif f.name == "metrics.csv":
                run.produced(plotting.plot_metrics(f, target))
        except (KeyError, ValueError) as exc:
            log.warning("could not plot %s: %s", f, exc)
    run.config = {"eval_files": [str(f) for f in eval_files]}
    run.manifest(out)
    print(f"{'env':16s} {'runs':>4s} {'success %':>16s} {'return':>18s} {'normalized':>18s}")
    for r in rows:
        print(f"{r['env_id']:16s} {r['n_runs']:4d} "
              + " ".join(f"{r[m + '_mean']:9.3f} +- {r[m + '_std']:5.2f}" for m in REPORT_METRICS))
    return EXIT_OK


# ---------------------------------------------------------------------------
# Parser


def _add_config_args(p: argparse.ArgumentParser):
    g = p.add_argument_group("training config (overrides the config file)")
    g.add_argument("--config", help="TOML run configuration")
    g.add_argument("--width", type=int)
    g.add_argument("--lr", type=float)
    g.add_argument("--dropout", type=float)
    g.add_argument("--batch-size", type=int)
    g.add_argument("--steps", type=int, help="total gradient steps")
    g.add_argument("--outcome", choices=("goal", "avg_return", "none"))
    g.add_argument("--goal-extractor")
    g.add_argument("--head", choices=("categorical", "gaussian"))
    g.add_argument("--bins", type=int)
    g.add_argument("--val-fraction", type=float)
    g.add_argument("--eval-every", type=int)
    g.add_argument("--eval-rollouts", type=int)
    g.add_argument("--action-mode", choices=("stochastic", "deterministic"))
    g.add_argument("--return-target", type=float, help="episode-return target for return-conditioned policies")
    g.add_argument("--timestep-sampling", choices=("uniform", "length_weighted"))
    g.add_argument("--normalize-condition", action="store_true")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="rvslab", description=__doc__.splitlines()[0])
    parser.add_argument("--workdir", default=".", help="base for relative paths (default: current directory)")
    parser.add_argument("-v", "--verbose", action="store_true")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("collect", help="collect an offline dataset")
    p.add_argument("--env", required=True)
    p.add_argument("--collector", required=True,
                   help="random, or comma-separated scripted policies (e.g. medium,expert)")
    p.add_argument("--steps", type=int, help="transitions for the random collector")
    p.add_argument("--episodes", type=int, help="episodes per scripted collector")
    p.add_argument("--noise", type=float, default=0.0)
    p.add_argument("--format", choices=("binary", "jsonl"), default="binary")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True, help="output directory")

    p = sub.add_parser("train", help="train a policy")
    p.add_argument("--dataset", required=True)
    p.add_argument("--resume", help="checkpoint to continue from")
    p.add_argument("--seed", type=int)
    p.add_argument("--out", required=True)
    _add_config_args(p)

    p = sub.add_parser("eval", help="roll out a trained policy")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--analysis", choices=("rollouts", "goal_strategies", "stitching"), default="rollouts")
    p.add_argument("--dataset", help="training dataset (hash check; needed by goal_strategies and stitching)")
    p.add_argument("--bc-checkpoint", help="BC policy for the stitching contrast")
    p.add_argument("--n", type=int, default=200, help="rollouts")
    p.add_argument("--mode", choices=("stochastic", "deterministic"))
    p.add_argument("--return-target", type=float)
    p.add_argument("--candidates", type=int, default=200)
    p.add_argument("--per-candidate", type=int, default=10)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--workers", type=int, default=1)
    p.add_argument("--out", required=True)

    p = sub.add_parser("interpolate", help="achieved return across a grid of return targets")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--targets", required=True, help="start:stop:step (inclusive) or comma list")
    p.add_argument("--n-per-target", type=int, default=50)
    p.add_argument("--mode", choices=("stochastic", "deterministic"))
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--workers", type=int, default=1)
    p.add_argument("--out", required=True)

    p = sub.add_parser("sweep", help="train and evaluate a grid of configurations")
    p.add_argument("--dataset", required=True)
    p.add_argument("--widths")
    p.add_argument("--dropouts")
    p.add_argument("--batch-sizes")
    p.add_argument("--seeds", default="0")
    p.add_argument("--n-eval", type=int, default=200)
    p.add_argument("--seed", type=int, help="evaluation seed")
    p.add_argument("--workers", type=int, default=1)
    p.add_argument("--out", required=True)
    _add_config_args(p)

    p = sub.add_parser("report", help="summarize evaluation CSVs and render figures")
    p.add_argument("--inputs", nargs="+", required=True, help="eval CSVs or directories holding them")
    p.add_argument("--out", required=True)
    return parser


COMMANDS = {
    "collect": cmd_collect,
    "train": cmd_train,
    "eval": cmd_eval,
    "interpolate": cmd_interpolate,
    "sweep": cmd_sweep,
    "report": cmd_report,
}


def main(argv=None) -> int:
    argv = sys.argv[1:] if argv is None else list(argv)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    warnings.simplefilter("default")
    if getattr(args, "workers", 1) is not None and getattr(args, "workers", 1) < 1:
        print("rvslab: error: --workers must be >= 1", file=sys.stderr)
        return EXIT_USAGE
    try:
        return COMMANDS[args.command](Run(args, argv))
    except CliError as exc:
        print(f"rvslab {args.command}: error: {exc}", file=sys.stderr)
        return exc.code
    except OSError as exc:
        print(f"rvslab {args.command}: I/O error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
