"""Command-line pipeline: transform, flops, search, train, eval, sweep, report.

Every command except ``flops`` works inside one run directory::

    run/config.txt  model.txt  search.log
        settings/<name>.txt   weights/<name>.sgw
        traces/<name>_<split>.sgt   reports/...

A weights file ``weights/<name>.sgw`` pairs with ``settings/<name>.txt``;
training without ``--setting`` uses the untransformed model under the name
``static``.  Failures print one ``error ...`` line to stderr and exit 1.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
import time
from contextlib import contextmanager
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import checkpoint, plotting
from .config import ExperimentConfig, load_config, with_overrides
from .graph import count_flops, load_model
from .runtime import (
    ThresholdPolicy,
    default_grid,
    select_thresholds,
    simulate_policy,
    sweep_csv,
    sweep_thresholds,
)
from .search import SearchResult, default_threads, parse_log_line, retrain, search
from .trainer import TraceTable, build_trace_table, train
from .transform import (
    TransformSetting,
    apply_transform,
    decode_key,
    describe,
    format_setting,
    init_stage_weights,
    parse_setting,
)

log = logging.getLogger("stagewise")

SUBDIRS = ("settings", "weights", "traces", "reports")


class CommandError(RuntimeError):
    pass


# -- run directory -------------------------------------------------------------

@contextmanager
def locked(run: Path):
    """Advisory lock: one command per run directory at a time."""
    run.mkdir(parents=True, exist_ok=True)
    lock = run / ".lock"
    try:
        fd = os.open(lock, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
    except FileExistsError:
        raise CommandError(f"run directory {run} is locked by {lock}; remove it if no command is running") from None
    with os.fdopen(fd, "w") as f:
        f.write(f"{os.getpid()}\n")
    try:
        yield
    finally:
        lock.unlink(missing_ok=True)


class Run:
    def __init__(self, root: Path, cfg: ExperimentConfig, base_dir: Path | None):
        self.root = root
        self.cfg = cfg
        self.base_dir = base_dir
        self.graph = load_model(cfg.model_path(base_dir))
        for d in SUBDIRS:
            (root / d).mkdir(parents=True, exist_ok=True)
        (root / "config.txt").write_text(_absolute(cfg, base_dir).to_text())
        (root / "model.txt").write_text(self.graph.text)
        self._data = None

    def path(self, *parts) -> Path:
        return self.root.joinpath(*parts)

    @property
    def data(self):
        if self._data is None:
            self._data = self.cfg.datasets(self.base_dir)
        return self._data

    def setting(self, path: str | Path | None, name: str | None = None) -> tuple[str, TransformSetting]:
        """Resolve ``--setting`` (or the stored one for ``name``) to (name, setting)."""
        if path is None and name is not None and self.path("settings", f"{name}.txt").exists():
            path = self.path("settings", f"{name}.txt")
        if path is None:
            if name not in (None, "static"):
                raise CommandError(f"no setting for {name!r}; pass --setting")
            return "static", TransformSetting.identity(self.graph)
        path = Path(path)
        setting = parse_setting(path.read_text(), self.graph)
        stored = self.path("settings", f"{path.stem}.txt")
        if path.resolve() != stored.resolve():
            stored.write_text(format_setting(setting, self.graph))
        return name or path.stem, setting


def _absolute(cfg: ExperimentConfig, base_dir: Path | None) -> ExperimentConfig:
    def fix(p: str) -> str:
        return str((base_dir / p).resolve()) if p and base_dir and (base_dir / p).exists() else p

    return replace(cfg, model=fix(cfg.model), train=fix(cfg.train), val=fix(cfg.val), test=fix(cfg.test))


def _open_run(args) -> Run:
    if args.config:
        cfg_path = Path(args.config)
        cfg = load_config(cfg_path)
        base = cfg_path.parent
    else:
        existing = Path(args.out or "run") / "config.txt"
        if not existing.exists():
            raise CommandError("no --config given and no config.txt in the run directory")
        cfg = load_config(existing)
        base = existing.parent
    cfg = with_overrides(cfg, seed=args.seed, out=args.out)
    return Run(Path(cfg.out), cfg, base)


def _summary(kind: str, **kw) -> None:
    print(" ".join([kind] + [f"{k}={v}" for k, v in kw.items()]))


def _load_weights(run: Run, args) -> tuple[str, dict]:
    if not args.weights:
        raise CommandError("--weights is required")
    p = Path(args.weights)
    if not p.exists() and run.path("weights", f"{args.weights}.sgw").exists():
        p = run.path("weights", f"{args.weights}.sgw")
    return p.stem, checkpoint.load(p)


def _trace(run: Run, name: str, msm, weights, split: str) -> TraceTable:
    ds = {"train": run.data[0], "val": run.data[1], "test": run.data[2]}[split]
    trace = build_trace_table(msm, weights, ds)
    trace.save(run.path("traces", f"{name}_{split}.sgt"))
    return trace


def _grid(run: Run, args):
    step = args.grid_step if getattr(args, "grid_step", None) else run.cfg.grid_step
    return default_grid(step)


# -- commands -------------------------------------------------------------------

def cmd_flops(args) -> None:
    if args.model:
        graph = load_model(args.model)
    elif args.config:
        cfg = load_config(args.config)
        graph = load_model(cfg.model_path(Path(args.config).parent))
    else:
        raise CommandError("flops needs a model name/path or --config")
    rep = count_flops(graph)
    rows = [("layer", k, m) for k, m in enumerate(rep.per_layer)]
    rows += [("group", g, m) for g, m in enumerate(rep.per_group)]
    rows += [("head", "-", rep.head), ("total", "-", rep.total)]
    extra = {}
    if args.setting:
        msm = apply_transform(graph, parse_setting(Path(args.setting).read_text(), graph))
        rows += [("accumulated", i + 1, a) for i, a in enumerate(msm.accumulated)]
        extra["accumulated"] = ",".join(map(str, msm.accumulated))
    if args.out:
        out = Path(args.out) / "reports"
        out.mkdir(parents=True, exist_ok=True)
        with open(out / "flops.csv", "w", newline="") as f:
            w = csv.writer(f, lineterminator="\n")
            w.writerow(["kind", "index", "macs"])
            w.writerows(rows)
    _summary("flops", model=graph.fingerprint(), total=rep.total, millions=f"{rep.total / 1e6:.2f}",
             groups=len(graph.groups), **extra)


def cmd_transform(args) -> None:
    run = _open_run(args)
    if not args.setting:
        raise CommandError("--setting is required")
    name, setting = run.setting(args.setting)
    msm = apply_transform(run.graph, setting)
    run.path("reports", f"transform_{name}.txt").write_text(describe(msm))
    _summary("transform", name=name, key=setting.key(), stages=msm.s,
             accumulated=",".join(map(str, msm.accumulated)))


def cmd_search(args) -> None:
    run = _open_run(args)
    cfg = run.cfg
    tr, va, _ = run.data
    threads = args.threads if args.threads else default_threads()
    t0 = time.perf_counter()
    with open(run.path("search.log"), "w") as f:
        res: SearchResult = search(run.graph, cfg.search_config(), tr, va, cfg.train_config(), log_file=f, threads=threads)
    checkpoint.save(run.path("weights", "controller.sgw"), res.controller.params)
    with open(run.path("reports", "search.csv"), "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["rank", "encoding", "acc", "cost", "reward", "thresholds", "seed", "diverged"])
        for i, r in enumerate(res.records, 1):
            w.writerow([i, r.key, repr(r.acc), repr(r.cost), repr(r.reward),
                        ",".join(f"{t:g}" for t in r.thresholds), r.seed, int(r.diverged)])
    rewards = _log_rewards(run.path("search.log"))
    plotting.plot_search_trace(rewards, run.path("reports", "search_rewards.png"))
    for i, rec in enumerate(res.records[:cfg.top_k], 1):
        name = f"top{i}"
        setting = decode_key(rec.key, run.graph, cfg.G, cfg.s)
        run.path("settings", f"{name}.txt").write_text(format_setting(setting, run.graph))
        msm, weights, hist = retrain(rec, run.graph, cfg.G, cfg.s, tr, cfg.train_config(), va)
        _save_training(run, name, weights, hist)
    best = res.best
    _summary("search", samples=res.samples, unique=len(res.records), best=best.key,
             reward=f"{best.reward:.6f}", acc=f"{best.acc:.4f}", cost=f"{best.cost:.4f}",
             retrained=min(cfg.top_k, len(res.records)), seconds=f"{time.perf_counter() - t0:.1f}")


def _log_rewards(path: Path) -> list[float]:
    out = []
    for line in path.read_text().splitlines():
        kind, kv = parse_log_line(line)
        if kind == "sample":
            out.append(float(kv["reward"]))
    return out


def _save_training(run: Run, name: str, weights, hist) -> None:
    checkpoint.save(run.path("weights", f"{name}.sgw"), weights)
    run.path("reports", f"history_{name}.csv").write_text(hist.to_csv())
    plotting.plot_history(hist.rows, run.path("reports", f"history_{name}.png"), title=name)


def cmd_train(args) -> None:
    run = _open_run(args)
    name, setting = run.setting(args.setting)
    if name == "static":
        run.path("settings", "static.txt").write_text(format_setting(setting, run.graph))
    msm = apply_transform(run.graph, setting)
    tc = run.cfg.train_config()
    if tc.alpha is not None and len(tc.alpha) != msm.s:
        tc = replace(tc, alpha=None)
    tr, va, _ = run.data
    weights = init_stage_weights(msm, tc.seed, np.dtype(tc.dtype))
    weights, hist = train(msm, weights, tr, tc, va)
    _save_training(run, name, weights, hist)
    last = hist.rows[-1]["acc"] if hist.rows else []
    _summary("train", name=name, stages=msm.s, epochs=tc.epochs,
             val_acc=",".join(f"{a:.4f}" for a in last) or "-")


def _policy_for(run: Run, args, name: str, msm, weights) -> ThresholdPolicy:
    if args.thresholds is not None:
        return ThresholdPolicy.parse(args.thresholds)
    val = _trace(run, name, msm, weights, "val")
    policy, _ = select_thresholds(val, run.cfg.omega, count_flops(run.graph).total, _grid(run, args))
    return policy


def cmd_eval(args) -> None:
    run = _open_run(args)
    name, weights = _load_weights(run, args)
    _, setting = run.setting(args.setting, name)
    msm = apply_transform(run.graph, setting)
    policy = _policy_for(run, args, name, msm, weights)
    trace = _trace(run, name, msm, weights, "test")
    stats = simulate_policy(trace, policy)
    run.path("reports", f"eval_{name}.csv").write_text(stats.to_csv())
    run.path("reports", f"thresholds_{name}.txt").write_text(f"{policy}\n")
    plotting.plot_exit_fractions(stats, run.path("reports", f"exits_{name}.png"), title=name)
    base = count_flops(run.graph).total
    _summary("eval", name=name, thresholds=str(policy) or "-", accuracy=repr(stats.accuracy),
             mean_macs=repr(float(stats.mean_macs)), relative=f"{float(stats.mean_macs / base):.4f}")


def cmd_sweep(args) -> None:
    run = _open_run(args)
    name, weights = _load_weights(run, args)
    _, setting = run.setting(args.setting, name)
    msm = apply_transform(run.graph, setting)
    base = count_flops(run.graph).total
    grid = _grid(run, args)
    trace = _trace(run, name, msm, weights, "test")
    points = sweep_thresholds(trace, grid, run.cfg.omega, base)
    run.path("reports", f"sweep_{name}.csv").write_text(sweep_csv(points))
    chosen = None
    if msm.s > 1:
        val = _trace(run, name, msm, weights, "val")
        pol, _ = select_thresholds(val, run.cfg.omega, base, grid)
        chosen = next(p for p in points if p.thresholds == pol.thresholds)
    plotting.plot_tradeoff(points, run.path("reports", f"tradeoff_{name}.png"), chosen=chosen, title=name)
    _summary("sweep", name=name, points=len(points), pareto=sum(p.pareto for p in points),
             min_macs=repr(float(points[0].mean_macs)), max_macs=repr(float(points[-1].mean_macs)))


def cmd_report(args) -> None:
    root = Path(args.out or "run")
    if not root.is_dir():
        raise CommandError(f"no run directory at {root}")
    lines = [f"run {root}"]
    slog = root / "search.log"
    if slog.exists():
        rewards = _log_rewards(slog)
        plotting.plot_search_trace(rewards, root / "reports" / "search_rewards.png")
        lines.append(f"search samples={len(rewards)} best_reward={max(rewards):.6f}" if rewards else "search empty")
    ranked = root / "reports" / "search.csv"
    if ranked.exists():
        with open(ranked) as f:
            for row in list(csv.DictReader(f))[:5]:
                lines.append(f"  rank {row['rank']} {row['encoding']} reward={float(row['reward']):.6f} "
                             f"acc={float(row['acc']):.4f} cost={float(row['cost']):.4f}")
    for p in sorted((root / "reports").glob("eval_*.csv")):
        with open(p) as f:
            overall = [r for r in csv.DictReader(f) if r["stage"] == "overall"][0]
        lines.append(f"eval {p.stem[5:]} accuracy={float(overall['accuracy']):.4f} "
                     f"mean_macs={float(overall['macs']):.0f}")
    for p in sorted((root / "reports").glob("sweep_*.csv")):
        with open(p) as f:
            rows = list(csv.DictReader(f))
        front = sum(int(r["pareto_flag"]) for r in rows)
        lines.append(f"sweep {p.stem[6:]} points={len(rows)} pareto={front}")
    text = "\n".join(lines) + "\n"
    (root / "reports").mkdir(exist_ok=True)
    (root / "reports" / "summary.txt").write_text(text)
    sys.stdout.write(text)


COMMANDS = {
    "transform": cmd_transform,
    "flops": cmd_flops,
    "search": cmd_search,
    "train": cmd_train,
    "eval": cmd_eval,
    "sweep": cmd_sweep,
    "report": cmd_report,
}


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="stagewise", description=__doc__.split("\n")[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        sp = sub.add_parser(name)
        sp.add_argument("--config")
        sp.add_argument("--seed", type=int)
        sp.add_argument("--out")
        sp.add_argument("--threads", type=int)
        if name in ("transform", "train", "eval", "sweep", "flops"):
            sp.add_argument("--setting")
        if name in ("eval", "sweep"):
            sp.add_argument("--weights")
        if name == "eval":
            sp.add_argument("--thresholds")
        if name in ("eval", "sweep"):
            sp.add_argument("--grid-step", type=float, dest="grid_step")
        if name == "flops":
            sp.add_argument("model", nargs="?")
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.command in ("flops", "report"):
            COMMANDS[args.command](args)
        else:
            out = Path(args.out) if args.out else None
            if out is None and args.config:
                out = Path(load_config(args.config, validate=False).out)
            with locked(out or Path("run")):
                COMMANDS[args.command](args)
    except Exception as exc:  # noqa: BLE001 - every failure becomes one error line
        msg = json.dumps(str(exc))
        print(f"error command={args.command} kind={type(exc).__name__} message={msg}", file=sys.stderr)
        if args.verbose:
            raise
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
