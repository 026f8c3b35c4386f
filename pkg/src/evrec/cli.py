"""Command-line entry point: ``evrec {gen-dataset,train,evaluate,report}``.

Exit status is 0 on success, 1 when a computation fails (divergence,
generation failure) and 2 for usage or I/O problems. Each command writes
the fully resolved configuration next to its outputs; wall-clock
timestamps go only into the ``run_meta.json`` sidecar so the primary
outputs are byte-reproducible.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys
import time
from collections import defaultdict
from pathlib import Path

import numpy as np

from . import __version__
from .agent import (
    OracleRecognizer,
    load_policy,
    train_policy,
    train_stage1,
    evaluate,
)
from .bench import LEVELS, generate_test_set, load_test_set, save_test_set, write_summary_csv
from .config import EvalConfig, ExperimentConfig
from .edl import EvidentialClassifier, write_metrics_csv
from .errors import (
    ChecksumMismatch,
    GenerationFailed,
    NonFiniteLoss,
    ParseError,
    SchemaVersionError,
    StageDependencyError,
)
from .records import read_header, read_table, write_table

log = logging.getLogger("evrec")

EXIT_OK, EXIT_FAIL, EXIT_USAGE = 0, 1, 2
RESOLVED_CONFIG = "resolved_config.json"
RECOGNIZER_FILE = "recognizer.json"
POLICY_FILE = "policy.json"
REPORT_VERSION = 1


class UsageError(Exception):
    pass


def _load_config(path):
    if path is None:
        return ExperimentConfig()
    p = Path(path)
    if not p.is_file():
        raise UsageError(f"config file not found: {p}")
    try:
        return ExperimentConfig.load(p)
    except (ValueError, TypeError) as exc:
        raise UsageError(f"bad config {p}: {exc}") from None


def _write_run_files(out_dir: Path, cfg: ExperimentConfig, argv):
    out_dir.mkdir(parents=True, exist_ok=True)
    cfg.save(out_dir / RESOLVED_CONFIG)
    meta = {"argv": list(argv), "version": __version__,
            "finished_utc": time.strftime("%Y-%m-%dT%H:%M:%SZ", time.gmtime())}
    (out_dir / "run_meta.json").write_text(json.dumps(meta, indent=2) + "\n")


def _split(text, conv=str):
    return [conv(t.strip()) for t in text.split(",") if t.strip()]


# ---------------------------------------------------------------------------
# gen-dataset
# ---------------------------------------------------------------------------

def cmd_gen_dataset(args):
    cfg = _load_config(args.config)
    n = args.n if args.n is not None else cfg.bench.n
    seed = args.seed if args.seed is not None else cfg.bench.seed
    cfg = dataclasses.replace(cfg, bench=dataclasses.replace(cfg.bench, n=n, seed=seed))
    out = Path(args.out)
    ts = generate_test_set(n, seed, cfg.world)
    out.parent.mkdir(parents=True, exist_ok=True)
    save_test_set(ts, out)
    write_summary_csv(ts, out.with_suffix(".summary.csv"))
    _write_run_files(out.parent, cfg, args.argv)
    total = len(ts)
    print(f"{'level':<10}{'count':>7}{'share':>8}")
    for lvl, c in ts.counts.items():
        print(f"{lvl:<10}{c:>7}{c / total:>8.1%}")
    print(f"{'total':<10}{total:>7}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# train
# ---------------------------------------------------------------------------

def _policy_rows(history):
    return [dataclasses.asdict(h) for h in history]


def cmd_train(args):
    cfg = _load_config(args.config)
    if args.seed is not None:
        cfg.seed = args.seed
    if args.reward is not None:
        cfg.policy = dataclasses.replace(cfg.policy, reward=args.reward)
    if args.updates is not None:
        cfg.policy = dataclasses.replace(cfg.policy, updates=args.updates)
    out = Path(args.out or cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    rec_path = Path(args.recognizer) if args.recognizer else out / RECOGNIZER_FILE

    recognizer = None
    if args.stage in ("recognizer", "all"):
        result = train_stage1(cfg.world, cfg.recognizer, cfg.stage1, cfg.seed)
        write_metrics_csv(out / "recognizer_metrics.csv", result.history)
        if not result.ok:
            raise NonFiniteLoss(cfg.recognizer.seed, "recognizer loss")
        result.model.save(out / RECOGNIZER_FILE, {"stage": "recognizer"})
        recognizer = result.model
        last = result.history[-1]
        print(f"recognizer: val_acc={last.val_acc:.4f} mean_u_id={last.mean_u_id:.4f} "
              f"mean_u_ood={last.mean_u_ood:.4f}")
    if args.stage in ("policy", "all"):
        if recognizer is None:
            if not rec_path.is_file():
                raise StageDependencyError(
                    f"policy stage needs a recognizer checkpoint; {rec_path} does not exist "
                    "(run --stage recognizer first or pass --recognizer)")
            recognizer = EvidentialClassifier.load(rec_path)
        policy, history = train_policy(recognizer, cfg.world, cfg.policy, ckpt_path=out / POLICY_FILE,
                                       resume=args.resume, stop_after=args.stop_after)
        write_table(out / "policy_metrics.csv", "policy-metrics", _policy_rows(history))
        if history:
            print(f"policy: updates={history[-1].update + 1} final_success={history[-1].final_success:.4f}")
    _write_run_files(out, cfg, args.argv)
    return EXIT_OK


# ---------------------------------------------------------------------------
# evaluate
# ---------------------------------------------------------------------------

def _resolve_models(args, agents):
    ckpt = Path(args.ckpt) if args.ckpt else None
    if ckpt is not None and not ckpt.exists():
        raise UsageError(f"checkpoint not found: {ckpt}")
    ckpt_dir = ckpt if ckpt is not None and ckpt.is_dir() else (ckpt.parent if ckpt else None)
    if args.recognizer == "oracle":
        recognizer = None
    else:
        rec_path = Path(args.recognizer) if args.recognizer else (ckpt_dir / RECOGNIZER_FILE if ckpt_dir else None)
        if rec_path is None or not rec_path.is_file():
            raise UsageError(f"recognizer checkpoint not found: {rec_path}")
        recognizer = EvidentialClassifier.load(rec_path)
    policy = None
    if "ours" in agents:
        pol_path = ckpt / POLICY_FILE if ckpt is not None and ckpt.is_dir() else ckpt
        if pol_path is None or not pol_path.is_file():
            raise UsageError(f"agent 'ours' needs a policy checkpoint; not found: {pol_path}")
        policy = load_policy(pol_path)
    return recognizer, policy


def run_matrix(recognizer, policy, ts, ev: EvalConfig):
    """Evaluate every (agent, sigma, seed); returns the three table row lists
    and the per-agent summary used for the printed table."""
    eval_rows, curve_rows, u_rows, summary = [], [], [], {}
    for agent in ev.agents:
        for sigma in ev.sigmas:
            results = [evaluate(agent, recognizer, ts, sigma=sigma, seed=s, policy=policy,
                                horizon=ev.horizon) for s in ev.seeds]
            for fusion in ev.fusions:
                tabs = [r.table([fusion]) for r in results]
                for i, row in enumerate(tabs[0]):
                    group = [t[i] for t in tabs]
                    eval_rows.append({**row, "top1": float(np.mean([g["top1"] for g in group])),
                                      "top3": float(np.mean([g["top3"] for g in group])),
                                      "n": int(sum(g["n"] for g in group))})
                curves = [r.step_curve(fusion) for r in results]
                for t in range(len(curves[0])):
                    pts = [c[t] for c in curves]
                    curve_rows.append({"agent": agent, "fusion": fusion, "sigma": sigma, "step": t + 1,
                                       **{k: float(np.mean([p[k] for p in pts]))
                                          for k in ("success", "mean_u_prefuse", "mean_u_fused")}})
            for lvl in LEVELS:
                vals = [r.uncertainty_by_level().get(lvl) for r in results]
                vals = [v for v in vals if v is not None]
                if vals:
                    u_rows.append({"agent": agent, "sigma": sigma, "level": lvl, "mean_u": float(np.mean(vals))})
            for fusion in ev.fusions:
                changes = [r.change_by_level(fusion) for r in results]
                summary[(agent, sigma, fusion)] = {lvl: float(np.mean([c[lvl] for c in changes]))
                                                   for lvl in changes[0]}
    return eval_rows, curve_rows, u_rows, summary


def summary_table(eval_rows, summary, fusion):
    """Plain-text table: one row per (agent, sigma), per-level top-1 (top-3)
    and the change in top-1 between the first and the final step."""
    cols = list(LEVELS) + ["All"]
    lines = [f"fusion: {fusion}",
             f"{'agent':<12}{'sigma':>6}" + "".join(f"{c:>16}" for c in cols) + f"{'change':>9}"]
    index = {(r["agent"], r["sigma"], r["level"]): r for r in eval_rows if r["fusion"] == fusion}
    for (agent, sigma, f), change in summary.items():
        if f != fusion:
            continue
        cells = []
        for c in cols:
            r = index.get((agent, sigma, c))
            cells.append(f"{100 * r['top1']:6.1f} ({100 * r['top3']:5.1f})" if r and r["n"] else f"{'-':>13}")
        lines.append(f"{agent:<12}{sigma:>6g}" + "".join(f"{c:>16}" for c in cells)
                     + f"{100 * change['All']:>+9.1f}")
    return "\n".join(lines) + "\n"


def cmd_evaluate(args):
    cfg = _load_config(args.config)
    ev = cfg.evaluation
    ev = EvalConfig(
        agents=_split(args.agent) if args.agent else ev.agents,
        fusions=_split(args.fusion) if args.fusion else ev.fusions,
        sigmas=_split(args.sigma_list, float) if args.sigma_list else ev.sigmas,
        seeds=_split(args.seeds, int) if args.seeds else ev.seeds,
        horizon=args.horizon if args.horizon is not None else ev.horizon,
    )
    cfg.evaluation = ev
    tpath = Path(args.testset)
    if not tpath.is_file():
        raise UsageError(f"test set not found: {tpath}")
    ts = load_test_set(tpath)
    recognizer, policy = _resolve_models(args, ev.agents)
    if recognizer is None:
        recognizer = OracleRecognizer(ts.world.n_classes)
    cfg.world = ts.world
    eval_rows, curve_rows, u_rows, summary = run_matrix(recognizer, policy, ts, ev)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_table(out / "evaluation.csv", "evaluation", eval_rows)
    write_table(out / "step_curves.csv", "step-curve", curve_rows)
    write_table(out / "uncertainty.csv", "uncertainty", u_rows)
    text = "".join(summary_table(eval_rows, summary, f) for f in ev.fusions)
    (out / "summary.txt").write_text(text)
    _write_run_files(out, cfg, args.argv)
    print(text, end="")
    return EXIT_OK


# ---------------------------------------------------------------------------
# report
# ---------------------------------------------------------------------------

def build_report(in_dir: Path):
    """Collect every versioned table under ``in_dir``.

    Returns (report dict, {file name: gnuplot text}). Raises
    SchemaVersionError if any table carries an unexpected version.
    """
    tables = sorted(p for p in in_dir.rglob("*.csv") if read_header(p) is not None)
    report = {"version": REPORT_VERSION, "sources": [], "evaluation": [], "step_curves": {},
              "uncertainty": [], "recognizer_metrics": [], "policy_metrics": []}
    dat = {}
    for p in tables:
        kind, rows = read_table(p)
        rel = str(p.relative_to(in_dir))
        report["sources"].append({"path": rel, "kind": kind, "rows": len(rows)})
        if kind == "evaluation":
            report["evaluation"].extend({**r, "source": rel} for r in rows)
        elif kind == "uncertainty":
            report["uncertainty"].extend({**r, "source": rel} for r in rows)
        elif kind == "step-curve":
            groups = defaultdict(list)
            for r in rows:
                groups[(r["agent"], r["fusion"], r["sigma"])].append(r)
            for (agent, fusion, sigma), rs in groups.items():
                rs.sort(key=lambda r: r["step"])
                key = f"{Path(rel).parent.as_posix().replace('/', '_') or 'root'}__{agent}__{fusion}__sigma{sigma:g}"
                cols = {"step": [int(r["step"]) for r in rs], "success": [r["success"] for r in rs],
                        "u_fused": [r["mean_u_fused"] for r in rs]}
                report["step_curves"][key] = cols
                lines = [f"# {agent} {fusion} sigma={sigma:g} ({rel})", "# step success u_fused"]
                lines += [f"{s} {a:.6f} {u:.6f}" for s, a, u in zip(cols["step"], cols["success"], cols["u_fused"])]
                dat[key + ".dat"] = "\n".join(lines) + "\n"
        elif kind == "recognizer-metrics":
            report["recognizer_metrics"].extend({**r, "source": rel} for r in rows)
        elif kind == "policy-metrics":
            report["policy_metrics"].extend({**r, "source": rel} for r in rows)
    return report, dat


def cmd_report(args):
    in_dir = Path(args.in_dir)
    if not in_dir.is_dir():
        raise UsageError(f"input directory not found: {in_dir}")
    report, dat = build_report(in_dir)
    if not report["sources"]:
        print(f"warning: no evrec tables found under {in_dir}; report is empty", file=sys.stderr)
        return EXIT_OK
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "report.json").write_text(json.dumps(report, indent=2, sort_keys=True) + "\n")
    for name, text in dat.items():
        (out / name).write_text(text)
    print(f"report: {len(report['sources'])} tables, {len(dat)} curves -> {out}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# entry point
# ---------------------------------------------------------------------------

def build_parser():
    p = argparse.ArgumentParser(prog="evrec", description="Evidential active recognition workbench.")
    p.add_argument("--print-config", action="store_true", help="print the default configuration and exit")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command")

    g = sub.add_parser("gen-dataset", help="generate a difficulty-scored test set")
    g.add_argument("--n", type=int)
    g.add_argument("--seed", type=int)
    g.add_argument("--out", required=True)
    g.add_argument("--config")
    g.set_defaults(func=cmd_gen_dataset)

    t = sub.add_parser("train", help="staged training: recognizer, then policy")
    t.add_argument("--stage", choices=("recognizer", "policy", "all"), default="all")
    t.add_argument("--config")
    t.add_argument("--out")
    t.add_argument("--recognizer", help="recognizer checkpoint for --stage policy")
    t.add_argument("--seed", type=int)
    t.add_argument("--reward", choices=("belief", "binary"))
    t.add_argument("--updates", type=int, help="override the number of policy updates")
    t.add_argument("--resume", action="store_true", help="continue policy training from its checkpoint")
    t.add_argument("--stop-after", type=int, help="stop after this many policy updates")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("evaluate", help="evaluate agents over fusions and noise levels")
    e.add_argument("--agent", help="comma list of ours, fixation, random, singleview")
    e.add_argument("--fusion", help="comma list of evidential, max, last, average, vote")
    e.add_argument("--sigma-list", help="comma list of feature-noise levels")
    e.add_argument("--seeds", help="comma list of evaluation seeds")
    e.add_argument("--horizon", type=int)
    e.add_argument("--testset", required=True)
    e.add_argument("--ckpt", help="training output directory or policy checkpoint")
    e.add_argument("--recognizer", help="recognizer checkpoint, or 'oracle'")
    e.add_argument("--config")
    e.add_argument("--out", required=True)
    e.set_defaults(func=cmd_evaluate)

    r = sub.add_parser("report", help="merge result tables into a JSON report and gnuplot data")
    r.add_argument("--in", dest="in_dir", required=True)
    r.add_argument("--out", required=True)
    r.set_defaults(func=cmd_report)
    return p


def main(argv=None):
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if args.print_config:
        print(ExperimentConfig().dumps(), end="")
        return EXIT_OK
    if args.command is None:
        parser.print_usage(sys.stderr)
        return EXIT_USAGE
    args.argv = argv
    try:
        return args.func(args)
    except (UsageError, StageDependencyError, ParseError, ChecksumMismatch, SchemaVersionError,
            OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (NonFiniteLoss, GenerationFailed, FloatingPointError, RuntimeError) as exc:
        print(f"failed: {exc}", file=sys.stderr)
        return EXIT_FAIL


if __name__ == "__main__":
    sys.exit(main())
