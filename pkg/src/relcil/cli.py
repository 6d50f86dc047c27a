"""Command-line entry point: ``relcil {run,ablate,theory,gradcheck,export}``."""

from __future__ import annotations

import argparse
import csv
import json
import os
import sys
import time

import numpy as np

from .backbone import Backbone, BackboneConfig, save_checkpoint
from .config import ExperimentConfig, from_dict, load_config, to_dict
from .errors import ConfigError, NumericalError, ParseError
from .metrics import forgetting, max_identity_error, summarize, theory_report
from .numerics import central_differences, check_gradient, relative_errors, rng_stream, singular_values_batch
from .objectives import TaskObjective
from .relation import PHIS, AlignmentConfig, relation_batch, weyl_sweep, write_drift_csv
from .stream import export_stream, load_manifest, make_stream
from .trainer import run_stream

ABLATION_VARIANTS = (
    ("none", True),
    ("feature_last", True),
    ("feature_last", False),
    ("feature_all", True),
    ("feature_all", False),
    ("p2p", True),
    ("b_eigen", True),
    ("eigen", True),
)
GRADCHECK_LAMBDAS = (0.0, 1.0, 5.0)
ABLATION_COLUMNS = ("strategy", "normalize_features", "A_last", "A_avg", "final_forgetting", "dataset_hash")


def _r(x):
    return f"{x:.17g}"


def load_data(cfg: ExperimentConfig):
    if cfg.data:
        return load_manifest(cfg.data)
    return make_stream(cfg.stream)


def execute(cfg: ExperimentConfig):
    """Run one experiment; returns ``(RunResult, tasks)``."""
    base, tasks = load_data(cfg)
    return run_stream(base, tasks, cfg.backbone, cfg.train), tasks


def write_accuracy_csv(acc, path):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(("after_task", "eval_task", "accuracy"))
        for i, row in enumerate(acc.rows, start=1):
            for j, v in enumerate(row, start=1):
                w.writerow((i, j, _r(v)))


def write_json(obj, path):
    with open(path, "w") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True)
        fh.write("\n")


def save_run(result, cfg: ExperimentConfig, out):
    os.makedirs(out, exist_ok=True)
    report = result.report(to_dict(cfg))
    write_json(report, os.path.join(out, "report.json"))
    write_accuracy_csv(result.accuracy, os.path.join(out, "accuracy.csv"))
    write_drift_csv(result.drift, os.path.join(out, "drift.csv"))
    if cfg.theory:
        save_checkpoint(result.backbone, os.path.join(out, "checkpoint.npz"))
        with open(os.path.join(out, "head_history.npz"), "wb") as fh:
            np.savez(
                fh,
                **{f"task_{t}_class_{c}": w for t, heads in enumerate(result.head_history, 1) for c, w in heads.items()},
            )
    return report


# --------------------------------------------------------------------------
# commands


def cmd_run(cfg: ExperimentConfig):
    result, _ = execute(cfg)
    report = save_run(result, cfg, cfg.out)
    print(f"A_last={report['A_last']:.4f} A_avg={report['A_avg']:.4f} -> {cfg.out}")
    return report


def cmd_ablate(cfg: ExperimentConfig):
    os.makedirs(cfg.out, exist_ok=True)
    rows = []
    for strategy, norm in ABLATION_VARIANTS:
        d = to_dict(cfg)
        d["alignment"].update(strategy=strategy, normalize_features=norm)
        vcfg = from_dict(d).resolved()
        result, _ = execute(vcfg)
        summ = summarize(result.accuracy)
        f = forgetting(result.accuracy.errors())[-1]
        rows.append((strategy, norm, summ["A_last"], summ["A_avg"], f, result.dataset_hash))
        print(f"{strategy:<13} norm={norm!s:<5} A_last={summ['A_last']:.4f} A_avg={summ['A_avg']:.4f}")
    with open(os.path.join(cfg.out, "ablation.csv"), "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(ABLATION_COLUMNS)
        for s, n, a, b, f, h in rows:
            w.writerow((s, str(n).lower(), _r(a), _r(b), "" if f is None else _r(f), h))
    return rows


def cmd_theory(cfg: ExperimentConfig, weyl_cases=10_000):
    cfg.theory = True
    result, tasks = execute(cfg)
    save_run(result, cfg, cfg.out)
    t0 = time.perf_counter()
    sweep = weyl_sweep(weyl_cases, rng=rng_stream(cfg.train.seed, "init", "weyl"))
    weyl_s = time.perf_counter() - t0
    report = theory_report(result.backbone, result.head_history, tasks)
    counts = report.counts()
    header = [
        f"weyl_sweep cases={sweep.cases} violations={sweep.violations} worst_slack={sweep.worst_slack:.17g} seconds={weyl_s:.3f}",
        f"residual_identity max_relative_error={max_identity_error(report):.17g}",
    ]
    header += [f"{name} records={c['records']} hold={c['hold']} excluded={c['excluded']}" for name, c in sorted(counts.items())]
    with open(os.path.join(cfg.out, "theory.txt"), "w") as fh:
        fh.write(report.to_text(header))
    for line in header:
        print(line)
    for r in report.violations():
        print("VIOLATION", r.line())
    return report, sweep


# gradcheck ----------------------------------------------------------------


def _case_ok(obj, params, margin=1e-3):
    """Reject draws near a spectral degeneracy or a Huber breakpoint."""
    br, _, cur = obj.evaluate(params, grad=False)
    strategy = obj.config.strategy
    if strategy in ("none", "feature_last", "feature_all"):
        return True
    prev = obj.prev
    R, _ = relation_batch(cur.z, obj.config.phi, prev.layers)
    if strategy == "b_eigen":
        R, Rp = R.mean(axis=0)[None], prev.R.mean(axis=0)[None]
    else:
        Rp = prev.R
    sv_c, _, _ = singular_values_batch(R)
    sv_p, _, _ = singular_values_batch(Rp)
    if np.min(-np.diff(sv_c, axis=1)) < margin or np.min(-np.diff(sv_p, axis=1)) < margin:
        return False
    if np.min(np.abs(np.concatenate([sv_c, -sv_c], axis=1))) < margin:
        return False  # |sv| has a kink at zero
    delta = (Rp - R) if strategy == "p2p" else (sv_p - sv_c)
    return bool(np.min(np.abs(np.abs(delta) - 1.0)) > margin)


def gradcheck_case(seed, i, strategy, normalize, lam, phi="inner"):
    """A small random backbone with two tasks, one of them trained, and a batch."""
    rng = rng_stream(seed, "init", "gradcheck", i)
    while True:
        cfg = BackboneConfig(input_dim=5, width=6, layers=4, rank=2)
        bb = Backbone(cfg, int(rng.integers(2**32)))
        bb.bias = rng.normal(scale=0.3, size=bb.bias.shape)
        bb.add_task_adapter(1, rng)
        bb.adapters[0].B = rng.normal(scale=0.3, size=bb.adapters[0].B.shape)
        bb.add_task_adapter(2, rng)
        bb.add_classes([0, 1, 2])
        bb.trainable_classes = (0, 1, 2)
        X = 0.5 * rng.normal(size=(4, 5))
        y = [0, 1, 2, 1]
        align = AlignmentConfig(strategy=strategy, normalize_features=normalize, phi=phi)
        obj = TaskObjective(bb, X, y, align, lam)
        params = rng.normal(scale=0.1, size=obj.n_params)
        if _case_ok(obj, params):
            return obj, params


def cmd_gradcheck(cfg: ExperimentConfig, n_cases=24, corrupt=False):
    """Compare analytic gradients with central differences on random cases.

    Cases cycle through every strategy variant and every lambda in
    ``GRADCHECK_LAMBDAS`` with the configured similarity, then repeat with
    the other one. ``corrupt`` perturbs one analytic component (a negative
    control). Failing components are re-differenced with a 10x smaller step
    for diagnosis only; the verdict uses the 1e-4 step. Returns
    ``(passed, rows)``.
    """
    seed = cfg.train.seed
    phis = [cfg.train.alignment.phi] + [p for p in PHIS if p != cfg.train.alignment.phi]
    rows, worst, ok = [], 0.0, True
    nv = len(ABLATION_VARIANTS)
    block = nv * len(GRADCHECK_LAMBDAS)
    for i in range(max(n_cases, 20)):
        strategy, norm = ABLATION_VARIANTS[i % nv]
        lam = GRADCHECK_LAMBDAS[(i // nv) % len(GRADCHECK_LAMBDAS)]
        phi = phis[(i // block) % len(phis)]
        obj, params = gradcheck_case(seed, i, strategy, norm, lam, phi)
        analytic = obj.value_and_grad(params)[1].copy()
        if corrupt:
            k = i % len(analytic)
            analytic[k] += 1e-3 * (1.0 + abs(analytic[k]))
        res = check_gradient(obj, params, analytic=analytic)
        worst = max(worst, res.worst_rel_error)
        ok &= res.passed
        rows.append((i, strategy, norm, phi, lam, res))
        status = "ok"
        if not res.passed:
            fine = relative_errors(analytic, central_differences(obj, params, 1e-5))[res.offending]
            status = f"FAIL offending={res.offending} (rel. error at step 1e-5: {np.array2string(fine, precision=2)})"
        print(f"case {i:2d} {strategy:<13} norm={norm!s:<5} phi={phi:<6} lambda={lam:g} worst={res.worst_rel_error:.3e} {status}")
    print(f"worst relative error {worst:.3e}; {'PASS' if ok else 'FAIL'}")
    return ok, rows


def cmd_export(cfg: ExperimentConfig):
    base, tasks = load_data(cfg)
    manifest = export_stream(base, tasks, cfg.out, None if cfg.data else cfg.stream)
    print(f"wrote {len(manifest['tasks'])} task files to {cfg.out}")
    return manifest


# --------------------------------------------------------------------------
# argument parsing


def build_parser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON config file (or a report.json with a config echo)")
    common.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="dotted override, repeatable")
    common.add_argument("--out", help="output directory")
    common.add_argument("--seed", type=int, help="master seed (unsigned 64-bit)")
    p = argparse.ArgumentParser(prog="relcil", description=__doc__)
    sub = p.add_subparsers(dest="command", required=True)
    sub.add_parser("run", parents=[common], help="train over the stream and write report.json, accuracy.csv, drift.csv")
    sub.add_parser("ablate", parents=[common], help="compare alignment strategies on one stream -> ablation.csv")
    sub.add_parser("theory", parents=[common], help="evaluate the forgetting bounds on a trained run -> theory.txt")
    g = sub.add_parser("gradcheck", parents=[common], help="check analytic gradients against central differences")
    g.add_argument("--cases", type=int, default=24)
    g.add_argument("--corrupt-gradient", action="store_true", help=argparse.SUPPRESS)
    sub.add_parser("export", parents=[common], help="write the stream as CSV files plus manifest.json")
    return p


def _fail(kind, message, code):
    print(json.dumps({"error": kind, "message": message}), file=sys.stderr)
    return code


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        if args.seed is not None and not 0 <= args.seed < 2**64:
            raise ConfigError("--seed must be an unsigned 64-bit integer")
        cfg = load_config(args.config, args.set, args.seed, args.out)
        if args.command == "run":
            cmd_run(cfg)
        elif args.command == "ablate":
            cmd_ablate(cfg)
        elif args.command == "theory":
            cmd_theory(cfg)
        elif args.command == "gradcheck":
            ok, _ = cmd_gradcheck(cfg, args.cases, args.corrupt_gradient)
            return 0 if ok else 1
        elif args.command == "export":
            cmd_export(cfg)
    except (ConfigError, ParseError) as exc:
        return _fail("config", str(exc), 2)
    except NumericalError as exc:
        return _fail("numerical", str(exc), 1)
    except OSError as exc:
        return _fail("io", str(exc), 1)
    return 0


if __name__ == "__main__":
    sys.exit(main())
