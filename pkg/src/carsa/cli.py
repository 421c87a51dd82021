"""Command-line entry points.

Subcommands: ``gen`` (synthetic dataset), ``train`` (cross-validated
protocol), ``fnc`` (connectivity export with heatmaps), ``gradcheck``
(derivative verification). Exit codes: 0 success, 1 verification failure,
2 usage or data error, 3 training failure. The CARSA_LOG environment variable
(error | info | debug) sets verbosity.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from dataclasses import asdict
from pathlib import Path

import numpy as np

from . import adcore, connectivity, data, model, report, training

log = logging.getLogger(__name__)

GRADCHECK_TOL = 1e-4


def _setup_logging():
    level_name = os.environ.get("CARSA_LOG", "info").lower()
    levels = {"error": logging.ERROR, "info": logging.INFO, "debug": logging.DEBUG}
    level = levels.get(level_name)
    logging.basicConfig(level=level or logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s")
    if level is None:
        log.warning("unknown CARSA_LOG value %r; using info", level_name)


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="carsa",
        description="Sequence-graph classifier over multivariate time series, "
                    "with attention-derived connectivity export.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen", help="generate a synthetic two-class dataset")
    g.add_argument("--out", required=True, help="output dataset directory")
    g.add_argument("--subjects-per-class", type=int, default=100)
    g.add_argument("--components", type=int, default=20)
    g.add_argument("--important", type=int, default=8,
                   help="components carrying the class-specific coupling")
    g.add_argument("--timesteps", type=int, default=100)
    g.add_argument("--beta", type=float, default=0.35, help="coupling strength")
    g.add_argument("--sigma", type=float, default=1.0, help="innovation noise std")
    g.add_argument("--seed", type=int, default=0)

    t = sub.add_parser("train", help="run the cross-validated training protocol")
    t.add_argument("--data", required=True, help="path to manifest.csv")
    t.add_argument("--out", required=True, help="run directory for artifacts")
    t.add_argument("--seed", type=int, default=0, help="master seed")
    t.add_argument("--folds", type=int, default=4)
    t.add_argument("--trials", type=int, default=10, help="seeded trials per fold")
    t.add_argument("--epochs", type=int, default=30)
    t.add_argument("--lr", type=float, default=1e-3)
    t.add_argument("--batch-size", type=int, default=16)
    t.add_argument("--clip-norm", type=float, default=5.0)
    t.add_argument("--hidden", type=int, default=64, help="LSTM hidden size per direction")
    t.add_argument("--attn-dim", type=int, default=64)
    t.add_argument("--pool-layers", type=int, default=3)
    t.add_argument("--pool-keep", type=float, default=0.8)
    t.add_argument("--fc-hidden", type=int, default=64)
    t.add_argument("--parallel-trials", type=int, default=1,
                   help="run this many trials concurrently (separate processes)")

    f = sub.add_parser("fnc", help="export connectivity matrices and heatmaps")
    f.add_argument("--data", required=True, help="path to manifest.csv")
    f.add_argument("--checkpoint", help="trained checkpoint (.npz); required unless --pearson")
    f.add_argument("--out", required=True,
                   help="output CSV path (heatmap PNG written alongside), or a directory")
    who = f.add_mutually_exclusive_group()
    who.add_argument("--group", action="store_true", default=True,
                     help="average over subjects (default)")
    who.add_argument("--subject", help="single subject id instead of a group mean")
    f.add_argument("--label", type=int, choices=(0, 1),
                   help="restrict the group to one class")
    f.add_argument("--pearson", action="store_true",
                   help="classical correlation FNC instead of attention")
    f.add_argument("--blocks", metavar="DOMAINS_CSV",
                   help="also write per-domain block means using this domain map")

    c = sub.add_parser("gradcheck", help="verify gradients against finite differences")
    c.add_argument("--ops", nargs="*", metavar="OP",
                   help="restrict to these checks; 'model' is the end-to-end check")
    c.add_argument("--points", type=int, default=10, help="random points per check")
    c.add_argument("--seed", type=int, default=0)
    return parser


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------


def cmd_gen(args) -> int:
    try:
        spec = data.SyntheticSpec(
            n_subjects=args.subjects_per_class, m=args.components,
            m_imp=args.important, T=args.timesteps, beta=args.beta,
            sigma=args.sigma, seed=args.seed,
        )
        dataset, gtruth = data.gen_synthetic(spec)
        data.write_dataset(dataset, args.out, ground_truth=gtruth)
    except (data.SyntheticSpecError, data.DatasetError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    log.info("wrote %d subjects (%d x %d) to %s", len(dataset.samples),
             dataset.m, dataset.T, args.out)
    return 0


def cmd_train(args) -> int:
    try:
        dataset = data.load_dataset(args.data)
        plan = data.make_folds(dataset, args.seed, n_folds=args.folds,
                               n_trials=args.trials)
        mcfg = model.ModelConfig(hidden=args.hidden, attn_dim=args.attn_dim,
                                 pool_layers=args.pool_layers,
                                 pool_keep=args.pool_keep, fc_hidden=args.fc_hidden)
        tcfg = training.TrainConfig(epochs=args.epochs, lr=args.lr,
                                    batch_size=args.batch_size,
                                    clip_norm=args.clip_norm,
                                    master_seed=args.seed, trials=args.trials)
        model.pool_schedule(dataset.m, mcfg)
    except (data.DatasetError, model.ConfigError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    snapshot = {
        "data": str(args.data), "master_seed": args.seed, "folds": args.folds,
        "trials": args.trials, "parallel_trials": args.parallel_trials,
        "subjects": len(dataset.samples), "m": dataset.m, "T": dataset.T,
        "model": asdict(mcfg), "train": asdict(tcfg),
    }
    (out / "config.snapshot").write_text(json.dumps(snapshot, indent=2) + "\n")
    with open(out / "folds.csv", "w") as fh:
        fh.write("subject_id,fold\n")
        for s in dataset.samples:
            fh.write(f"{s.subject_id},{plan.assignment[s.subject_id]}\n")

    reports, failures = training.run_protocol(dataset, plan, mcfg, tcfg, out,
                                              parallel=args.parallel_trials)
    if reports:
        report.save_summary_figure(reports, out / "summary.png")
    if failures:
        for f, s, msg in failures:
            print(f"training failed: fold {f} seed {s}: {msg}", file=sys.stderr)
        return 3
    agg = training.summarize(reports)
    log.info("done: %d trials, mean accuracy %.3f, mean auc %.3f",
             agg["trials"], agg["accuracy_mean"], agg["auc_mean"])
    return 0


def _fnc_matrices(args, dataset, params, mcfg) -> list[connectivity.FncMatrix]:
    samples = dataset.samples
    if args.label is not None:
        samples = [s for s in samples if s.label == args.label]
        if not samples:
            raise data.DatasetError(f"no subjects with label {args.label}")
    if args.subject is not None:
        try:
            samples = [dataset.subject(args.subject)]
        except KeyError:
            raise data.DatasetError(f"unknown subject id {args.subject!r}") from None
    if args.pearson:
        return [connectivity.pearson_fnc(s) for s in samples]
    Xs = [data.zscore(s.X) for s in samples]
    labels = [s.label for s in samples]
    if args.subject is not None or len(set(labels)) < 2:
        return [connectivity.FncMatrix(a, "attention", s.subject_id)
                for s, a in zip(samples, _attentions_only(params, mcfg, Xs))]
    # group over mixed labels: keep only subjects the model classifies
    # correctly, matching how training selects its attention average
    ev = training.evaluate(params, mcfg, Xs, labels)
    keep = ev.predictions == np.asarray(labels)
    if not keep.any():
        log.warning("no correctly classified subjects; using all %d", len(samples))
        keep = np.ones(len(samples), dtype=bool)
    else:
        log.info("averaging over %d/%d correctly classified subjects",
                 int(keep.sum()), len(samples))
    return [connectivity.FncMatrix(a, "attention", s.subject_id)
            for s, a, ok in zip(samples, ev.attentions, keep) if ok]


def _attentions_only(params, mcfg, Xs) -> list[np.ndarray]:
    res = model.build_batch(Xs, params, mcfg)
    return [sub.attention.value.copy() for sub in res.subjects]


def cmd_fnc(args) -> int:
    try:
        dataset = data.load_dataset(args.data)
        params = mcfg = None
        if not args.pearson:
            if not args.checkpoint:
                raise data.DatasetError("--checkpoint is required unless --pearson")
            if not Path(args.checkpoint).exists():
                raise data.DatasetError(f"checkpoint not found: {args.checkpoint}")
            params, mcfg = model.load_checkpoint(args.checkpoint)
            meta = model.checkpoint_meta(args.checkpoint)
            if "m" in meta and meta["m"] != dataset.m:
                raise data.DatasetError(
                    f"checkpoint was trained on m={meta['m']} components, "
                    f"dataset has m={dataset.m}"
                )
        matrices = _fnc_matrices(args, dataset, params, mcfg)
        domain_map = None
        if args.blocks:
            domain_map = data.load_domain_map(args.blocks)
    except (data.DatasetError, model.ConfigError, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2

    out = Path(args.out)
    if out.suffix == ".csv":
        out.parent.mkdir(parents=True, exist_ok=True)
        csv_path, png_path = out, out.with_suffix(".png")
        blocks_path = out.with_name(out.stem + "_blocks.csv")
    else:
        out.mkdir(parents=True, exist_ok=True)
        csv_path, png_path = out / "fnc.csv", out / "fnc.png"
        blocks_path = out / "blocks.csv"
    if args.subject is not None:
        fnc = matrices[0]
    else:
        tag = "group" if args.label is None else f"group_label{args.label}"
        fnc = connectivity.group_average(matrices, tag=tag)
    connectivity.write_fnc_csv(fnc, csv_path)
    edges = None
    if dataset.domain_map is not None:
        imp = dataset.domain_map.important_ids()
        edges = [len(imp)] if imp and len(imp) < dataset.m else None
    report.save_fnc_heatmap(fnc, png_path, domain_edges=edges)
    if domain_map is not None:
        try:
            summary = connectivity.block_stats(fnc, domain_map)
        except connectivity.DomainMapError as exc:
            print(f"error: {exc}", file=sys.stderr)
            return 2
        connectivity.write_block_csv(summary, blocks_path)
    log.info("wrote %s FNC (%s) for m=%d to %s", fnc.kind, fnc.tag, fnc.m, csv_path)
    return 0


def cmd_gradcheck(args) -> int:
    known = set(adcore.OP_CHECK_NAMES)
    ops = args.ops
    run_model = ops is None or "model" in ops
    op_names = None if ops is None else [o for o in ops if o != "model"]
    if op_names:
        unknown = sorted(set(op_names) - known)
        if unknown:
            print(f"error: unknown ops {unknown}; known: {sorted(known | {'model'})}",
                  file=sys.stderr)
            return 2

    results: dict[str, float] = {}
    if op_names is None or op_names:
        results.update(adcore.standard_op_checks(op_names, n_points=args.points,
                                                 seed=args.seed))
    if run_model:
        results["model"] = model.model_gradcheck(n_points=args.points, seed=args.seed)

    worst = 0.0
    for name in sorted(results):
        err = results[name]
        worst = max(worst, err)
        status = "ok" if err <= GRADCHECK_TOL else "FAIL"
        print(f"{name:12s} {err:12.3e}  {status}")
    print(f"{'worst':12s} {worst:12.3e}  tolerance {GRADCHECK_TOL:g}")
    bad = sorted(n for n, e in results.items() if e > GRADCHECK_TOL)
    if bad:
        print(f"exceeded tolerance: {', '.join(bad)}", file=sys.stderr)
        return 1
    return 0


def main(argv=None) -> int:
    _setup_logging()
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:  # argparse exits 2 on usage errors, 0 on --help
        return int(exc.code or 0)
    handlers = {"gen": cmd_gen, "train": cmd_train, "fnc": cmd_fnc,
                "gradcheck": cmd_gradcheck}
    return handlers[args.command](args)


def entry():
    sys.exit(main())


if __name__ == "__main__":
    entry()
