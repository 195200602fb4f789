"""Command-line entry point: ``relpose <subcommand> ...``.

Exit codes: 0 success, 1 usage error, 2 data error.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from .errors import RelposeError
from .formats import ensure_dir

log = logging.getLogger("relpose")

GRAD_TOLERANCE = 1e-4


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(message)


def default_seed() -> int:
    env = os.environ.get("RELPOSE_SEED")
    if env is None or env == "":
        return 0
    try:
        return int(env)
    except ValueError:
        raise UsageError(f"RELPOSE_SEED must be an integer, got {env!r}") from None


def parse_grid(text: str) -> tuple[int, int]:
    try:
        r, c = (int(v) for v in text.lower().split("x"))
    except ValueError:
        raise argparse.ArgumentTypeError(f"grid must look like 8x8, got {text!r}") from None
    if r < 1 or c < 1:
        raise argparse.ArgumentTypeError("grid dims must be positive")
    return r, c


def _read_json(path) -> dict:
    from .errors import FormatError
    try:
        return json.loads(Path(path).read_text())
    except (OSError, ValueError) as exc:
        raise FormatError(f"cannot read {path}: {exc}") from None


def _write_json(path, obj) -> None:
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


# ---------------------------------------------------------------------------


def cmd_synth_gen(args) -> int:
    from .synth import SynthConfig, build_pairs, generate_scene, retrieval_lists, write_scene

    base = _read_json(args.config) if args.config else {}
    cfg = SynthConfig.from_dict({**base, "seed": args.seed if args.seed is not None else base.get("seed", default_seed())})
    if args.grid:
        cfg = SynthConfig.from_dict({**cfg.to_dict(), "grid_h": args.grid[0], "grid_w": args.grid[1]})
    if args.views is not None:
        cfg = SynthConfig.from_dict({**cfg.to_dict(), "n_views": args.views})
    if args.queries >= cfg.n_views:
        raise UsageError("--queries must be smaller than the number of views")
    views, _ = generate_scene(cfg)
    out = ensure_dir(args.out)
    pairs = build_pairs(views, top_k=args.pairs_per_view)
    write_scene(out, views, pairs, cfg)
    if args.queries:
        db, queries = views[:-args.queries], views[-args.queries:]
        write_scene(out, db, [], cfg, name="db.json")
        write_scene(out, queries, [], cfg, name="queries.json")
        _write_json(out / "retrieval.json", retrieval_lists(queries, db, args.retrieval_n))
    print(f"wrote {len(views)} views and {len(pairs)} pairs to {out}")
    return 0


def _model_for(args, rows: int, cols: int, descriptor_dim: int, seed: int):
    from .model import RelPoseModel
    if getattr(args, "ckpt", None):
        return RelPoseModel.load(args.ckpt)
    return RelPoseModel.init(rows, cols, seed=seed, descriptor_dim=descriptor_dim)


def cmd_train(args) -> int:
    from .errors import DataError
    from .synth import read_scene
    from .trainer import TrainConfig, train, write_log

    seed = args.seed if args.seed is not None else default_seed()
    base = _read_json(args.config) if args.config else {}
    overrides = {"learning_rate": args.lr, "batch_size": args.batch_size, "epochs": args.epochs}
    cfg = TrainConfig.from_dict({**base, **{k: v for k, v in overrides.items() if v is not None}, "seed": seed})
    _, pairs = read_scene(args.pairs)
    if not pairs:
        raise DataError(f"{args.pairs} lists no pairs")
    g = pairs[0].query.features
    model = _model_for(args, g.cells_h, g.cells_w, g.descriptor_dim, seed)
    res = train(pairs, model, cfg,
                lambda e, rows: log.info("epoch %d total %.6f", e, float(np.mean([r["total"] for r in rows]))))
    out = ensure_dir(args.out)
    model.save(out)
    _write_json(out / "train_config.json", cfg.to_dict())
    write_log(args.log or out / "train_log.csv", res.log)
    print(f"trained {len(res.log)} steps; checkpoint in {out}")
    return 0


def _options(args, seed: int):
    from .localize import MatchOptions
    return MatchOptions(matcher=args.matcher, weight_threshold=args.threshold, ratio=args.ratio,
                        inlier_px=args.inlier_px, seed=seed)


def cmd_eval_pairs(args) -> int:
    from .localize import evaluate_pairs, write_metrics_csv
    from .synth import read_scene

    seed = args.seed if args.seed is not None else default_seed()
    _, pairs = read_scene(args.pairs)
    model = None
    if args.matcher == "network" and pairs:
        g = pairs[0].query.features
        model = _model_for(args, g.cells_h, g.cells_w, g.descriptor_dim, seed)
    summary, rows = evaluate_pairs(pairs, model, _options(args, seed))
    write_metrics_csv(args.out, rows)
    if args.summary:
        _write_json(args.summary, summary.to_dict())
    print(json.dumps(summary.to_dict(), sort_keys=True))
    return 0


def cmd_localize(args) -> int:
    from .errors import DataError, LocalizationFailure
    from .localize import localize, pose_refinement
    from .synth import read_retrieval, read_scene

    seed = args.seed if args.seed is not None else default_seed()
    db_views, _ = read_scene(args.db)
    query_views = read_scene(args.queries)[0] if args.queries else db_views
    retrieval = read_retrieval(args.retrieval)
    by_id = {v.id: v for v in query_views}
    ids = [args.query] if args.query else sorted(retrieval)
    db = {v.id: v for v in db_views}
    g = db_views[0].features
    model = None if args.matcher == "argmax" else _model_for(args, g.cells_h, g.cells_w, g.descriptor_dim, seed)
    options = _options(args, seed)
    results = []
    for qid in ids:
        if qid not in by_id:
            raise DataError(f"unknown query {qid}")
        if qid not in retrieval:
            raise DataError(f"no retrieval list for {qid}")
        missing = [r for r in retrieval[qid] if r not in db]
        if missing:
            raise DataError(f"retrieval list of {qid} names unknown views {missing}")
        q = by_id[qid]
        try:
            res = localize(q, db, retrieval[qid], model, options)
            if args.refine:
                res = pose_refinement(res, q.intrinsics, args.merge_dist, options)
            entry = res.to_dict(include_timing=args.timing)
        except LocalizationFailure as exc:
            entry = {"query_id": qid, "pose": None, "error": str(exc)}
        results.append(entry)
    payload = results[0] if args.query else {"results": results}
    if args.out:
        _write_json(args.out, payload)
    print(json.dumps(payload, sort_keys=True))
    return 0


def cmd_hilbert_dump(args) -> int:
    from .hilbert import build_pseudo_hilbert, locality_score, row_major_map

    rows, cols = args.grid
    hmap = build_pseudo_hilbert(rows, cols)
    hmap.dump_csv(args.out)
    print(f"{rows}x{cols}: locality {locality_score(hmap):.4f} (row-major {locality_score(row_major_map(rows, cols)):.4f})")
    return 0


def cmd_grad_check(args) -> int:
    from .experiments import full_chain_gradcheck

    seed = args.seed if args.seed is not None else default_seed()
    rows, cols = args.grid
    err, n = full_chain_gradcheck(rows, cols, seed=seed, n_probes=args.probes)
    ok = err < GRAD_TOLERANCE
    print(f"max relative error {err:.3e} over {n} probes: {'PASS' if ok else 'FAIL'}")
    return 0 if ok else 2


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="relpose", description="Relative camera pose from feature grids.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", parser_class=_Parser)
    sub.required = True

    s = sub.add_parser("synth-gen", help="generate a synthetic scene")
    s.add_argument("--out", required=True)
    s.add_argument("--config", help="SynthConfig JSON")
    s.add_argument("--grid", type=parse_grid)
    s.add_argument("--views", type=int)
    s.add_argument("--queries", type=int, default=0, help="hold out the last K views as queries")
    s.add_argument("--retrieval-n", type=int, default=16)
    s.add_argument("--pairs-per-view", type=int, default=64)
    s.add_argument("--seed", type=int)
    s.set_defaults(func=cmd_synth_gen)

    def match_flags(sp):
        sp.add_argument("--ckpt")
        sp.add_argument("--matcher", choices=["network", "argmax"], default="network")
        sp.add_argument("--threshold", type=float, default=0.5)
        sp.add_argument("--ratio", type=float, default=0.7)
        sp.add_argument("--inlier-px", type=float, default=8.0)
        sp.add_argument("--seed", type=int)

    t = sub.add_parser("train", help="train the matcher and keypoint head")
    t.add_argument("--pairs", required=True, help="scene manifest with pairs")
    t.add_argument("--out", required=True, help="checkpoint directory")
    t.add_argument("--config", help="TrainConfig JSON")
    t.add_argument("--ckpt", help="start from this checkpoint")
    t.add_argument("--epochs", type=int)
    t.add_argument("--lr", type=float)
    t.add_argument("--batch-size", type=int)
    t.add_argument("--log", help="loss log CSV (default: <out>/train_log.csv)")
    t.add_argument("--seed", type=int)
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval-pairs", help="per-pair inlier ratio and pose errors")
    e.add_argument("--pairs", required=True)
    e.add_argument("--out", required=True, help="metrics CSV")
    e.add_argument("--summary", help="summary JSON")
    match_flags(e)
    e.set_defaults(func=cmd_eval_pairs)

    lo = sub.add_parser("localize", help="localize queries against a database")
    lo.add_argument("--query", help="query view id (default: every query in the retrieval file)")
    lo.add_argument("--db", required=True, help="database manifest")
    lo.add_argument("--queries", help="manifest holding the query views (default: the database)")
    lo.add_argument("--retrieval", required=True)
    lo.add_argument("--refine", action="store_true")
    lo.add_argument("--merge-dist", type=float, default=1.0)
    lo.add_argument("--timing", action="store_true", help="include per-query timing in the output")
    lo.add_argument("--out")
    match_flags(lo)
    lo.set_defaults(func=cmd_localize)

    h = sub.add_parser("hilbert-dump", help="write the pseudo-Hilbert curve as CSV")
    h.add_argument("--grid", type=parse_grid, required=True)
    h.add_argument("--out", required=True)
    h.set_defaults(func=cmd_hilbert_dump)

    g = sub.add_parser("grad-check", help="finite-difference check of the full chain")
    g.add_argument("--grid", type=parse_grid, default=(4, 4))
    g.add_argument("--probes", type=int, default=200)
    g.add_argument("--seed", type=int)
    g.set_defaults(func=cmd_grad_check)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(levelname)s %(name)s: %(message)s")
        return args.func(args)
    except UsageError as exc:
        print(f"relpose: error: {exc}", file=sys.stderr)
        return 1
    except RelposeError as exc:
        print(f"relpose: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2
    except OSError as exc:
        print(f"relpose: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
