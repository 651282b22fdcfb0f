"""curatree command-line interface.

Exit codes: 0 success, 2 validation error, 3 I/O error, 4 internal
invariant violation.  Errors are reported as one ``key=value`` line on
standard error.  Every artifact written gets a ``<path>.manifest.json``.
"""

from __future__ import annotations

import argparse
import hashlib
import io
import json
import logging
import sys
import time
from collections import Counter
from pathlib import Path

import numpy as np

from . import __version__
from .batch_stratifier import (
    MODES,
    ObservationLedger,
    batch_quotas,
    cluster_positions,
    ledger_report,
    load_ledger,
    plan_random,
    plan_stratified,
    save_ledger,
)
from .curation_sampler import fraction_to_target, sample_subset, subset_load, subset_save
from .diagnostics import (
    adjusted_rand_index,
    cluster_size_histogram,
    generate_heavy_tailed,
    quota_tv,
    realized_tv,
    tv_curve,
    write_csv,
)
from .embedding_store import load_embeddings, write_embeddings
from .errors import CuratreeError, InvalidParams, InvariantViolation, ValidationError
from .hierarchy import TreeConfig, build_tree, load_tree, save_tree, size_dispersion
from .kmeans_core import SEEDINGS, KMeansConfig

log = logging.getLogger("curatree")

EXIT_OK, EXIT_VALIDATION, EXIT_IO, EXIT_INTERNAL = 0, 2, 3, 4
MANIFEST_SUFFIX = ".manifest.json"


def file_digest(path) -> str:
    h = hashlib.blake2b(digest_size=8)
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def write_manifest(out_path, args, inputs: dict[str, str], started: float) -> None:
    config = {k: v for k, v in sorted(vars(args).items()) if k not in ("func", "verbose")}
    manifest = {
        "command": args.command if args.command != "stats" else f"stats {args.stat}",
        "config": config,
        "inputs": {name: {"path": str(p), "digest": file_digest(p)} for name, p in sorted(inputs.items())},
        "output": {"path": str(out_path), "digest": file_digest(out_path)},
        "seed": getattr(args, "seed", None),
        "version": __version__,
        "wall_time_s": round(time.perf_counter() - started, 6),
    }
    with open(str(out_path) + MANIFEST_SUFFIX, "w", encoding="utf-8") as f:
        json.dump(manifest, f, indent=2, sort_keys=True, default=str)
        f.write("\n")


def _parse_levels(text: str) -> tuple[int, ...]:
    try:
        return tuple(int(p) for p in text.split(","))
    except ValueError:
        raise argparse.ArgumentTypeError(f"levels must be comma-separated integers, got {text!r}") from None


def _parse_fractions(text: str) -> list[float]:
    try:
        return [float(p) for p in text.split(",")]
    except ValueError:
        raise argparse.ArgumentTypeError(f"fractions must be comma-separated numbers, got {text!r}") from None


def _read_labels(path) -> np.ndarray:
    with open(path, encoding="utf-8") as f:
        lines = [ln.strip() for ln in f if ln.strip()]
    try:
        return np.array([int(v) for v in lines], dtype=np.int64)
    except ValueError:
        raise ValidationError(f"{path}: labels must be one integer per line") from None


def _emit_csv(args, header, rows, inputs, started) -> None:
    if args.out:
        with open(args.out, "w", encoding="utf-8", newline="") as f:
            write_csv(f, header, rows)
        write_manifest(args.out, args, inputs, started)
    else:
        buf = io.StringIO()
        write_csv(buf, header, rows)
        sys.stdout.write(buf.getvalue())


# -- commands ---------------------------------------------------------------

def cmd_generate(args, started):
    matrix, labels = generate_heavy_tailed(
        args.points, args.dim, args.components, args.tail_exponent, args.seed
    )
    write_embeddings(args.out, matrix)
    write_manifest(args.out, args, {}, started)
    if args.labels_out:
        with open(args.labels_out, "w", encoding="utf-8") as f:
            f.writelines(f"{int(v)}\n" for v in labels)
        write_manifest(args.labels_out, args, {}, started)
    print(f"rows={matrix.count} dim={matrix.dim} components={args.components}")


def cmd_build_tree(args, started):
    config = TreeConfig(
        args.levels,
        KMeansConfig(k=1, max_iters=args.max_iters, seed=args.seed, seeding=args.seeding),
    )
    config.validate()
    matrix = load_embeddings(args.embeddings, normalize=args.normalize)
    tree = build_tree(matrix, config)
    save_tree(tree, args.out)
    write_manifest(args.out, args, {"embeddings": args.embeddings}, started)
    print(f"rows={tree.count} depth={tree.depth}")
    for row in size_dispersion(tree):
        print(
            f"level={row['level']} clusters={row['clusters']} min_size={row['min']} "
            f"max_size={row['max']} mean_size={row['mean']:.6g} cv={row['cv']:.6g}"
        )


def cmd_sample(args, started):
    tree = load_tree(args.tree)
    subset = sample_subset(
        tree, args.level, size=args.size, fraction=args.fraction, seed=args.seed, exact=args.exact
    )
    subset_save(subset, args.out)
    write_manifest(args.out, args, {"tree": args.tree}, started)
    tv = realized_tv(tree, subset, args.level) if subset.achieved else 0.0
    print(f"target={subset.target} achieved={subset.achieved} level={args.level} tv={tv:.6g}")


def cmd_batches(args, started):
    tree = load_tree(args.tree)
    subset = subset_load(args.subset, count=tree.count)
    subset.validate_against(tree)
    inputs = {"tree": args.tree, "subset": args.subset}
    ledger = None
    if args.resume_ledger:
        ledger = load_ledger(args.resume_ledger, subset, tree, args.seed)
        inputs["resume_ledger"] = args.resume_ledger
    if args.mode == "stratified":
        plan, ledger = plan_stratified(subset, tree, args.batch_size, args.num_batches, args.seed, ledger)
    else:
        if ledger is None:
            ledger = ObservationLedger.fresh(subset, tree, args.seed)
        plan = plan_random(subset, args.batch_size, args.num_batches, args.seed, tree, ledger)
    plan.save(args.out)
    write_manifest(args.out, args, inputs, started)
    if args.ledger_out:
        save_ledger(ledger, args.ledger_out)
        write_manifest(args.ledger_out, args, inputs, started)

    spread = ledger.spread()
    if args.mode == "stratified" and max(spread.values()) > 1:
        raise InvariantViolation(f"observation counts within a cluster differ by more than 1: {spread}")
    clusters = cluster_positions(subset, tree)
    print(f"mode={args.mode} batches={len(plan)} batch_size={args.batch_size} clusters={len(clusters)}")
    if args.mode == "stratified":
        caps = [len(clusters[c]) for c in sorted(clusters)]
        quotas, _ = batch_quotas(args.batch_size, caps, 0)
        shape = ", ".join(f"{q}x{n}" for q, n in sorted(Counter(quotas.tolist()).items(), reverse=True))
        print(f"per_batch_quotas={shape}")
        if plan.deficit_events:
            print(f"deficit_events={len(plan.deficit_events)}")
    report = ledger_report(ledger)
    print(
        f"coverage={report['coverage']:.6g} multiplicity={report['multiplicity']} "
        f"observations={report['observations']}"
    )


def cmd_stats_tv_curve(args, started):
    tree = load_tree(args.tree)
    measure = args.measure_level if args.measure_level is not None else args.sampling_level
    fractions = sorted(set(args.fractions))
    at_sampling = tv_curve(tree, args.sampling_level, args.sampling_level, fractions, args.seed, exact=args.exact)
    at_measure = tv_curve(tree, args.sampling_level, measure, fractions, args.seed, exact=args.exact)
    sizes = tree.level_sizes(args.sampling_level)
    rows = [
        (args.sampling_level, measure, f, n, quota_tv(fraction_to_target(f, tree.count), sizes), tv_s, tv_m)
        for (f, tv_s), (_, tv_m), n in zip(at_sampling.points, at_measure.points, at_sampling.achieved)
    ]
    header = (
        "sampling_level", "measure_level", "fraction", "achieved",
        "tv_quota_sampling_level", "tv_sampling_level", "tv_measure_level",
    )
    _emit_csv(args, header, rows, {"tree": args.tree}, started)


def cmd_stats_ari(args, started):
    a = _read_labels(args.labels_a)
    b = _read_labels(args.labels_b)
    ari = adjusted_rand_index(a, b)
    _emit_csv(args, ("n", "ari"), [(len(a), ari)], {"labels_a": args.labels_a, "labels_b": args.labels_b}, started)


def cmd_stats_sizes(args, started):
    tree = load_tree(args.tree)
    level = args.level if args.level is not None else tree.depth
    rows = cluster_size_histogram(tree, level)
    _emit_csv(args, ("cluster_id", "size", "log10_size"), rows, {"tree": args.tree}, started)


def cmd_stats_labels(args, started):
    tree = load_tree(args.tree)
    labels = tree.row_labels(args.level)
    text = "".join(f"{int(v)}\n" for v in labels)
    if args.out:
        Path(args.out).write_text(text, encoding="utf-8")
        write_manifest(args.out, args, {"tree": args.tree}, started)
    else:
        sys.stdout.write(text)


# -- parser -----------------------------------------------------------------

class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise InvalidParams(message)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="curatree", description="Hierarchical k-means data curation.")
    parser.add_argument("--version", action="version", version=f"curatree {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("generate", help="write a synthetic heavy-tailed embedding file")
    p.add_argument("--points", type=int, required=True)
    p.add_argument("--dim", type=int, default=16)
    p.add_argument("--components", type=int, default=20)
    p.add_argument("--tail-exponent", type=float, default=1.2)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.add_argument("--labels-out", help="also write generating component labels, one per line")
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("build-tree", help="build a hierarchical k-means tree")
    p.add_argument("--embeddings", required=True)
    p.add_argument("--levels", type=_parse_levels, required=True,
                   help="cluster counts bottom-up, e.g. 3500,350,35,7")
    p.add_argument("--normalize", action=argparse.BooleanOptionalAction, default=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--seeding", choices=SEEDINGS, default="plus_plus")
    p.add_argument("--max-iters", type=int, default=50)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_build_tree)

    p = sub.add_parser("sample", help="draw a curated subset")
    p.add_argument("--tree", required=True)
    p.add_argument("--level", type=int, required=True)
    target = p.add_mutually_exclusive_group(required=True)
    target.add_argument("--fraction", type=float)
    target.add_argument("--size", type=int)
    p.add_argument("--exact", action="store_true", help="trim an overshoot down to the target")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_sample)

    p = sub.add_parser("batches", help="plan training batches over a subset")
    p.add_argument("--tree", required=True)
    p.add_argument("--subset", required=True)
    p.add_argument("--batch-size", type=int, required=True)
    p.add_argument("--num-batches", type=int, required=True)
    p.add_argument("--mode", choices=MODES, default="stratified")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.add_argument("--ledger-out")
    p.add_argument("--resume-ledger", help="continue from a ledger checkpoint")
    p.set_defaults(func=cmd_batches)

    p = sub.add_parser("stats", help="diagnostics as CSV")
    stats = p.add_subparsers(dest="stat", required=True, parser_class=_Parser)

    s = stats.add_parser("tv-curve")
    s.add_argument("--tree", required=True)
    s.add_argument("--sampling-level", type=int, required=True)
    s.add_argument("--measure-level", type=int)
    s.add_argument("--fractions", type=_parse_fractions, default=[0.01, 0.05, 0.1, 0.2, 0.5, 1.0])
    s.add_argument("--exact", action="store_true")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out")
    s.set_defaults(func=cmd_stats_tv_curve)

    s = stats.add_parser("ari")
    s.add_argument("--labels-a", required=True)
    s.add_argument("--labels-b", required=True)
    s.add_argument("--out")
    s.set_defaults(func=cmd_stats_ari)

    s = stats.add_parser("sizes")
    s.add_argument("--tree", required=True)
    s.add_argument("--level", type=int)
    s.add_argument("--out")
    s.set_defaults(func=cmd_stats_sizes)

    s = stats.add_parser("labels", help="per-row cluster ids at a level, one per line")
    s.add_argument("--tree", required=True)
    s.add_argument("--level", type=int, required=True)
    s.add_argument("--out")
    s.set_defaults(func=cmd_stats_labels)
    return parser


def _fail(code: str, message: str, status: int) -> int:
    sys.stderr.write(f"error={code} exit={status} message={json.dumps(str(message))}\n")
    return status


def main(argv=None) -> int:
    started = time.perf_counter()
    try:
        args = build_parser().parse_args(argv)
    except CuratreeError as exc:
        return _fail(exc.code, str(exc), EXIT_VALIDATION)
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING,
        format="%(levelname)s %(name)s: %(message)s",
        stream=sys.stderr,
    )
    try:
        args.func(args, started)
    except InvariantViolation as exc:
        return _fail(exc.code, str(exc), EXIT_INTERNAL)
    except CuratreeError as exc:
        return _fail(exc.code, str(exc), EXIT_VALIDATION)
    except FileNotFoundError as exc:
        return _fail("NotFound", f"{exc.filename}: no such file", EXIT_VALIDATION)
    except OSError as exc:
        return _fail("IOError", f"{exc.filename}: {exc.strerror or exc}", EXIT_IO)
    except AssertionError as exc:
        return _fail("InvariantViolation", str(exc), EXIT_INTERNAL)
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
