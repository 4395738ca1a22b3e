"""Command-line entry points: synth, fit, relocalize, eval, render, sweep.

Exit codes: 0 success, 1 I/O or data error, 2 usage error.
"""

from __future__ import annotations

import argparse
import csv
import io as _stdio
import itertools
import json
import logging
import multiprocessing
import sys
import time
from dataclasses import asdict, dataclass, fields, replace
from pathlib import Path

import numpy as np

from . import io
from .core import CameraIntrinsics, Pose, format_pose_line, parse_pose_line, read_poses, write_poses
from .featurizer import FeatureMap, encode_coarse
from .localizer import DEFAULT_THRESHOLDS, LocalizerConfig, PnPConfig, evaluate, relocalize
from .mapfit import FitConfig, FitView, distill_features, fit
from .matcher import MatchConfig
from .retrieval import RetrievalConfig
from .splat import SceneMap, render
from .synth import SynthConfig, exclude_near, make_synthetic

log = logging.getLogger("splatreloc")

SECTIONS = {
    "synth": SynthConfig,
    "retrieval": RetrievalConfig,
    "match": MatchConfig,
    "pnp": PnPConfig,
    "localizer": None,
    "fit": FitConfig,
}
LOCALIZER_KEYS = ("n_refine",)


class UsageError(Exception):
    """Bad flag values detected after parsing (exit code 2)."""


# --- configuration ------------------------------------------------------------


@dataclass
class Settings:
    synth: SynthConfig
    localizer: LocalizerConfig
    fit: FitConfig


def _section_keys(name: str) -> tuple[str, ...]:
    cls = SECTIONS[name]
    return LOCALIZER_KEYS if cls is None else tuple(f.name for f in fields(cls))


def _coerce(cls, values: dict) -> dict:
    # JSON lists become tuples where the dataclass default is a tuple
    out = dict(values)
    for f in fields(cls):
        if f.name in out and isinstance(out[f.name], list):
            out[f.name] = tuple(out[f.name])
    return out


def parse_override(text: str) -> tuple[str, str, object]:
    """``section.key=value``; the value is JSON, falling back to a bare string."""
    if "=" not in text or "." not in text.split("=", 1)[0]:
        raise UsageError(f"override {text!r} is not of the form section.key=value")
    path, raw = text.split("=", 1)
    section, key = path.split(".", 1)
    if section not in SECTIONS:
        raise UsageError(f"unknown config section {section!r}")
    if key not in _section_keys(section):
        raise UsageError(f"unknown key {key!r} in section {section!r}")
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    return section, key, value


def load_settings(config_path: str | None, overrides: list[str], seed: int | None) -> Settings:
    doc: dict = {}
    if config_path is not None:
        with open(config_path, encoding="utf-8") as fh:
            try:
                doc = json.load(fh)
            except json.JSONDecodeError as exc:
                raise ValueError(f"{config_path}: invalid JSON ({exc})") from exc
        if not isinstance(doc, dict):
            raise ValueError(f"{config_path}: top level must be an object")
        for section, body in doc.items():
            if section not in SECTIONS or not isinstance(body, dict):
                raise ValueError(f"{config_path}: unknown or malformed section {section!r}")
            bad = set(body) - set(_section_keys(section))
            if bad:
                raise ValueError(f"{config_path}: unknown keys {sorted(bad)} in section {section!r}")
    merged = {k: dict(doc.get(k, {})) for k in SECTIONS}
    for text in overrides:
        section, key, value = parse_override(text)
        merged[section][key] = value
    if seed is not None:
        for section in ("synth", "retrieval", "pnp"):
            merged[section]["seed"] = seed
    try:
        loc = LocalizerConfig(
            retrieval=RetrievalConfig(**_coerce(RetrievalConfig, merged["retrieval"])),
            match=MatchConfig(**_coerce(MatchConfig, merged["match"])),
            pnp=PnPConfig(**_coerce(PnPConfig, merged["pnp"])),
            **merged["localizer"],
        )
        return Settings(
            SynthConfig(**_coerce(SynthConfig, merged["synth"])), loc, FitConfig(**_coerce(FitConfig, merged["fit"]))
        )
    except TypeError as exc:
        raise ValueError(f"invalid configuration: {exc}") from exc


def settings_to_json(s: Settings) -> str:
    loc = s.localizer
    doc = {
        "synth": asdict(s.synth),
        "retrieval": asdict(loc.retrieval),
        "match": asdict(loc.match),
        "pnp": asdict(loc.pnp),
        "localizer": {"n_refine": loc.n_refine},
        "fit": asdict(s.fit),
    }
    return json.dumps(doc, indent=2, sort_keys=True) + "\n"


# --- small file formats ---------------------------------------------------------


def write_intrinsics(path, K: CameraIntrinsics) -> None:
    with open(path, "w") as fh:
        fh.write(" ".join(repr(float(v)) for v in (K.fx, K.fy, K.cx, K.cy)) + f" {K.width} {K.height}\n")


def read_intrinsics(path) -> CameraIntrinsics:
    with open(path) as fh:
        parts = fh.read().split()
    if len(parts) != 6:
        raise ValueError(f"{path}: intrinsics need 6 fields (fx fy cx cy width height)")
    fx, fy, cx, cy = (float(v) for v in parts[:4])
    return CameraIntrinsics(fx, fy, cx, cy, int(parts[4]), int(parts[5]))


def query_images(query_dir: Path) -> list[tuple[str, Path]]:
    """(id, path) pairs sorted by id; images live in ``queries/`` or the directory itself."""
    sub = query_dir / "queries"
    root = sub if sub.is_dir() else query_dir
    if not root.is_dir():
        raise FileNotFoundError(f"query directory not found: {query_dir}")
    items = sorted((p.stem, p) for p in root.iterdir() if p.suffix in (".ppm", ".pgm"))
    if not items:
        raise ValueError(f"no query images in {root}")
    return items


def read_estimates(path) -> dict[str, tuple[Pose, str]]:
    out = {}
    with open(path) as fh:
        for line in fh:
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            qid, pose, extra = parse_pose_line(line)
            out[qid] = (pose, extra[0] if extra else "ok")
    return out


# --- relocalization worker ------------------------------------------------------

_WORKER: dict = {}


def _init_worker(map_path: str, cfg: LocalizerConfig, K: CameraIntrinsics | None, excl) -> None:
    _WORKER.update(scene=io.load_map(map_path), cfg=cfg, K=K, exclude=excl, cache={})


def _pose_list(p: Pose) -> list[float]:
    return [float(v) for v in (*p.rotation, *p.translation)]


def _relocalize_one(job: tuple[str, str, Pose | None]) -> tuple[str, Pose, str, str, dict]:
    qid, image_path, gt = job
    scene: SceneMap = _WORKER["scene"]
    excl = _WORKER["exclude"]
    if excl is not None and gt is not None:
        scene = exclude_near(scene, gt, *excl)
    image = io.read_image(image_path)
    buf = _stdio.StringIO()
    trace = relocalize(image, scene, _WORKER["cfg"], _WORKER["K"], buf)
    rec = {
        "query": qid,
        "status": trace.status,
        "retrieval_stage": trace.retrieval.stage,
        "retrieval_id": trace.retrieval.candidate_id,
        "retrieval_inliers": trace.retrieval.inliers,
        "coarse_inliers": trace.retrieval.coarse_inliers,
        "iterations": [
            {"matches": r.matches, "inliers": r.inliers, "degenerate": r.degenerate}
            for r in ([trace.initial] if trace.initial else []) + trace.refinements
        ],
        "initial_pose": _pose_list(trace.initial.pose) if trace.initial else None,
        "final_pose": _pose_list(trace.final_pose),
        "timings": trace.timings,
    }
    lines = "".join(json.dumps({"query": qid, **json.loads(l)}) + "\n" for l in buf.getvalue().splitlines())
    lines += json.dumps(rec) + "\n"
    return qid, trace.final_pose, trace.status, lines, rec


def run_relocalization(
    map_path: str,
    jobs_in: list[tuple[str, str, Pose | None]],
    cfg: LocalizerConfig,
    K: CameraIntrinsics | None,
    jobs: int = 1,
    exclude: tuple[float, float] | None = None,
):
    """Relocalize every query; results come back sorted by query id."""
    jobs_in = sorted(jobs_in, key=lambda j: j[0])
    if jobs <= 1 or len(jobs_in) <= 1:
        _init_worker(map_path, cfg, K, exclude)
        results = []
        for job in jobs_in:
            results.append(_relocalize_one(job))
            log.info("%s %s", job[0], results[-1][2])
        return results
    ctx = multiprocessing.get_context("fork" if "fork" in multiprocessing.get_all_start_methods() else "spawn")
    with ctx.Pool(jobs, initializer=_init_worker, initargs=(map_path, cfg, K, exclude)) as pool:
        results = pool.map(_relocalize_one, jobs_in, chunksize=1)
    return sorted(results, key=lambda r: r[0])


# --- commands -------------------------------------------------------------------


def cmd_synth(args, s: Settings) -> int:
    cfg = s.synth
    if args.gaussians is not None:
        cfg = replace(cfg, n_gaussians=args.gaussians)
    if args.database is not None:
        cfg = replace(cfg, n_database=args.database)
    if args.queries is not None:
        cfg = replace(cfg, n_queries=args.queries)
    if cfg.n_gaussians <= 0:
        raise UsageError("--gaussians must be positive")
    out = Path(args.out)
    (out / "queries").mkdir(parents=True, exist_ok=True)
    t0 = time.perf_counter()
    data = make_synthetic(cfg)
    io.save_map(data.scene, out / "map.splm")
    write_intrinsics(out / "intrinsics.txt", data.intrinsics)
    write_poses(out / "queries.txt", zip(data.query_ids, data.query_poses))
    write_poses(out / "database.txt", ((e.id, e.pose) for e in data.scene.database))
    for i, qid in enumerate(data.query_ids):
        io.write_image(out / "queries" / f"{qid}.ppm", data.query_image(i))
    with open(out / "config.json", "w") as fh:
        fh.write(settings_to_json(replace(s, synth=cfg)))
    log.info("synth: %d primitives, %d database views, %d queries in %.1fs (feature energy %.3f)",
             len(data.scene), len(data.scene.database), len(data.query_poses), time.perf_counter() - t0,
             data.feature_energy)
    return 0


def cmd_relocalize(args, s: Settings) -> int:
    cfg = s.localizer
    if args.n_refine is not None:
        cfg = replace(cfg, n_refine=args.n_refine)
    qdir = Path(args.queries)
    items = query_images(qdir)
    K = read_intrinsics(qdir / "intrinsics.txt") if (qdir / "intrinsics.txt").exists() else None
    gt = {}
    if args.exclude_near is not None:
        gt = read_poses(qdir / "queries.txt")
    jobs_in = [(qid, str(p), gt.get(qid)) for qid, p in items]
    t0 = time.perf_counter()
    results = run_relocalization(args.map, jobs_in, cfg, K, args.jobs, args.exclude_near)
    with open(args.out, "w") as fh:
        for qid, pose, status, _, _ in results:
            fh.write(format_pose_line(qid, pose, status) + "\n")
    if args.trace:
        with open(args.trace, "w") as fh:
            for r in results:
                fh.write(r[3])
    log.info("relocalized %d queries in %.1fs", len(results), time.perf_counter() - t0)
    return 0


def _thresholds(pairs) -> tuple[tuple[float, float], ...]:
    return tuple((float(m), float(d)) for m, d in pairs) if pairs else DEFAULT_THRESHOLDS


def cmd_eval(args, s: Settings) -> int:
    est = read_estimates(args.estimates)
    gt = read_poses(args.ground_truth)
    missing = sorted(set(gt) - set(est))
    if missing:
        raise ValueError(f"{args.estimates}: no estimate for {len(missing)} queries (first: {missing[0]})")
    report = evaluate([(est[k][0], gt[k]) for k in sorted(gt)], _thresholds(args.threshold))
    sys.stdout.write(report.to_text())
    if args.csv:
        with open(args.csv, "w") as fh:
            fh.write(report.to_csv())
    return 0


def _pose_arg(text: str) -> Pose:
    vals = [float(v) for v in text.replace(",", " ").split()]
    if len(vals) != 7:
        raise UsageError("--pose needs 7 numbers: qw qx qy qz tx ty tz")
    return Pose(vals[:4], vals[4:])


def _feature_pca_image(feat: np.ndarray) -> np.ndarray:
    C, H, W = feat.shape
    X = feat.reshape(C, -1).T
    X = X - X.mean(axis=0)
    _, _, Vt = np.linalg.svd(X, full_matrices=False)
    Y = X @ Vt[:3].T
    if Y.shape[1] < 3:
        Y = np.pad(Y, ((0, 0), (0, 3 - Y.shape[1])))
    lo, hi = Y.min(axis=0), Y.max(axis=0)
    return ((Y - lo) / np.maximum(hi - lo, 1e-12)).reshape(H, W, 3)


def cmd_render(args, s: Settings) -> int:
    scene = io.load_map(args.map)
    if args.pose is not None:
        pose = _pose_arg(args.pose)
    elif args.pose_file is not None:
        poses = read_poses(args.pose_file)
        if args.id not in poses:
            raise ValueError(f"{args.pose_file}: no pose with id {args.id!r}")
        pose = poses[args.id]
    else:
        raise UsageError("one of --pose or --pose-file is required")
    if args.intrinsics is not None:
        K = read_intrinsics(args.intrinsics)
    elif scene.database:
        K = scene.database[0].intrinsics
    else:
        raise ValueError("map has no database entries; pass --intrinsics")
    channels = {"color", "depth"} | ({"feature"} if args.features else set())
    view = render(scene, K, pose, channels=channels)
    prefix = args.out
    io.write_image(f"{prefix}_color.ppm", view.color)
    io.write_depth_pgm16(f"{prefix}_depth.pgm", view.depth, args.depth_scale)
    if args.features:
        io.write_image(f"{prefix}_feature.ppm", _feature_pca_image(view.feature_low))
    return 0


def _read_fit_views(view_dir: Path) -> list[FitView]:
    K = read_intrinsics(view_dir / "intrinsics.txt")
    poses = read_poses(view_dir / "poses.txt")
    views = []
    for vid in sorted(poses):
        image = io.read_image(view_dir / "images" / f"{vid}.ppm")
        fpath = view_dir / "features" / f"{vid}.fmap"
        feats = io.load_feature_map(fpath) if fpath.exists() else encode_coarse(image)
        views.append(FitView(image, feats, poses[vid], K))
    if not views:
        raise ValueError(f"{view_dir}: poses.txt lists no views")
    return views


def cmd_fit(args, s: Settings) -> int:
    cfg = s.fit
    if args.iterations is not None:
        cfg = replace(cfg, iterations=args.iterations)
    scene = io.load_map(args.map)
    views = _read_fit_views(Path(args.views))
    if args.distill:
        scene, energy = distill_features(
            scene, [(v.image, v.pose, v.intrinsics) for v in views], *scene.feature_dims
        )
        log.info("distilled features, kept energy %.3f", energy)
    result = fit(scene, views, cfg, lambda i, l: log.info("iter %d loss %.6f", i, l) if i % 100 == 0 else None)
    io.save_map(result.scene, args.out)
    if args.history:
        with open(args.history, "w") as fh:
            fh.write(result.history_csv())
    return 0


def _grid(specs: list[str]) -> tuple[list[str], list[tuple]]:
    keys, values = [], []
    for spec in specs:
        if "=" not in spec:
            raise UsageError(f"grid entry {spec!r} is not of the form section.key=v1,v2,...")
        path, raw = spec.split("=", 1)
        opts = [parse_override(f"{path}={v}")[2] for v in raw.split(",")]
        keys.append(path)
        values.append(opts)
    return keys, list(itertools.product(*values))


def cmd_sweep(args, s: Settings) -> int:
    keys, combos = _grid(args.grid)
    qdir = Path(args.queries)
    items = query_images(qdir)[: args.limit]
    gt = read_poses(qdir / "queries.txt")
    K = read_intrinsics(qdir / "intrinsics.txt") if (qdir / "intrinsics.txt").exists() else None
    thresholds = _thresholds(args.threshold)
    rows = []
    for combo in combos:
        overrides = [f"{k}={json.dumps(v)}" for k, v in zip(keys, combo)] + list(args.set or [])
        cfg = load_settings(args.config, overrides, args.seed).localizer
        t0 = time.perf_counter()
        results = run_relocalization(
            args.map, [(qid, str(p), gt.get(qid)) for qid, p in items], cfg, K, args.jobs, args.exclude_near
        )
        dt = time.perf_counter() - t0
        report = evaluate([(pose, gt[qid]) for qid, pose, *_ in results], thresholds)
        row = dict(zip(keys, combo))
        row.update({k: v for k, v in report.rows()})
        row["seconds"] = dt
        rows.append(row)
        log.info("%s -> %s", dict(zip(keys, combo)), report.recall)
    with open(args.out, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=list(rows[0]))
        writer.writeheader()
        writer.writerows(rows)
    return 0


# --- parser ---------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="splatreloc", description="Feature-splatting relocalization toolkit.")
    p.add_argument("--config", help="JSON config file with sections " + ", ".join(SECTIONS))
    p.add_argument("--seed", type=int, help="overrides synth, retrieval and pnp seeds")
    p.add_argument("--jobs", type=int, default=1, help="parallel query workers")
    p.add_argument("--verbose", action="store_true")
    p.add_argument("--set", action="append", metavar="SECTION.KEY=VALUE", help="config override (repeatable)")
    sub = p.add_subparsers(dest="command", required=True)

    sp = sub.add_parser("synth", help="generate a synthetic scene, database and query set")
    sp.add_argument("--out", required=True, help="output directory")
    sp.add_argument("--gaussians", type=int)
    sp.add_argument("--database", type=int)
    sp.add_argument("--queries", type=int)
    sp.set_defaults(func=cmd_synth)

    sp = sub.add_parser("fit", help="fit color, opacity, features and decoder to posed views")
    sp.add_argument("map")
    sp.add_argument("views", help="directory with poses.txt, intrinsics.txt, images/, optional features/")
    sp.add_argument("--out", required=True)
    sp.add_argument("--iterations", type=int)
    sp.add_argument("--distill", action="store_true", help="initialize features from the encoder first")
    sp.add_argument("--history", help="loss history CSV")
    sp.set_defaults(func=cmd_fit)

    exclude_help = "drop database views within (METERS, DEGREES) of each query's ground truth"
    sp = sub.add_parser("relocalize", help="estimate query poses")
    sp.add_argument("map")
    sp.add_argument("queries", help="query directory (queries/*.ppm, optional intrinsics.txt)")
    sp.add_argument("--out", required=True, help="estimates file")
    sp.add_argument("--trace", help="JSON-lines trace file")
    sp.add_argument("--n-refine", type=int)
    sp.add_argument("--exclude-near", nargs=2, type=float, metavar=("METERS", "DEGREES"), help=exclude_help)
    sp.set_defaults(func=cmd_relocalize)

    sp = sub.add_parser("eval", help="score estimates against ground truth")
    sp.add_argument("estimates")
    sp.add_argument("ground_truth")
    sp.add_argument("--threshold", nargs=2, action="append", type=float, metavar=("METERS", "DEGREES"))
    sp.add_argument("--csv", help="write metric,value CSV")
    sp.set_defaults(func=cmd_eval)

    sp = sub.add_parser("render", help="render color, depth and optional feature PCA")
    sp.add_argument("map")
    sp.add_argument("--pose", help="'qw qx qy qz tx ty tz'")
    sp.add_argument("--pose-file")
    sp.add_argument("--id")
    sp.add_argument("--intrinsics", help="intrinsics file (default: first database entry)")
    sp.add_argument("--out", required=True, help="output prefix")
    sp.add_argument("--features", action="store_true")
    sp.add_argument("--depth-scale", type=float, default=1000.0, help="depth units per meter")
    sp.set_defaults(func=cmd_render)

    sp = sub.add_parser("sweep", help="recall and runtime over a parameter grid")
    sp.add_argument("map")
    sp.add_argument("queries")
    sp.add_argument("--grid", action="append", required=True, metavar="SECTION.KEY=V1,V2")
    sp.add_argument("--out", required=True, help="CSV output")
    sp.add_argument("--limit", type=int, help="use the first N queries")
    sp.add_argument("--threshold", nargs=2, action="append", type=float, metavar=("METERS", "DEGREES"))
    sp.add_argument("--exclude-near", nargs=2, type=float, metavar=("METERS", "DEGREES"), help=exclude_help)
    sp.set_defaults(func=cmd_sweep)
    return p


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    if args.jobs < 1:
        parser.error("--jobs must be at least 1")
    try:
        settings = load_settings(args.config, args.set or [], args.seed)
        return args.func(args, settings)
    except UsageError as exc:
        parser.error(str(exc))
    except (OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
