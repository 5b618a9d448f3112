"""Command line front end: synth-gen, detect, refine, estimate, eval.

Exit codes: 0 success, 2 configuration or dataset error, 3 internal failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
import time
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np

from .camera import project_points
from .dataset import Dataset, dump_json, load_dataset, read_ground_truth, read_pose, to_uint8, write_pgm, write_pose, write_ppm
from .detector import detect
from .errors import DatasetError, InvalidCount, PoseError, ReportError
from .features import build_pyramid
from .metrics import EvalRecord, diameter, evaluate_pose, records_to_csv, summarize
from .pipeline import Estimator, EstimatorConfig
from .pose import Pose
from .refiner import cascade_refine
from .synth import SynthConfig, make_dataset

log = logging.getLogger("cascade_pose")

EXIT_OK, EXIT_CONFIG, EXIT_INTERNAL = 0, 2, 3


class ConfigError(Exception):
    pass


# ---------------------------------------------------------------------------
# shared helpers


def _load(path, with_gt: bool = True) -> Dataset:
    return load_dataset(path, with_gt=with_gt)


def _config(args) -> EstimatorConfig:
    d = {}
    if getattr(args, "config", None):
        p = Path(args.config)
        if not p.is_file():
            raise ConfigError(f"config file not found: {p}")
        d = json.loads(p.read_text())
    for flag, key in (("num_init", "num_init"), ("stages", "n_stages"), ("anneal_w", "anneal_w"),
                      ("anneal_v", "anneal_v"), ("sweeps", "sweeps")):
        v = getattr(args, flag, None)
        if v is not None:
            d[key] = v
    if getattr(args, "bins", None):
        try:
            d["bins"] = [int(b) for b in args.bins.split(",")]
        except ValueError as exc:
            raise ConfigError(f"--bins expects comma separated integers, got {args.bins!r}") from exc
    try:
        cfg = EstimatorConfig.from_dict(d)
        cfg.stages()
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"bad configuration: {exc}") from exc
    if cfg.num_init < 1:
        raise ConfigError("--num-init must be at least 1")
    return cfg


def _estimator(ds: Dataset, shots, cfg: EstimatorConfig) -> Estimator:
    n = len(ds.supports)
    if shots is not None and not 1 <= shots <= n:
        raise ConfigError(f"--shots {shots} exceeds the {n} support views available")
    return Estimator.with_shots(ds.supports, shots, cfg)


def _target(ds: Dataset, tid: str):
    for t in ds.targets:
        if t.id == tid:
            return t
    raise DatasetError(f"no target {tid!r} in {ds.root}")


def _threads(arg) -> int:
    n = arg if arg is not None else int(os.environ.get("CAS_THREADS", "1") or 1)
    return max(1, int(n))


def _points(ds: Dataset) -> np.ndarray:
    if ds.model_points is None:
        raise DatasetError(f"{ds.root}: evaluation needs the model point file")
    return ds.model_points


# ---------------------------------------------------------------------------
# estimation and evaluation as library calls


def run_estimate(ds: Dataset, cfg: EstimatorConfig = EstimatorConfig(), shots=None, threads: int = 1):
    """Estimate every target; returns (estimates, records, summary) sorted by target id."""
    est = _estimator(ds, shots, cfg)
    targets = sorted(ds.targets, key=lambda t: t.id)
    if threads > 1 and len(targets) > 1:
        # the first target fills the shared support caches before the pool starts
        first = est.estimate(targets[0].image, targets[0].K, targets[0].id)
        with ThreadPoolExecutor(threads) as pool:
            rest = list(pool.map(lambda t: est.estimate(t.image, t.K, t.id), targets[1:]))
        results = [first] + rest
    else:
        results = [est.estimate(t.image, t.K, t.id) for t in targets]
    records = []
    if ds.model_points is not None and all(t.gt is not None for t in targets):
        records = evaluate_estimates(ds, results)
    summary = summary_of(ds, results, records)
    return results, records, summary


def evaluate_estimates(ds: Dataset, estimates) -> list:
    pts = _points(ds)
    d = float(ds.meta.get("diameter", ds.supports.diameter))
    gts = {t.id: t for t in ds.targets}
    out = []
    for e in estimates:
        t = gts[e.target_id]
        out.append(_record(pts, t.K, e.pose, t.gt, d, ds.supports.symmetric, ds.meta, t.id))
    return out


def _record(pts, K, pose, gt, d, symmetric, meta, tid) -> EvalRecord:
    obj = str(meta.get("object_id", meta.get("seed", "object")))
    if pose is None:
        inf = float("inf")
        return EvalRecord(obj, tid, inf, inf, inf, False, False, 180.0, inf)
    return evaluate_pose(pts, K, pose, gt, d, symmetric, obj, tid)


def summary_of(ds: Dataset, estimates, records) -> dict:
    s = {
        "targets": len(estimates),
        "failed": sum(e.status != "ok" for e in estimates),
        "supports": len(ds.supports),
    }
    if records:
        s.update(summarize(records, float(ds.meta.get("diameter", ds.supports.diameter)), ds.supports.symmetric))
        s["recovery_5deg_5pct"] = float(np.mean([r.rot_err_deg < 5.0 and r.trans_err < 0.05 for r in records]))
    return s


def write_reports(out: Path, estimates, records, summary, trace: bool = True) -> None:
    """Per-target pose files plus report.json / report.csv; contents exclude timing."""
    out.mkdir(parents=True, exist_ok=True)
    (out / "poses").mkdir(exist_ok=True)
    for e in estimates:
        if e.pose is not None:
            write_pose(out / "poses" / f"{e.target_id}.pose.json", e.pose)
    report = {
        "summary": summary,
        "targets": [e.to_dict(trace) for e in estimates],
        "records": [r.to_dict() for r in records],
    }
    (out / "report.json").write_text(json.dumps(_clean(report), indent=1, sort_keys=True) + "\n")
    (out / "report.csv").write_text(records_to_csv(records))


def _clean(x):
    """JSON-safe copy: non-finite floats become null."""
    if isinstance(x, dict):
        return {k: _clean(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_clean(v) for v in x]
    if isinstance(x, (float, np.floating)):
        return float(x) if np.isfinite(x) else None
    if isinstance(x, np.integer):
        return int(x)
    if isinstance(x, np.bool_):
        return bool(x)
    return x


# ---------------------------------------------------------------------------
# overlays

_BOX_EDGES = ((0, 1), (0, 2), (0, 4), (1, 3), (1, 5), (2, 3), (2, 6), (3, 7), (4, 5), (4, 6), (5, 7), (6, 7))


def box_corners(pts) -> np.ndarray:
    lo, hi = np.min(pts, axis=0), np.max(pts, axis=0)
    return np.array([[(hi if i & 4 else lo)[0], (hi if i & 2 else lo)[1], (hi if i & 1 else lo)[2]] for i in range(8)])


def draw_box(img: np.ndarray, K, pose: Pose, corners: np.ndarray, channel: int) -> None:
    """Draw the projected box edges into ``img[..., channel]`` (uint8, in place)."""
    uv, ok = project_points(K, pose.transform_points(corners))
    h, w = img.shape[:2]
    for a, b in _BOX_EDGES:
        if not (ok[a] and ok[b]):
            continue
        n = int(np.ceil(np.abs(uv[b] - uv[a]).max())) + 1
        s = np.linspace(0.0, 1.0, n)[:, None]
        p = np.rint(uv[a] + s * (uv[b] - uv[a])).astype(int)
        keep = (p[:, 0] >= 0) & (p[:, 0] < w) & (p[:, 1] >= 0) & (p[:, 1] < h)
        img[p[keep, 1], p[keep, 0], channel] = 255


def write_overlays(out: Path, ds: Dataset, estimates) -> None:
    corners = box_corners(_points(ds))
    (out / "overlays").mkdir(parents=True, exist_ok=True)
    targets = {t.id: t for t in ds.targets}
    for e in estimates:
        t = targets[e.target_id]
        img = to_uint8(t.image).copy()
        if img.ndim == 2:
            img = np.repeat(img[..., None], 3, axis=2)
        if t.gt is not None:
            draw_box(img, t.K, t.gt, corners, 1)  # ground truth in green
        if e.pose is not None:
            draw_box(img, t.K, e.pose, corners, 2)  # estimate in blue
        write_ppm(out / "overlays" / f"{e.target_id}.ppm", img)


# ---------------------------------------------------------------------------
# subcommands


def cmd_synth_gen(args) -> int:
    cfg = SynthConfig(symmetry=args.symmetry)
    if args.supports < 3:
        raise ConfigError(f"--supports must be at least 3, got {args.supports}")
    make_dataset(args.seed, args.supports, args.targets, cfg, root=args.out)
    print(json.dumps({"dataset": str(args.out), "supports": args.supports, "targets": args.targets}))
    return EXIT_OK


def cmd_detect(args) -> int:
    cfg = _config(args)
    ds = _load(args.dataset, with_gt=False)
    est = _estimator(ds, args.shots, cfg)
    t = _target(ds, args.target)
    det = detect(build_pyramid(t.image, cfg.features), est.supports, cfg.detector, cfg.features)
    if args.heatmap:
        write_pgm(args.heatmap, np.clip(det.heatmap, 0.0, 1.0))
    _emit(args.output, {"target": t.id, **det.to_dict()})
    return EXIT_OK


def cmd_refine(args) -> int:
    cfg = _config(args)
    ds = _load(args.dataset, with_gt=False)
    est = _estimator(ds, args.shots, cfg)
    t = _target(ds, args.target)
    if args.init:
        hyps = [read_pose(p) for p in args.init]
    else:
        hyps = est.initial_only(t.image, t.K)
    pyr = build_pyramid(t.image, cfg.features)
    res = cascade_refine(pyr, t.K, est.supports, hyps, est.stages, cfg.features, cfg.refine)
    _emit(args.output, {"target": t.id, **res.to_dict()})
    return EXIT_OK


def cmd_estimate(args) -> int:
    cfg = _config(args)
    ds = _load(args.dataset)
    shots = args.shots
    t0 = time.perf_counter()
    estimates, records, summary = run_estimate(ds, cfg, shots, _threads(args.threads))
    out = Path(args.out)
    write_reports(out, estimates, records, summary, trace=not args.no_trace)
    dump_json(out / "config.json", _clean(cfg.to_dict()))
    dump_json(out / "timing.json", {"seconds": time.perf_counter() - t0,
                                    "per_target": {e.target_id: e.seconds for e in estimates}})
    if args.overlay:
        write_overlays(out, ds, estimates)
    print(json.dumps(_clean(summary), sort_keys=True))
    return EXIT_OK


def load_predictions(path) -> dict:
    """Predicted poses by target id from a report.json, an estimate output dir or a pose-file dir."""
    p = Path(path)
    if p.is_dir() and (p / "poses").is_dir():
        p = p / "poses"
    if p.is_dir():
        return {f.name[: -len(".pose.json")]: read_pose(f) for f in sorted(p.glob("*.pose.json"))}
    if p.is_file():
        data = json.loads(p.read_text())
        rows = data["targets"] if isinstance(data, dict) else data
        return {r["target"]: (Pose.from_dict(r["pose"]) if r.get("pose") else None) for r in rows}
    raise DatasetError(f"predictions not found: {p}")


def cmd_eval(args) -> int:
    preds = load_predictions(args.predictions)
    gts, meta = read_ground_truth(args.dataset)
    missing = sorted(set(gts) - set(preds))
    extra = sorted(set(preds) - set(gts))
    if missing or extra:
        raise ReportError(f"prediction ids do not match the dataset: missing {missing}, unknown {extra}")
    from .camera import Intrinsics

    K = Intrinsics.from_dict(meta["intrinsics"])
    pts = meta["points"]
    d = float(meta.get("diameter") or diameter(pts))
    sym = bool(meta.get("symmetric", False))
    records = [_record(pts, K, preds[tid], gts[tid], d, sym, meta, tid) for tid in sorted(gts)]
    summary = summarize(records, d, sym)
    summary["recovery_5deg_5pct"] = float(np.mean([r.rot_err_deg < 5.0 and r.trans_err < 0.05 for r in records]))
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        report = {"summary": summary, "records": [r.to_dict() for r in records]}
        (out / "eval.json").write_text(json.dumps(_clean(report), indent=1, sort_keys=True) + "\n")
        (out / "eval.csv").write_text(records_to_csv(records))
    print(json.dumps(_clean(summary), sort_keys=True))
    return EXIT_OK


def _emit(path, obj) -> None:
    text = json.dumps(_clean(obj), indent=1, sort_keys=True)
    if path:
        Path(path).write_text(text + "\n")
    else:
        print(text)


# ---------------------------------------------------------------------------


def _add_search_flags(p) -> None:
    p.add_argument("--config", help="JSON file with EstimatorConfig fields (nested configs as objects)")
    p.add_argument("--shots", "--fps", dest="shots", type=int, help="keep N supports by farthest point sampling")
    p.add_argument("--num-init", type=int, help="number of initial hypotheses K (default 3)")
    p.add_argument("--stages", type=int, help="cascade stages (default 3)")
    p.add_argument("--bins", help="comma separated bins per stage (default 16,8,4)")
    p.add_argument("--anneal-w", type=float, help="range annealing factor (default 0.5)")
    p.add_argument("--anneal-v", type=float, help="bin interval annealing factor (default 0.5)")
    p.add_argument("--sweeps", type=int, help="coordinate search passes per stage (default 2)")


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="cascade-pose", description=__doc__.splitlines()[0])
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth-gen", help="render a synthetic dataset")
    p.add_argument("out", type=Path)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--supports", type=int, default=32)
    p.add_argument("--targets", type=int, default=100)
    p.add_argument("--symmetry", type=float, default=0.0, help="0 generic, towards 1 half-turn symmetric")
    p.set_defaults(func=cmd_synth_gen)

    p = sub.add_parser("detect", help="detect the object in one target image")
    p.add_argument("dataset", type=Path)
    p.add_argument("--target", required=True)
    p.add_argument("--heatmap", type=Path, help="write the correlation heatmap as PGM")
    p.add_argument("-o", "--output", type=Path)
    _add_search_flags(p)
    p.set_defaults(func=cmd_detect)

    p = sub.add_parser("refine", help="run the cascade on one target and print the trace")
    p.add_argument("dataset", type=Path)
    p.add_argument("--target", required=True)
    p.add_argument("--init", nargs="*", type=Path, help="initial pose JSON files (default: detect + top-K)")
    p.add_argument("-o", "--output", type=Path)
    _add_search_flags(p)
    p.set_defaults(func=cmd_refine)

    p = sub.add_parser("estimate", help="estimate every target and write reports")
    p.add_argument("dataset", type=Path)
    p.add_argument("-o", "--out", type=Path, required=True)
    p.add_argument("--threads", type=int, help="worker threads (default $CAS_THREADS or 1)")
    p.add_argument("--overlay", action="store_true", help="write overlay PPMs (GT green, estimate blue)")
    p.add_argument("--no-trace", action="store_true", help="omit per-stage traces from report.json")
    _add_search_flags(p)
    p.set_defaults(func=cmd_estimate)

    p = sub.add_parser("eval", help="score stored predictions against dataset ground truth")
    p.add_argument("predictions", type=Path, help="estimate output dir, report.json or dir of pose files")
    p.add_argument("dataset", type=Path)
    p.add_argument("-o", "--out", type=Path)
    p.set_defaults(func=cmd_eval)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except (ConfigError, DatasetError, ReportError, InvalidCount, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except PoseError as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_INTERNAL
    except Exception as exc:  # noqa: BLE001 - stable exit code for anything unexpected
        log.exception("internal failure")
        print(f"internal error: {exc}", file=sys.stderr)
        return EXIT_INTERNAL


if __name__ == "__main__":
    sys.exit(main())
