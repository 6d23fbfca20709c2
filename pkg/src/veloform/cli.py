"""Command-line entry point: ``veloform <subcommand> ...``.

Exit codes: 0 success, 1 usage or input error, 2 numerical failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import __version__
from .checkpoint import CheckpointError
from .errors import ConfigError, GeometryError, NumericalError, VeloformError
from .geometry import (
    CorrespondencePair,
    PointCloud,
    chamfer_distance,
    hausdorff_distance,
    pointwise_rmse,
    surface_area,
    surface_area_std,
)
from .io import file_digest, read_cloud, read_matches, read_obj, read_ply, write_json, write_matches, write_obj, write_ply

log = logging.getLogger("veloform")

EXIT_OK, EXIT_USAGE, EXIT_NUMERIC = 0, 1, 2
MANIFEST_NAME = "manifest.json"


class UsageError(VeloformError):
    pass


class _Parser(argparse.ArgumentParser):
    def __init__(self, *args, **kwargs):
        kwargs.setdefault("allow_abbrev", False)  # `--v` must not match `--version`
        super().__init__(*args, **kwargs)

    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


@dataclass
class RunManifest:
    command: str
    config: dict
    inputs: dict = field(default_factory=dict)
    version: str = __version__
    seed: int | None = None
    timings: dict = field(default_factory=dict)

    def write(self, out_dir) -> Path:
        path = Path(out_dir) / MANIFEST_NAME
        write_json(path, asdict(self))
        return path


def _digests(paths) -> dict:
    return {str(p): file_digest(p) for p in paths}


def _vec(text: str) -> tuple:
    try:
        vals = tuple(float(v) for v in text.split(","))
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}")
    if len(vals) != 3:
        raise argparse.ArgumentTypeError(f"expected 3 components, got {len(vals)}")
    return vals


def _floats(text: str) -> list[float]:
    try:
        return [float(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}")


def apply_thread_cap() -> int | None:
    raw = os.environ.get("VELOFORM_THREADS")
    if not raw:
        return None
    try:
        n = int(raw)
    except ValueError:
        raise UsageError(f"VELOFORM_THREADS must be a positive integer, got {raw!r}")
    if n < 1:
        raise UsageError(f"VELOFORM_THREADS must be a positive integer, got {raw!r}")
    import torch

    torch.set_num_threads(n)
    try:
        torch.set_num_interop_threads(n)
    except RuntimeError:
        pass  # already fixed for this process
    return n


# --------------------------------------------------------------------------
# gen-data
# --------------------------------------------------------------------------

SCENE_FLAGS = {
    "translation": {"v": "v", "radius": "r"},
    "rotation": {"omega": "omega", "radius": "radius"},
    "scaling": {"k": "k", "radius": "r"},
    "bending": {"amplitude": "amplitude", "radius": "r"},
}


def scene_from_spec(name: str, params: dict):
    from .synthdata import SCENES

    if name not in SCENES:
        raise UsageError(f"unknown scene {name!r}; choose from {sorted(SCENES)}")
    try:
        return SCENES[name](**params)
    except TypeError as exc:
        raise UsageError(f"bad parameters for scene {name!r}: {exc}")


def _scene_params(args) -> dict:
    flags = SCENE_FLAGS.get(args.scene, {})
    params = {}
    for flag in ("v", "omega", "k", "amplitude", "radius"):
        val = getattr(args, flag)
        if val is None:
            continue
        if flag not in flags:
            raise UsageError(f"--{flag} does not apply to scene {args.scene!r}")
        params[flags[flag]] = val
    return params


def cmd_gen_data(args) -> int:
    from .synthdata import make_pair

    scene = scene_from_spec(args.scene, _scene_params(args))
    if args.matches > args.points:
        raise UsageError(f"--matches ({args.matches}) exceeds --points ({args.points})")
    t0 = time.perf_counter()
    pair = make_pair(scene, args.points, args.matches, args.noise, args.drop, args.seed)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    files = [out / "source.ply", out / "target.ply", out / "matches.txt"]
    write_ply(files[0], pair.source)
    write_ply(files[1], pair.target)
    write_matches(files[2], pair.matches)
    write_json(out / "scene.json", scene.descriptor)
    RunManifest(
        "gen-data",
        {"scene": scene.descriptor, "points": args.points, "matches": args.matches,
         "noise": args.noise, "drop": args.drop},
        _digests(files),
        seed=args.seed,
        timings={"total_s": time.perf_counter() - t0},
    ).write(out)
    print(f"wrote {', '.join(f.name for f in files)} to {out}")
    return EXIT_OK


# --------------------------------------------------------------------------
# train
# --------------------------------------------------------------------------


def load_config_file(path) -> dict:
    text = Path(path).read_text()
    if str(path).endswith((".yaml", ".yml")):
        import yaml

        data = yaml.safe_load(text) or {}
    else:
        data = json.loads(text)
    if not isinstance(data, dict):
        raise ConfigError(f"{path}: config must be a mapping")
    return data


def _overrides(items) -> dict:
    import yaml

    out = {}
    for item in items or []:
        if "=" not in item:
            raise UsageError(f"--set expects key=value, got {item!r}")
        key, val = item.split("=", 1)
        out[key.strip()] = yaml.safe_load(val)
    return out


def _load_pairs(args) -> tuple[list[CorrespondencePair], bool, list[Path]]:
    if args.data:
        d = Path(args.data)
        src, tgt = d / "source.ply", d / "target.ply"
        match_file = d / "matches.txt"
        inputs = [src, tgt]
        matches = np.zeros((0, 2), dtype=np.int64)
        if match_file.exists():
            matches = read_matches(match_file)
            inputs.append(match_file)
        pair = CorrespondencePair(
            read_ply(src, 0), read_ply(tgt, 1), matches, unsupervised=len(matches) == 0
        )
        return [pair], False, inputs
    if not args.frames or len(args.frames) < 2:
        raise UsageError("train needs --data DIR or at least two --frames")
    clouds = [read_cloud(p, frame_id=k) for k, p in enumerate(args.frames)]
    inputs = [Path(p) for p in args.frames]
    match_files = args.matches or []
    if match_files and len(match_files) != len(clouds) - 1:
        raise UsageError(f"--matches needs {len(clouds) - 1} files (one per consecutive pair)")
    pairs = []
    for k in range(len(clouds) - 1):
        m = np.zeros((0, 2), dtype=np.int64)
        if match_files:
            m = read_matches(match_files[k])
            inputs.append(Path(match_files[k]))
        pairs.append(CorrespondencePair(clouds[k], clouds[k + 1], m, unsupervised=len(m) == 0))
    return pairs, True, inputs


def cmd_train(args) -> int:
    from .report import plot_losses, write_csv
    from .training import CHECKPOINT_NAME, LOG_NAME, PairDataset, TrainConfig, train

    raw = load_config_file(args.config) if args.config else {}
    raw.update(_overrides(args.set))
    config = TrainConfig.from_dict(raw)
    pairs, sequence, inputs = _load_pairs(args)
    if config.weights.lambda_m > 0:
        missing = [k for k, p in enumerate(pairs) if len(p.matches) == 0]
        if missing:
            raise UsageError(
                f"pairs {missing} have no correspondence file but lambda_m > 0; "
                "supply matches or --set lambda_m=0"
            )
    dataset = PairDataset.from_pairs(pairs, sequence=sequence)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    t0 = time.perf_counter()
    every = max(1, args.log_every)

    def progress(state, rec):
        if state.step % every == 0:
            log.info("step %d pair %d total %.6g", state.step, rec["pair_id"], rec["total"])

    state = train(dataset, config, out, resume=args.resume, callback=progress)
    elapsed = time.perf_counter() - t0
    records = [json.loads(line) for line in (out / LOG_NAME).read_text().splitlines() if line]
    cols = ["step", "pair_id", "L_i", "L_m", "L_s", "L_v", "L_st", "L_d", "L_n", "L_recon", "total"]
    write_csv(out / "losses.csv", records, cols)
    if records:
        plot_losses(records, out / "losses.png")
    RunManifest(
        "train",
        {**config.to_dict(), "resume": bool(args.resume), "sequence": sequence},
        _digests(inputs),
        seed=config.seed,
        timings={"train_s": elapsed, "steps": state.step},
    ).write(out)
    print(f"trained {state.step} steps; checkpoint {out / CHECKPOINT_NAME}")
    return EXIT_OK


# --------------------------------------------------------------------------
# interpolate
# --------------------------------------------------------------------------


def _grid(args):
    from .inference import TimeGrid

    if args.t and args.frames:
        raise UsageError("give either --t or --frames, not both")
    if args.t:
        return TimeGrid(tuple(args.t), extrapolate=args.extrapolate)
    n = args.frames or 11
    if n < 1:
        raise UsageError("--frames must be positive")
    return TimeGrid.uniform(n, extrapolate=args.extrapolate)


def cmd_interpolate(args) -> int:
    from .inference import TimeGrid, interpolate_sequence, upsample_external_points
    from .training import load_state

    grid = _grid(args)
    state = load_state(args.checkpoint)
    state.pair_code(args.pair)  # validates the id early
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    t0 = time.perf_counter()
    inputs = [Path(args.checkpoint)]

    mesh_times = [t for t in grid if 0.0 <= t <= 1.0]
    frames = []
    meshes = {}
    if mesh_times and not args.no_meshes:
        sub_grid = TimeGrid(tuple(mesh_times))
        meshes = dict(zip(mesh_times, interpolate_sequence(state, args.pair, sub_grid, args.resolution)))

    if args.external_cloud:
        origin = read_cloud(args.external_cloud)
        inputs.append(Path(args.external_cloud))
    else:
        origin = PointCloud(state.transform.inverse(state.sources[args.pair].astype(np.float64)))
    clouds = upsample_external_points(state, args.pair, origin, grid, args.t_start)
    write_ply(out / "origin.ply", PointCloud(origin.points))

    for i, (t, cloud) in enumerate(zip(grid, clouds)):
        entry = {"index": i, "t": t, "cloud": f"frame_{i:04d}.ply"}
        write_ply(out / entry["cloud"], PointCloud(cloud.points))
        if t in meshes:
            entry["mesh"] = f"frame_{i:04d}.obj"
            entry["area"] = surface_area(meshes[t])
            write_obj(out / entry["mesh"], meshes[t])
        frames.append(entry)

    areas = [f["area"] for f in frames if "area" in f]
    sidecar = {
        "pair_id": args.pair,
        "grid": list(grid),
        "t_start": args.t_start,
        "resolution": args.resolution,
        "external_cloud": bool(args.external_cloud),
        "frames": frames,
        "summary": {
            "mesh_count": len(areas),
            "mean_area": float(np.mean(areas)) if areas else None,
            "area_std": surface_area_std(areas) if len(areas) > 1 else None,
        },
    }
    write_json(out / "interpolation.json", sidecar)
    RunManifest(
        "interpolate",
        {"pair": args.pair, "grid": list(grid), "resolution": args.resolution,
         "extrapolate": args.extrapolate, "t_start": args.t_start},
        _digests(inputs),
        seed=state.config.seed,
        timings={"total_s": time.perf_counter() - t0},
    ).write(out)
    print(f"wrote {len(frames)} frames ({len(areas)} meshes) to {out}")
    return EXIT_OK


# --------------------------------------------------------------------------
# evaluate
# --------------------------------------------------------------------------


def _frame_files(directory: Path, suffix: str) -> list[Path]:
    return sorted(directory.glob(f"frame_*{suffix}"))


def _sidecar_times(pred: Path, n: int) -> list[float]:
    side = pred / "interpolation.json"
    if side.exists():
        data = json.loads(side.read_text())
        times = [f["t"] for f in data["frames"] if "mesh" in f]
        if len(times) == n:
            return times
    return list(np.linspace(0.0, 1.0, n)) if n > 1 else [0.0]


def evaluate_frames(pred_meshes, gt_meshes, times, samples: int, seed: int = 0) -> list[dict]:
    if len(pred_meshes) != len(gt_meshes):
        raise UsageError(f"frame-count mismatch: {len(pred_meshes)} predicted vs {len(gt_meshes)} ground truth")
    rows = []
    for k, (t, p, g) in enumerate(zip(times, pred_meshes, gt_meshes)):
        # same seed on both sides: identical meshes give identical samples
        a = p.sample_points(samples, seed + k)
        b = g.sample_points(samples, seed + k)
        rows.append({
            "index": k, "t": float(t),
            "cd": chamfer_distance(a, b), "hd": hausdorff_distance(a, b),
            "area": surface_area(p), "gt_area": surface_area(g),
        })
    return rows


def cmd_evaluate(args) -> int:
    from .report import plot_area, plot_distances, write_csv
    from .synthdata import analytic_intermediate

    pred = Path(args.pred)
    mesh_files = _frame_files(pred, ".obj")
    if not mesh_files:
        raise UsageError(f"no frame_*.obj files in {pred}")
    preds = [read_obj(f) for f in mesh_files]
    times = _sidecar_times(pred, len(preds))
    inputs = list(mesh_files)
    scene = None
    if args.gt:
        gt_dir = Path(args.gt)
        gt_files = _frame_files(gt_dir, ".obj")
        gts = [read_obj(f) for f in gt_files]
        inputs += gt_files
    elif args.scene:
        params = json.loads(args.scene_params) if args.scene_params else {}
        if args.scene.endswith(".json"):
            spec = json.loads(Path(args.scene).read_text())
            name = spec.pop("scene")
            params = {**spec, **params}
        else:
            name = args.scene
        scene = scene_from_spec(name, params)
        gts = [analytic_intermediate(scene, t, args.resolution) for t in times]
    else:
        raise UsageError("evaluate needs --gt DIR or --scene NAME")
    t0 = time.perf_counter()
    rows = evaluate_frames(preds, gts, times, args.samples, args.seed)

    report = {
        "frames": len(rows),
        "cd_mean": float(np.mean([r["cd"] for r in rows])),
        "hd_mean": float(np.mean([r["hd"] for r in rows])),
        "cd_max": float(np.max([r["cd"] for r in rows])),
        "hd_max": float(np.max([r["hd"] for r in rows])),
        "sa_sigma": surface_area_std([r["area"] for r in rows]),
        "sa_mean": float(np.mean([r["area"] for r in rows])),
    }
    report["sa_sigma_rel"] = report["sa_sigma"] / report["sa_mean"] if report["sa_mean"] > 0 else None

    # P-RMSE needs index-aligned ground truth
    prmse = _aligned_prmse(pred, args, scene)
    if prmse is not None:
        for row, val in zip(rows, prmse):
            row["prmse"] = val
        report["p_rmse"] = float(np.max(prmse))
        report["p_rmse_per_frame"] = prmse
    report["per_frame"] = rows

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_json(out / "report.json", report)
    write_csv(out / "metrics.csv", rows, ["index", "t", "cd", "hd", "area", "gt_area", "prmse"])
    plot_area([r["t"] for r in rows], [r["area"] for r in rows], out / "area.png",
              [r["gt_area"] for r in rows])
    plot_distances([r["t"] for r in rows], [r["cd"] for r in rows], [r["hd"] for r in rows],
                   out / "distances.png")
    RunManifest(
        "evaluate",
        {"pred": str(pred), "gt": args.gt, "scene": args.scene, "samples": args.samples,
         "resolution": args.resolution},
        _digests(inputs),
        seed=args.seed,
        timings={"total_s": time.perf_counter() - t0},
    ).write(out)
    print(json.dumps({k: v for k, v in report.items() if k not in ("per_frame", "p_rmse_per_frame")}, indent=1))
    return EXIT_OK


def _aligned_prmse(pred: Path, args, scene) -> list[float] | None:
    side = pred / "interpolation.json"
    if not side.exists():
        return None
    meta = json.loads(side.read_text())
    mesh_frames = [f for f in meta["frames"] if "mesh" in f]
    if args.gt:
        gt_dir = Path(args.gt)
        pairs = [(pred / f["cloud"], gt_dir / f["cloud"]) for f in mesh_frames]
        if not pairs or not all(g.exists() for _, g in pairs):
            return None
        out = []
        for p, g in pairs:
            a, b = read_ply(p).points, read_ply(g).points
            if a.shape != b.shape:
                return None
            out.append(pointwise_rmse(a, b))
        return out
    if scene is None or not (pred / "origin.ply").exists():
        return None
    origin = read_ply(pred / "origin.ply").points
    return [
        pointwise_rmse(read_ply(pred / f["cloud"]).points, scene.flow(origin, meta["t_start"], f["t"]))
        for f in mesh_frames
    ]


# --------------------------------------------------------------------------
# check-grads
# --------------------------------------------------------------------------


def cmd_check_grads(args) -> int:
    from .gradcheck import run_check_grads

    t0 = time.perf_counter()
    inputs = []
    if args.checkpoint:
        from .training import load_state

        state = load_state(args.checkpoint)
        code = state.pair_code(args.pair)
        report = run_check_grads(state.phi, state.velocity, code, args.probes, args.loss_probes, args.seed)
        inputs.append(Path(args.checkpoint))
    else:
        report = run_check_grads(probes=args.probes, loss_probes=args.loss_probes, seed=args.seed)
    elapsed = time.perf_counter() - t0
    for r in report.results:
        status = "PASS" if r.passed else "FAIL"
        print(f"{status}\t{r.name}\t{r.max_rel_error:.3e}\t(tol {r.tolerance:.0e})")
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        write_json(out / "gradcheck.json", {**report.to_dict(), "elapsed_s": elapsed})
        RunManifest(
            "check-grads",
            {"checkpoint": args.checkpoint, "probes": args.probes, "loss_probes": args.loss_probes},
            _digests(inputs),
            seed=args.seed,
            timings={"total_s": elapsed},
        ).write(out)
    if not report.passed:
        print(f"failed: {', '.join(report.failures)}", file=sys.stderr)
        return EXIT_NUMERIC
    return EXIT_OK


# --------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="veloform", description="Interpolate between point-cloud shapes with a learned implicit field and velocity field.")
    p.add_argument("--version", action="version", version=f"veloform {__version__}")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    g = sub.add_parser("gen-data", help="write a synthetic point-cloud pair")
    g.add_argument("--scene", required=True)
    g.add_argument("--v", type=_vec, help="translation velocity x,y,z")
    g.add_argument("--omega", type=_vec, help="rotation axis-angle rate x,y,z")
    g.add_argument("--k", type=float, help="scaling rate")
    g.add_argument("--amplitude", type=float, help="bending amplitude")
    g.add_argument("--radius", type=float)
    g.add_argument("--points", type=int, default=5000)
    g.add_argument("--matches", type=int, default=500)
    g.add_argument("--noise", type=float, default=0.0)
    g.add_argument("--drop", type=float, default=0.0)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--out", required=True)
    g.set_defaults(func=cmd_gen_data)

    t = sub.add_parser("train", help="fit the implicit and velocity fields")
    t.add_argument("--config", help="YAML or JSON file of TrainConfig keys")
    t.add_argument("--set", action="append", metavar="KEY=VALUE", help="override a config key")
    t.add_argument("--data", help="directory written by gen-data")
    t.add_argument("--frames", nargs="+", help="ordered cloud files of a sequence")
    t.add_argument("--matches", nargs="+", help="match files for consecutive frame pairs")
    t.add_argument("--resume", action="store_true")
    t.add_argument("--log-every", type=int, default=100)
    t.add_argument("--out", required=True)
    t.set_defaults(func=cmd_train)

    i = sub.add_parser("interpolate", help="extract meshes and advected clouds")
    i.add_argument("--checkpoint", required=True)
    i.add_argument("--pair", type=int, default=0)
    i.add_argument("--t", type=_floats, help="comma-separated time stamps")
    i.add_argument("--frames", type=int, help="uniform grid of N stamps on [0, 1]")
    i.add_argument("--extrapolate", action="store_true", help="allow stamps outside [0, 1]")
    i.add_argument("--external-cloud", help="cloud to advect instead of the training source")
    i.add_argument("--t-start", type=float, default=0.0, help="time at which the advected cloud is observed")
    i.add_argument("--resolution", type=int, default=128)
    i.add_argument("--no-meshes", action="store_true")
    i.add_argument("--out", required=True)
    i.set_defaults(func=cmd_interpolate)

    e = sub.add_parser("evaluate", help="CD, HD, SA sigma and P-RMSE of predicted frames")
    e.add_argument("--pred", required=True, help="directory written by interpolate")
    e.add_argument("--gt", help="directory of ground-truth frame_*.obj (and optional .ply)")
    e.add_argument("--scene", help="analytic scene name or scene.json from gen-data")
    e.add_argument("--scene-params", help="JSON object of scene parameters")
    e.add_argument("--resolution", type=int, default=128, help="ground-truth extraction resolution")
    e.add_argument("--samples", type=int, default=20000)
    e.add_argument("--seed", type=int, default=0)
    e.add_argument("--out", required=True)
    e.set_defaults(func=cmd_evaluate)

    c = sub.add_parser("check-grads", help="finite-difference derivative checks")
    c.add_argument("--checkpoint")
    c.add_argument("--pair", type=int, default=0)
    c.add_argument("--probes", type=int, default=100)
    c.add_argument("--loss-probes", type=int, default=100)
    c.add_argument("--seed", type=int, default=0)
    c.add_argument("--out")
    c.set_defaults(func=cmd_check_grads)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING,
        format="%(levelname)s %(name)s: %(message)s",
    )
    try:
        apply_thread_cap()
        return args.func(args)
    except NumericalError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (UsageError, ConfigError, GeometryError, CheckpointError, FileNotFoundError, KeyError) as exc:
        msg = exc.args[0] if isinstance(exc, KeyError) and exc.args else exc
        print(f"error: {msg}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
