"""Command-line entry point: generate, train, render, eval, inspect.

Every command reads an optional JSON config (``--config``) and applies flag
overrides on top; flags win.  Exit codes: 0 success, 2 config error, 3 data
error, 4 numeric abort.
"""
from __future__ import annotations

import argparse
import json
import os
import shutil
import sys
import tempfile
from dataclasses import asdict, dataclass, field, fields

import numpy as np

from .calib import CameraRig, load_calib, save_calib, write_json_atomic
from .geom import Pose
from .imageio import heatmap, write_pfm, write_png
from .metrics import evaluate
from .optim import MomentState, NumericalAbort, TrainConfig, TrainState, train, write_history
from .raster import render_ideal, render_stitched
from .scene import GaussianScene, SceneFormatError, load_scene, save_scene
from .synth import generate_dataset, load_dataset, make_toy_scene, save_dataset

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4


class ConfigError(ValueError):
    pass


class DataError(RuntimeError):
    pass


_TRAIN_KEYS = {f.name for f in fields(TrainConfig)} - {"seed"}


@dataclass
class RunConfig:
    """Everything a command needs.  Training keys live flat beside the rest."""

    dataset: str | None = None
    out: str | None = None
    seed: int = 0
    workers: int | None = None
    # generate
    scene_kind: str = "room"
    n_splats: int = 500
    size_scale: float = 1.0
    n_views: int = 50
    width: int = 256
    height: int = 128
    fisheye_side: int | None = None
    fov: float = 185.0
    lens_deg: float = 0.5
    max_gap_cm: float = 2.0
    gap_cm: list | None = None  # [fx, fy, fz, bx, by, bz]; overrides random sampling
    tilt: float = 0.3
    yaw_spread: float = float(np.pi)
    # train
    init: str = "perturbed"  # perturbed | gt | gray
    init_noise: float = 0.005
    init_color_noise: float = 0.1
    train: TrainConfig = field(default_factory=TrainConfig)
    # eval / render
    mode: str = "ideal"
    reference: str | None = None

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        own = {f.name for f in fields(cls)} - {"train"}
        unknown = set(d) - own - _TRAIN_KEYS
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        kw = {k: v for k, v in d.items() if k in own}
        try:
            cfg = cls(**kw)
            cfg.train = TrainConfig(seed=cfg.seed, **{k: v for k, v in d.items() if k in _TRAIN_KEYS})
        except (TypeError, ValueError) as err:
            raise ConfigError(str(err)) from err
        cfg.validate()
        return cfg

    def to_dict(self) -> dict:
        d = asdict(self)
        t = d.pop("train")
        t.pop("seed")
        d.update(t)
        return d

    def validate(self) -> None:
        checks = [
            (self.n_splats >= 1, "n_splats must be >= 1"),
            (self.n_views >= 2, "n_views must be >= 2"),
            (self.width >= 4 and self.height >= 2, "image size too small"),
            (self.max_gap_cm >= 0, "max_gap_cm must be >= 0"),
            (self.lens_deg >= 0, "lens_deg must be >= 0"),
            (self.size_scale > 0, "size_scale must be positive"),
            (self.init in ("perturbed", "gt", "gray"), f"unknown init {self.init!r}"),
            (self.mode in ("ideal", "stitched"), f"unknown mode {self.mode!r}"),
            (self.reference in (None, "clean", "imperfect"), f"unknown reference {self.reference!r}"),
            (self.gap_cm is None or len(self.gap_cm) == 6, "gap_cm needs six components"),
            (self.workers is None or self.workers >= 1, "workers must be >= 1"),
        ]
        for ok, msg in checks:
            if not ok:
                raise ConfigError(msg)


def resolve_workers(flag: int | None) -> int:
    """SEAMGS_WORKERS beats ``--workers``; default is the logical core count."""
    env = os.environ.get("SEAMGS_WORKERS")
    if env is not None:
        try:
            n = int(env)
        except ValueError:
            raise ConfigError(f"SEAMGS_WORKERS must be an integer, got {env!r}") from None
    else:
        n = flag if flag is not None else (os.cpu_count() or 1)
    if n < 1:
        raise ConfigError("worker count must be >= 1")
    return n


# --------------------------------------------------------------------------
# argument parsing

def _load_json(path) -> dict:
    try:
        with open(path) as fh:
            d = json.load(fh)
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}") from None
    except json.JSONDecodeError as err:
        raise ConfigError(f"config file {path} is not valid JSON: {err}") from None
    if not isinstance(d, dict):
        raise ConfigError("config file must hold a JSON object")
    return d


# flag dest -> config key
_OVERRIDES = {
    "dataset": "dataset", "out": "out", "seed": "seed", "workers": "workers",
    "scene_kind": "scene_kind", "n_splats": "n_splats", "n_views": "n_views",
    "width": "width", "height": "height", "lens": "lens_deg", "gap": "max_gap_cm",
    "iterations": "iterations", "lambda_tv": "lambda_tv", "snapshot_every": "snapshot_every",
    "init": "init", "mode": "mode", "reference": "reference",
}


def build_config(args) -> RunConfig:
    d = _load_json(args.config) if getattr(args, "config", None) else {}
    for dest, key in _OVERRIDES.items():
        v = getattr(args, dest, None)
        if v is not None:
            d[key] = v
    if getattr(args, "no_gap", False):
        d["enable_gap"] = False
    if getattr(args, "no_lens", False):
        d["enable_lens"] = False
    return RunConfig.from_dict(d)


def _parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON config file; flags override its keys")
    common.add_argument("--seed", type=int)
    common.add_argument("--workers", type=int,
                        help="threads for per-view rendering in generate/eval (SEAMGS_WORKERS overrides)")

    p = argparse.ArgumentParser(prog="seamgs", description="Dual-fisheye calibrated splatting toolkit.")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("generate", parents=[common], help="simulate a dual-fisheye dataset")
    g.add_argument("--out", help="dataset directory")
    g.add_argument("--scene-kind", dest="scene_kind", choices=["room", "ring", "random", "far"])
    g.add_argument("--n-splats", dest="n_splats", type=int)
    g.add_argument("--n-views", dest="n_views", type=int)
    g.add_argument("--width", type=int)
    g.add_argument("--height", type=int)
    g.add_argument("--gap", type=float, help="max per-axis gap in cm (0: no gap)")
    g.add_argument("--lens", type=float, help="peak lens distortion in degrees (0: none)")

    t = sub.add_parser("train", parents=[common], help="jointly fit splats and calibration")
    t.add_argument("--dataset")
    t.add_argument("--out", help="run directory (checkpoints, history, results)")
    t.add_argument("--iterations", type=int)
    t.add_argument("--lambda-tv", dest="lambda_tv", type=float)
    t.add_argument("--snapshot-every", dest="snapshot_every", type=int)
    t.add_argument("--init", choices=["perturbed", "gt", "gray"])
    t.add_argument("--no-gap", dest="no_gap", action="store_true", help="freeze the gap at zero")
    t.add_argument("--no-lens", dest="no_lens", action="store_true", help="freeze the distortion grids at zero")
    t.add_argument("--stop-at", dest="stop_at", type=int, help="checkpoint and exit at this iteration")
    t.add_argument("--fresh", action="store_true", help="ignore existing checkpoints")

    r = sub.add_parser("render", parents=[common], help="render one panorama to PNG + PFM")
    r.add_argument("--run", help="run directory holding scene.sgs and calib.json")
    r.add_argument("--scene")
    r.add_argument("--calib")
    r.add_argument("--dataset")
    r.add_argument("--view", type=int, default=0, help="dataset view supplying the pose")
    r.add_argument("--pose", help="pose JSON file (overrides --view)")
    r.add_argument("--mode", choices=["ideal", "stitched"])
    r.add_argument("--width", type=int)
    r.add_argument("--height", type=int)
    r.add_argument("--out", required=True, help="output path prefix")

    e = sub.add_parser("eval", parents=[common], help="score test views")
    e.add_argument("--run")
    e.add_argument("--scene")
    e.add_argument("--calib")
    e.add_argument("--dataset")
    e.add_argument("--mode", choices=["ideal", "stitched"])
    e.add_argument("--reference", choices=["clean", "imperfect"])
    e.add_argument("--out", help="report JSON path")

    i = sub.add_parser("inspect", parents=[common], help="summarise a calibration")
    i.add_argument("--run")
    i.add_argument("--calib")
    i.add_argument("--out", help="heat-map PNG of the distortion magnitude")
    return p


# --------------------------------------------------------------------------
# commands

def cmd_generate(cfg: RunConfig, workers: int = 1) -> int:
    if not cfg.out:
        raise ConfigError("generate needs --out")
    scene = make_toy_scene(cfg.scene_kind, cfg.n_splats, cfg.seed, cfg.size_scale)
    if cfg.gap_cm is not None:
        g = np.asarray(cfg.gap_cm, dtype=float) / 100
        gap = (g[:3], g[3:])
    elif cfg.max_gap_cm == 0:
        gap = (np.zeros(3), np.zeros(3))
    else:
        gap = None
    ds = generate_dataset(scene, cfg.n_views, cfg.seed, cfg.width, cfg.height, gap=gap,
                          max_gap=cfg.max_gap_cm / 100, lens_deg=cfg.lens_deg, fov=cfg.fov,
                          fisheye_side=cfg.fisheye_side, tilt=cfg.tilt, yaw_spread=cfg.yaw_spread,
                          grid_shape=(cfg.train.grid_rows, cfg.train.grid_cols), workers=workers)
    parent = os.path.dirname(os.path.abspath(cfg.out))
    os.makedirs(parent, exist_ok=True)
    tmp = tempfile.mkdtemp(dir=parent, prefix=".gen-")
    try:
        save_dataset(ds, tmp)
        if os.path.exists(cfg.out):
            shutil.rmtree(cfg.out)
        os.replace(tmp, cfg.out)
    except BaseException:
        shutil.rmtree(tmp, ignore_errors=True)
        raise
    c = ds.gt_calib
    print(f"wrote {len(ds)} views ({len(ds.split['train'])} train / {len(ds.split['test'])} test) to {cfg.out}")
    print("gt dt_front (cm): " + " ".join(f"{v:+.3f}" for v in 100 * c.dt_front))
    print("gt dt_back  (cm): " + " ".join(f"{v:+.3f}" for v in 100 * c.dt_back))
    return EXIT_OK


def _open_dataset(path):
    if not path:
        raise ConfigError("a dataset directory is required (--dataset)")
    if not os.path.isdir(path):
        raise DataError(f"dataset directory not found: {path}")
    try:
        return load_dataset(path)
    except (OSError, ValueError, KeyError, SceneFormatError) as err:
        raise DataError(f"cannot read dataset {path}: {err}") from err


def _initial_scene(ds, cfg: RunConfig) -> GaussianScene:
    if ds.scene is None:
        raise DataError("dataset has no scene.sgs to initialise from")
    sc = ds.scene.copy()
    rng = np.random.default_rng([cfg.seed, 1])
    if cfg.init == "perturbed":
        sc.means += rng.normal(scale=cfg.init_noise, size=sc.means.shape)
        sc.color_logits += rng.normal(scale=cfg.init_color_noise, size=sc.color_logits.shape)
    elif cfg.init == "gray":
        sc.color_logits[:] = 0.0
    return sc


def _save_checkpoint(run: str, state: TrainState) -> None:
    """Write a step-numbered checkpoint, then flip the ``latest`` pointer."""
    name = f"ckpt-{state.step:06d}"
    tmp = tempfile.mkdtemp(dir=run, prefix=".ckpt-")
    try:
        save_scene(state.scene, os.path.join(tmp, "scene.sgs"))
        save_calib(state.calib, os.path.join(tmp, "calib.json"))
        arrays = {f"scene/{k}": v for k, v in state.scene.params().items()}
        arrays.update({f"calib/{k}": v for k, v in state.calib.params().items()})
        arrays.update({f"opt/{k}": v for k, v in state.moments.state_arrays().items()})
        np.savez(os.path.join(tmp, "state.npz"), **arrays)
        write_history(state.history, os.path.join(tmp, "history.csv"))
        write_json_atomic({"step": state.step, "history": state.history}, os.path.join(tmp, "step.json"))
        dest = os.path.join(run, name)
        if os.path.exists(dest):
            shutil.rmtree(dest)
        os.replace(tmp, dest)
    except BaseException:
        shutil.rmtree(tmp, ignore_errors=True)
        raise
    write_json_atomic({"checkpoint": name, "step": state.step}, os.path.join(run, "latest.json"))
    for old in os.listdir(run):
        if old.startswith("ckpt-") and old != name:
            shutil.rmtree(os.path.join(run, old), ignore_errors=True)


def _load_checkpoint(run: str, scene_meta: dict) -> TrainState | None:
    ptr = os.path.join(run, "latest.json")
    if not os.path.exists(ptr):
        return None
    try:
        with open(ptr) as fh:
            d = os.path.join(run, json.load(fh)["checkpoint"])
        with open(os.path.join(d, "step.json")) as fh:
            info = json.load(fh)
        calib = load_calib(os.path.join(d, "calib.json"))
        with np.load(os.path.join(d, "state.npz")) as z:
            arrays = {k: z[k] for k in z.files}
    except (OSError, KeyError, ValueError) as err:
        raise DataError(f"corrupt checkpoint in {run}: {err}") from err
    p = lambda prefix: {k[len(prefix):]: v for k, v in arrays.items() if k.startswith(prefix)}
    sp = p("scene/")
    scene = GaussianScene(sp["means"], sp["log_scales"], sp["quats"], sp["opacity_logits"],
                          sp["color_logits"], dict(scene_meta))
    cp = p("calib/")
    calib.dt_front, calib.dt_back = cp["dt_front"], cp["dt_back"]
    calib.grid_front.cells, calib.grid_back.cells = cp["grid_front"], cp["grid_back"]
    moments = MomentState.from_arrays(p("opt/"))
    return TrainState(scene, calib, moments, int(info["step"]), info["history"])


def cmd_train(cfg: RunConfig, stop_at: int | None = None, fresh: bool = False) -> int:
    if not cfg.out:
        raise ConfigError("train needs --out")
    ds = _open_dataset(cfg.dataset)
    os.makedirs(cfg.out, exist_ok=True)
    cfg_path = os.path.join(cfg.out, "config.json")
    record = {k: v for k, v in cfg.to_dict().items() if k != "workers"}
    state = None
    if not fresh and os.path.exists(os.path.join(cfg.out, "latest.json")):
        with open(cfg_path) as fh:
            prev = json.load(fh)
        if prev != json.loads(json.dumps(record)):
            raise ConfigError(f"{cfg.out} holds a run with a different config (use --fresh)")
        state = _load_checkpoint(cfg.out, ds.scene.meta if ds.scene is not None else {})
        print(f"resuming from iteration {state.step}")
    write_json_atomic(record, cfg_path)
    init = _initial_scene(ds, cfg)

    def snapshot(st):
        _save_checkpoint(cfg.out, st)
        h = st.history[-1]
        print(f"it {h['iteration']:>6d}  loss {h['loss']:.5f}  grid_rms {h['grid_rms']:.5f}", flush=True)

    try:
        state = train(init, ds, cfg.train, state=state, stop_at=stop_at, on_snapshot=snapshot)
    except NumericalAbort as err:
        snap = err.snapshot
        dump = os.path.join(cfg.out, "abort")
        os.makedirs(dump, exist_ok=True)
        save_scene(snap["scene"], os.path.join(dump, "scene.sgs"))
        save_calib(snap["calib"], os.path.join(dump, "calib.json"))
        write_json_atomic({"iteration": snap["iteration"], "view": snap["view"], "message": str(err)},
                          os.path.join(dump, "info.json"))
        print(f"error: {err}; diagnostic snapshot in {dump}", file=sys.stderr)
        return EXIT_NUMERIC
    if state.step < cfg.train.iterations:
        _save_checkpoint(cfg.out, state)
        print(f"stopped at iteration {state.step}; rerun to resume")
        return EXIT_OK
    save_scene(state.scene, os.path.join(cfg.out, "scene.sgs"))
    save_calib(state.calib, os.path.join(cfg.out, "calib.json"))
    write_history(state.history, os.path.join(cfg.out, "history.csv.tmp"))
    os.replace(os.path.join(cfg.out, "history.csv.tmp"), os.path.join(cfg.out, "history.csv"))
    c = state.calib
    print("dt_front (cm): " + " ".join(f"{v:+.3f}" for v in 100 * c.dt_front))
    print("dt_back  (cm): " + " ".join(f"{v:+.3f}" for v in 100 * c.dt_back))
    return EXIT_OK


def _scene_and_calib(args, need_calib: bool):
    scene_path = args.scene or (os.path.join(args.run, "scene.sgs") if args.run else None)
    calib_path = args.calib or (os.path.join(args.run, "calib.json") if args.run else None)
    if scene_path is None:
        raise ConfigError("give --run or --scene")
    try:
        scene = load_scene(scene_path)
        calib = load_calib(calib_path) if calib_path else None
    except FileNotFoundError as err:
        raise DataError(str(err)) from err
    except (SceneFormatError, ValueError, KeyError) as err:
        raise DataError(f"cannot read inputs: {err}") from err
    if need_calib and calib is None:
        raise ConfigError("stitched mode needs a calibration (--calib or --run)")
    return scene, calib


def cmd_render(cfg: RunConfig, args) -> int:
    scene, calib = _scene_and_calib(args, cfg.mode == "stitched")
    width, height = cfg.width, cfg.height
    if args.pose:
        try:
            pose = Pose.from_dict(_load_json(args.pose))
        except (KeyError, ValueError) as err:
            raise DataError(f"bad pose file: {err}") from err
    else:
        ds = _open_dataset(cfg.dataset)
        if not 0 <= args.view < len(ds):
            raise DataError(f"view {args.view} out of range (dataset has {len(ds)})")
        pose = ds.poses[args.view]
        if args.width is None and args.height is None:
            width, height = ds.size
    if cfg.mode == "ideal":
        img = render_ideal(scene, pose, width, height)
    else:
        img = render_stitched(scene, CameraRig(pose, calib), width, height)
    os.makedirs(os.path.dirname(os.path.abspath(args.out)), exist_ok=True)
    write_png(args.out + ".png", img)
    write_pfm(args.out + ".pfm", img)
    print(f"wrote {args.out}.png and {args.out}.pfm ({cfg.mode}, {width}x{height})")
    return EXIT_OK


def cmd_eval(cfg: RunConfig, args, workers: int = 1) -> int:
    scene, calib = _scene_and_calib(args, cfg.mode == "stitched")
    ds = _open_dataset(cfg.dataset)
    if not ds.split["test"]:
        raise DataError("dataset has an empty test split")
    try:
        rep = evaluate(scene, calib, ds, cfg.mode, cfg.reference, workers)
    except ValueError as err:
        raise DataError(str(err)) from err
    print(rep.table())
    out = args.out or (os.path.join(args.run, f"eval_{cfg.mode}.json") if args.run else None)
    if out:
        write_json_atomic(rep.to_dict(), out)
        print(f"report written to {out}")
    return EXIT_OK


def cmd_inspect(args) -> int:
    path = args.calib or (os.path.join(args.run, "calib.json") if args.run else None)
    if path is None:
        raise ConfigError("give --calib or --run")
    try:
        calib = load_calib(path)
    except FileNotFoundError as err:
        raise DataError(str(err)) from err
    except (ValueError, KeyError) as err:
        raise DataError(f"cannot read calibration: {err}") from err
    print("dt_front (cm): " + " ".join(f"{v:+.4f}" for v in 100 * calib.dt_front))
    print("dt_back  (cm): " + " ".join(f"{v:+.4f}" for v in 100 * calib.dt_back))
    mags = [np.linalg.norm(calib.grid(s).cells, axis=-1) for s in ("front", "back")]
    print(f"grid rms (rad): {calib.grid_rms():.6g}")
    print(f"grid max (deg): front {np.degrees(mags[0].max()):.4f}  back {np.degrees(mags[1].max()):.4f}")
    if args.out:
        vmax = max(m.max() for m in mags)
        img = np.concatenate([heatmap(m, vmax) for m in mags], axis=1)
        write_png(args.out, img)
        print(f"heat map (front | back) written to {args.out}")
    return EXIT_OK


def main(argv=None) -> int:
    args = _parser().parse_args(argv)
    try:
        cfg = build_config(args)
        workers = resolve_workers(cfg.workers)
        if args.command == "generate":
            return cmd_generate(cfg, workers)
        if args.command == "train":
            return cmd_train(cfg, args.stop_at, args.fresh)
        if args.command == "render":
            return cmd_render(cfg, args)
        if args.command == "eval":
            return cmd_eval(cfg, args, workers)
        return cmd_inspect(args)
    except ConfigError as err:
        print(f"config error: {err}", file=sys.stderr)
        return EXIT_CONFIG
    except DataError as err:
        print(f"data error: {err}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
