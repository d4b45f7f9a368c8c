"""Command-line interface.

Exit codes: 0 success, 1 runtime failure, 2 bad input (usage errors,
missing or unparsable files).
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path
from typing import List, Optional, Sequence

import numpy as np

EXIT_OK = 0
EXIT_RUNTIME = 1
EXIT_INPUT = 2

SCENE_KINDS = ("standard", "occluder")


class InputError(Exception):
    """Bad user input; maps to exit code 2."""


# ---------------------------------------------------------------------------
# Helpers
# ---------------------------------------------------------------------------


def _existing(path, what: str) -> Path:
    p = Path(path)
    if not p.exists():
        raise InputError(f"{what} not found: {p}")
    return p


def set_threads(n: Optional[int]) -> int:
    """Cap numba and torch worker threads; ``None`` reads RGSPLAT_THREADS, else all cores."""
    import numba
    import torch

    if n is None:
        env = os.environ.get("RGSPLAT_THREADS")
        if env:
            try:
                n = int(env)
            except ValueError:
                raise InputError(f"RGSPLAT_THREADS must be an integer, got {env!r}") from None
    if n is None:
        n = os.cpu_count() or 1
    if n < 1:
        raise InputError("--threads must be >= 1")
    n = min(n, numba.config.NUMBA_NUM_THREADS)
    numba.set_num_threads(n)
    torch.set_num_threads(n)
    return n


def _load_scene(path):
    from .scene import SceneFormatError, load_scene

    p = _existing(path, "scene file")
    try:
        return load_scene(p)
    except (SceneFormatError, ValueError, OSError) as e:
        raise InputError(f"cannot read scene {p}: {e}") from None


def load_cameras(spec: str, width: int = 256, height: int = 256, focal: Optional[float] = None):
    """Cameras from a JSON file (one camera dict or ``{"cameras": [...]}``) or ``lookat:ex,ey,ez[,tx,ty,tz]``."""
    from .splatter import Camera

    if spec.startswith("lookat:"):
        try:
            vals = [float(v) for v in spec[len("lookat:"):].split(",")]
        except ValueError:
            raise InputError(f"bad camera spec {spec!r}") from None
        if len(vals) not in (3, 6):
            raise InputError(f"bad camera spec {spec!r}: expected 3 or 6 numbers")
        eye = np.array(vals[:3])
        target = np.array(vals[3:]) if len(vals) == 6 else np.zeros(3)
        f = focal if focal is not None else 1.75 * width
        try:
            return [Camera.look_at(eye, target, fx=f, width=width, height=height)]
        except ValueError as e:
            raise InputError(f"bad camera spec {spec!r}: {e}") from None
    p = _existing(spec, "camera file")
    try:
        doc = json.loads(p.read_text())
        docs = doc["cameras"] if isinstance(doc, dict) and "cameras" in doc else doc
        docs = docs if isinstance(docs, list) else [docs]
        cams = [Camera.from_dict(d) for d in docs]
    except (ValueError, KeyError, TypeError) as e:
        raise InputError(f"cannot parse camera file {p}: {e}") from None
    if not cams:
        raise InputError(f"camera file {p} has no cameras")
    return cams


def _prefiltered_for(env_path: Path, cache: Optional[str], levels: int, force: bool = False, log=print):
    """Prefilter ``env_path``, reusing ``cache`` when it matches the environment's digest."""
    from .lighting import load_env, load_prefiltered, prefilter, save_prefiltered

    try:
        env = load_env(env_path)
    except (ValueError, OSError) as e:
        raise InputError(f"cannot read environment {env_path}: {e}") from None
    if cache is not None and Path(cache).exists() and not force:
        try:
            pf = load_prefiltered(cache)
        except ValueError as e:
            log(f"cache {cache} unusable ({e}); regenerating")
        else:
            if pf.source_digest == env.digest() and len(pf.sigmas) == levels:
                log(f"cache {cache} matches {env_path.name}; skipping prefilter")
                return pf
            log(f"cache {cache} is stale; regenerating")
    pf = prefilter(env, num_levels=levels)
    if cache is not None:
        save_prefiltered(pf, cache)
        log(f"wrote prefilter cache {cache}")
    return pf


def load_light(spec: str, cache: Optional[str] = None, levels: Optional[int] = None, pattern_index: Optional[int] = None):
    """``*.pfm`` gives a prefiltered environment; ``*.json`` a point-light pattern."""
    from .lighting import DEFAULT_LEVELS, load_patterns

    p = _existing(spec, "light file")
    if p.suffix.lower() == ".pfm":
        return _prefiltered_for(p, cache, levels or DEFAULT_LEVELS, log=lambda m: print(m, file=sys.stderr))
    if p.suffix.lower() == ".json":
        try:
            pats = load_patterns(p)
        except (ValueError, KeyError, TypeError) as e:
            raise InputError(f"cannot parse light pattern {p}: {e}") from None
        if pattern_index is not None:
            if not 0 <= pattern_index < len(pats):
                raise InputError(f"--pattern-index {pattern_index} out of range (file has {len(pats)})")
            return pats[pattern_index]
        light = pats[0]
        for q in pats[1:]:
            light = light + q
        return light
    raise InputError(f"unsupported light file {p}: expected .pfm or .json")


def _out_path(out: Path, index: int, count: int, suffix: str = "") -> Path:
    stem = out.stem + (f"_{index:03d}" if count > 1 else "") + suffix
    return out.with_name(stem + out.suffix)


def _write_json(path, doc) -> None:
    text = json.dumps(doc, indent=1, sort_keys=True)
    if path is None or str(path) == "-":
        print(text)
    else:
        Path(path).write_text(text + "\n")


# ---------------------------------------------------------------------------
# Subcommands
# ---------------------------------------------------------------------------


def cmd_render(args) -> int:
    from .appearance import decompose
    from .splatter import render, save_image

    cloud = _load_scene(args.scene)
    cams = load_cameras(args.camera, args.width, args.height, args.focal)
    light = load_light(args.light, args.cache, args.levels, args.pattern_index)
    out = Path(args.out)
    if out.suffix.lower() not in (".png", ".pfm"):
        raise InputError(f"output must end in .png or .pfm: {out}")
    out.parent.mkdir(parents=True, exist_ok=True)
    for i, cam in enumerate(cams):
        res = render(cloud, light, cam, args.background)
        save_image(_out_path(out, i, len(cams)), res.image, args.exposure)
        if args.decompose:
            parts = decompose(cloud, light, cam)
            for key, img in parts.items():
                if img.ndim == 2:
                    img = np.repeat(img[..., None], 3, axis=2)
                exposure = 0.0 if key in ("alpha", "normal", "albedo") else args.exposure
                save_image(_out_path(out, i, len(cams), "_" + key), img, exposure)
        if args.verbose:
            t = ", ".join(f"{k} {1e3 * v:.1f} ms" for k, v in res.timings.items())
            print(f"view {i}: {t}")
    return EXIT_OK


def cmd_decompose(args) -> int:
    args.decompose = True
    return cmd_render(args)


def cmd_prefilter(args) -> int:
    env = _existing(args.env, "environment")
    if env.suffix.lower() != ".pfm":
        raise InputError(f"environment must be a .pfm file: {env}")
    Path(args.out).parent.mkdir(parents=True, exist_ok=True)
    _prefiltered_for(env, args.out, args.levels, force=args.force)
    return EXIT_OK


def _make_reference(kind_or_path: str, n: int, seed: int):
    from . import synthetic

    if kind_or_path == "standard":
        return synthetic.standard_scene(n, seed=seed), synthetic.camera_rig
    if kind_or_path == "occluder":
        return synthetic.occluder_scene(seed=seed), None
    return _load_scene(kind_or_path), None


def cmd_synth(args) -> int:
    from . import synthetic
    from .fitter import save_dataset, synth_dataset
    from .lighting import make_patterns, save_patterns
    from .scene import save_scene

    ref, _ = _make_reference(args.scene, args.gaussians, args.seed)
    if args.scene == "occluder":
        cams = synthetic.camera_rig(args.n_cams, distance=250.0, hemisphere=True, seed=args.seed)
    else:
        cams = synthetic.camera_rig(args.n_cams, seed=args.seed)
    pats = make_patterns(args.kind, args.n_lights, group_size=args.group_size, seed=args.seed)
    frames = synth_dataset(ref, cameras=cams, patterns=pats, background=args.background)
    out = Path(args.out)
    digest = save_dataset(frames, out, seed=args.seed, extra={"scene": args.scene, "kind": args.kind})
    save_scene(ref, out / "reference.rgsc")
    save_patterns(pats, out / "patterns.json")
    if args.jitter > 0:
        save_scene(synthetic.jitter(ref, args.jitter, seed=args.seed + 1), out / "init.rgsc")
    print(f"wrote {len(frames)} frames to {out} (manifest sha256 {digest})")
    return EXIT_OK


def _parse_lr_scale(items):
    from .fitter import DEFAULT_LR_SCALE

    if items is None:
        return dict(DEFAULT_LR_SCALE)
    if isinstance(items, dict):  # from a config file table
        return {str(k): float(v) for k, v in items.items()}
    out = {}
    for item in items:
        name, sep, val = str(item).partition("=")
        try:
            out[name] = float(val)
        except ValueError:
            sep = ""
        if not sep:
            raise InputError(f"--lr-scale expects BLOCK=MULT, got {item!r}")
    return out


def _config_from_args(args):
    from .fitter import FitConfig

    return FitConfig(
        lr_scale=_parse_lr_scale(args.lr_scale),
        lambda_l1=args.lambda_l1, lambda_ssim=args.lambda_ssim, lambda_scale=args.lambda_scale,
        lambda_negcolor=args.lambda_negcolor, lambda_anchor=args.lambda_anchor, lr=args.lr, lr_final=args.lr_final,
        batch_size=args.batch_size, iterations=args.iterations, seed=args.seed, fixed=tuple(args.fix or ()),
        background=args.background, checkpoint_every=args.checkpoint_every, checkpoint_dir=args.checkpoint_dir,
        log_every=args.log_every,
    )


def _load_frames(path):
    from .fitter import load_dataset

    p = _existing(path, "dataset directory")
    try:
        return load_dataset(p)
    except (ValueError, KeyError, OSError) as e:
        raise InputError(f"cannot read dataset {p}: {e}") from None


def cmd_fit(args) -> int:
    from .fitter import NonFiniteLossError, fit, save_history_csv, split_frames
    from .scene import save_scene

    frames = _load_frames(args.data)
    init = _load_scene(args.init)
    if args.resume is not None:
        _existing(args.resume, "checkpoint")
        _existing(str(args.resume) + ".state.pt", "checkpoint state")
    try:
        cfg = _config_from_args(args)
        train, held = split_frames(frames, args.hold_out_lights, args.hold_out_views, seed=args.seed)
    except ValueError as e:
        raise InputError(str(e)) from None
    print(f"fitting on {len(train)} frames ({len(held)} held out)")
    try:
        result = fit(train, init, cfg, resume=args.resume)
    except NonFiniteLossError as e:
        print(f"error: {e}", file=sys.stderr)
        if e.checkpoint:
            print(f"last good checkpoint: {e.checkpoint}", file=sys.stderr)
        elif e.last_good is not None:
            bad = Path(args.out).with_suffix(".lastgood.rgsc")
            save_scene(e.last_good, bad)
            print(f"last good parameters written to {bad}", file=sys.stderr)
        return EXIT_RUNTIME
    Path(args.out).parent.mkdir(parents=True, exist_ok=True)
    save_scene(result.cloud, args.out)
    if args.loss_csv:
        save_history_csv(result.history, args.loss_csv)
    if result.history:
        print(f"final loss {result.history[-1]['loss']:.6f}")
    return EXIT_OK


def cmd_eval(args) -> int:
    from .fitter import evaluate, mean_metrics, split_frames

    frames = _load_frames(args.data)
    if args.pred is not None:
        pred = _load_frames(args.pred)
        if len(pred) != len(frames):
            raise InputError(f"prediction set has {len(pred)} frames, ground truth {len(frames)}")
        try:
            doc = mean_metrics([(p.image, g.image) for p, g in zip(pred, frames)])
        except ValueError as e:
            raise InputError(str(e)) from None
    else:
        if args.scene is None:
            raise InputError("eval needs --scene or --pred")
        cloud = _load_scene(args.scene)
        try:
            train, held = split_frames(frames, args.hold_out_lights, args.hold_out_views, seed=args.seed)
        except ValueError as e:
            raise InputError(str(e)) from None
        doc = {}
        if held:
            doc["held_out"] = evaluate(cloud, held, args.background)
        doc["train"] = evaluate(cloud, train, args.background)
    _write_json(args.out, doc)
    return EXIT_OK


def cmd_selftest(args) -> int:
    from .selftest import run_selftest

    ok = run_selftest(quick=args.quick)
    return EXIT_OK if ok else EXIT_RUNTIME


# ---------------------------------------------------------------------------
# Parser
# ---------------------------------------------------------------------------


def _add_view_flags(p):
    p.add_argument("--scene", required=True, help="scene file (.rgsc)")
    p.add_argument("--light", required=True, help="environment .pfm or light-pattern .json")
    p.add_argument("--camera", required=True, help="camera .json or lookat:ex,ey,ez[,tx,ty,tz]")
    p.add_argument("--out", required=True, help="output image (.png or .pfm)")
    p.add_argument("--width", type=int, default=256)
    p.add_argument("--height", type=int, default=256)
    p.add_argument("--focal", type=float, default=None)
    p.add_argument("--cache", default=None, help="prefilter cache to reuse for .pfm lights")
    p.add_argument("--levels", type=int, default=None)
    p.add_argument("--pattern-index", type=int, default=None, help="pick one pattern; default sums them all")
    p.add_argument("--background", type=float, default=0.0)
    p.add_argument("--exposure", type=float, default=0.0, help="stops applied to PNG output")
    p.add_argument("-v", "--verbose", action="store_true")


def build_parser() -> argparse.ArgumentParser:
    from .lighting import DEFAULT_LEVELS

    parser = argparse.ArgumentParser(prog="rgsplat", description="Relightable Gaussian splatting toolkit.")
    parser.add_argument("--threads", type=int, default=None, help="worker threads (default RGSPLAT_THREADS or all cores)")
    parser.add_argument("--config", default=None, help="TOML file whose keys mirror the flags")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("render", help="render a scene")
    _add_view_flags(p)
    p.add_argument("--decompose", action="store_true", help="also write the component images")
    p.set_defaults(func=cmd_render)

    p = sub.add_parser("decompose", help="render --decompose")
    _add_view_flags(p)
    p.set_defaults(func=cmd_decompose)

    p = sub.add_parser("prefilter", help="prefilter an environment map")
    p.add_argument("--env", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--levels", type=int, default=DEFAULT_LEVELS)
    p.add_argument("--force", action="store_true")
    p.set_defaults(func=cmd_prefilter)

    p = sub.add_parser("synth", help="render a synthetic OLAT dataset")
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--scene", default="standard", help="standard, occluder or a scene file")
    p.add_argument("--gaussians", type=int, default=200)
    p.add_argument("--n-cams", type=int, default=8)
    p.add_argument("--n-lights", type=int, default=64)
    p.add_argument("--kind", choices=("olat", "grouped"), default="olat")
    p.add_argument("--group-size", type=int, default=5)
    p.add_argument("--jitter", type=float, default=0.1, help="also write init.rgsc jittered by this amount")
    p.add_argument("--background", type=float, default=0.0)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("fit", help="fit a scene to a dataset")
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--init", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--iterations", type=int, default=1000)
    p.add_argument("--batch-size", type=int, default=16)
    p.add_argument("--lr", type=float, default=5e-4)
    p.add_argument("--lr-final", type=float, default=None)
    p.add_argument("--lr-scale", nargs="*", default=None, metavar="BLOCK=MULT",
                   help="per-block learning-rate multipliers (default d_m=0.05 dn_view=0.1)")
    p.add_argument("--lambda-l1", type=float, default=10.0)
    p.add_argument("--lambda-ssim", type=float, default=0.2)
    p.add_argument("--lambda-scale", type=float, default=1e-2)
    p.add_argument("--lambda-negcolor", type=float, default=1e-2)
    p.add_argument("--lambda-anchor", type=float, default=0.0)
    p.add_argument("--fix", nargs="*", default=None, help="parameter blocks to keep fixed, e.g. d_m")
    p.add_argument("--hold-out-lights", type=int, default=0)
    p.add_argument("--hold-out-views", type=int, default=0)
    p.add_argument("--background", type=float, default=0.0)
    p.add_argument("--checkpoint-dir", default=None)
    p.add_argument("--checkpoint-every", type=int, default=0)
    p.add_argument("--resume", default=None, help="checkpoint scene written by a previous fit")
    p.add_argument("--loss-csv", default=None)
    p.add_argument("--log-every", type=int, default=100)
    p.set_defaults(func=cmd_fit)

    p = sub.add_parser("eval", help="PSNR / SSIM of a scene or of predicted images")
    p.add_argument("--data", required=True, help="ground-truth dataset directory")
    p.add_argument("--scene", default=None)
    p.add_argument("--pred", default=None, help="dataset directory of predicted images")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--hold-out-lights", type=int, default=0)
    p.add_argument("--hold-out-views", type=int, default=0)
    p.add_argument("--background", type=float, default=0.0)
    p.add_argument("--out", default="-", help="metrics JSON path (default stdout)")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("selftest", help="run the built-in oracle checks")
    p.add_argument("--quick", action="store_true")
    p.set_defaults(func=cmd_selftest)
    return parser


def _apply_config(parser: argparse.ArgumentParser, argv: Sequence[str]) -> None:
    """Install TOML values as parser defaults so explicit flags still win."""
    pre = argparse.ArgumentParser(add_help=False)
    pre.add_argument("--config", default=None)
    known, _ = pre.parse_known_args(argv)
    if known.config is None:
        return
    try:
        import tomllib
    except ModuleNotFoundError:  # python < 3.11
        import tomli as tomllib
    path = _existing(known.config, "config file")
    try:
        doc = tomllib.loads(path.read_text())
    except (tomllib.TOMLDecodeError, UnicodeDecodeError) as e:
        raise InputError(f"cannot parse config {path}: {e}") from None
    subparsers = next(a for a in parser._actions if isinstance(a, argparse._SubParsersAction))
    top = {k: v for k, v in doc.items() if not isinstance(v, dict)}
    for name, sp in subparsers.choices.items():
        values = dict(top)
        values.update(doc.get(name, {}))
        dests = {a.dest for a in sp._actions}
        for k, v in values.items():
            dest = k.replace("-", "_")
            if dest in ("threads",):
                continue
            if dest in dests:
                sp.set_defaults(**{dest: v})
                # a config value satisfies a required flag
                for a in sp._actions:
                    if a.dest == dest:
                        a.required = False
            elif name in doc and k in doc[name]:
                raise InputError(f"unknown config key {k!r} for {name}")
    if "threads" in top:
        parser.set_defaults(threads=int(top["threads"]))
    known_sections = set(subparsers.choices)
    unknown = [k for k, v in doc.items() if isinstance(v, dict) and k not in known_sections]
    if unknown:
        raise InputError(f"unknown config sections: {unknown}")


def main(argv: Optional[List[str]] = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        _apply_config(parser, argv)
    except InputError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_INPUT
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return EXIT_OK if e.code == 0 else EXIT_INPUT
    try:
        set_threads(args.threads)
        return args.func(args)
    except InputError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_INPUT
    except KeyboardInterrupt:
        return EXIT_RUNTIME
    except Exception as e:  # anything else is a runtime failure
        print(f"error: {type(e).__name__}: {e}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
