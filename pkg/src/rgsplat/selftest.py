"""Fast built-in oracle checks, used by ``rgsplat selftest``."""

from __future__ import annotations

import math
import time
from typing import Callable, List, Tuple

import numpy as np
import torch


def _check_sh_orthonormal() -> Tuple[bool, str]:
    from .sphmath import product_gauss_rule, sh_basis

    rule = product_gauss_rule(32, 64)
    Y = sh_basis(rule.dirs, 8)
    gram = (Y * rule.weights[:, None]).T @ Y
    err = float(np.abs(gram - np.eye(gram.shape[0])).max())
    return err < 1e-10, f"max |Gram - I| = {err:.2e}"


def _check_sg_constant() -> Tuple[bool, str]:
    from .sphmath import sg_eval

    q = np.array([0.0, 0.0, 1.0])
    errs = [abs(float(sg_eval(q, q, s)) - 1 / (math.sqrt(2) * math.pi ** (2 / 3) * s)) for s in (0.02, 0.1, 0.5)]
    return max(errs) < 1e-9, f"max peak error = {max(errs):.1e}"


def _random_splats(rng, n, size):
    means = rng.uniform(0, size, (n, 2))
    a = rng.normal(size=(n, 2, 2)) * rng.uniform(1, 6, (n, 1, 1))
    cov = a @ a.transpose(0, 2, 1) + 0.3 * np.eye(2)
    return means, cov, rng.uniform(0, 1, (n, 3)), rng.uniform(0.05, 0.99, n)


def _check_tile_vs_naive() -> Tuple[bool, str]:
    from .splatter import rasterize, rasterize_naive

    rng = np.random.default_rng(0)
    means, cov, col, op = _random_splats(rng, 200, 64)
    a, _ = rasterize(means, cov, col, op, 64, 64, 0.1)
    b, _ = rasterize_naive(means, cov, col, op, 64, 64, 0.1)
    err = float(np.abs(a - b).max())
    return err <= 1e-5, f"max difference = {err:.1e}"


def _check_linearity() -> Tuple[bool, str]:
    from .lighting import make_patterns
    from .splatter import render
    from .synthetic import camera_rig, standard_scene

    cloud = standard_scene(60, seed=3)
    cam = camera_rig(1, seed=3)[0]
    pats = make_patterns("olat", 16, seed=3)
    bg = 0.05
    a = render(cloud, pats[0], cam, bg).image
    b = render(cloud, pats[5], cam, bg).image
    ab = render(cloud, pats[0] + pats[5], cam, bg)
    err = float(np.abs(ab.image - (a + b - bg * (1 - ab.alpha)[..., None])).max())
    return err <= 1e-4, f"max residual = {err:.1e}"


def _check_gradients() -> Tuple[bool, str]:
    from .fitter import FitConfig, OLATFrame, cloud_to_params, synth_dataset, total_loss
    from .lighting import make_patterns
    from .synthetic import camera_rig, jitter, standard_scene

    ref = standard_scene(5, seed=2)
    cam = camera_rig(1, seed=2, size=24, focal=40.0)[0]
    frames = synth_dataset(ref, cameras=[cam], patterns=make_patterns("olat", 4, seed=2)[:1])
    init = jitter(ref, 0.2, seed=5)
    cfg = FitConfig(lambda_ssim=0.0)
    groups = torch.as_tensor(init.groups.astype(np.int64))
    params = cloud_to_params(init)
    for v in params.values():
        v.requires_grad_(True)
    loss, _ = total_loss(params, frames, cfg, groups)
    loss.backward()
    worst = 0.0
    for name in ("positions", "log_scales", "albedo", "rough_raw"):
        g = params[name].grad.reshape(-1)
        k = int(torch.argmax(g.abs()))
        eps = 1e-4
        vals = []
        for s in (1, -1):
            p2 = {n: v.detach().clone() for n, v in params.items()}
            p2[name].view(-1)[k] += s * eps
            vals.append(float(total_loss(p2, frames, cfg, groups)[0]))
        fd = (vals[0] - vals[1]) / (2 * eps)
        worst = max(worst, abs(fd - float(g[k])) / max(abs(fd), 1e-12))
    return worst <= 1e-3, f"worst relative error = {worst:.1e}"


CHECKS: List[Tuple[str, Callable[[], Tuple[bool, str]]]] = [
    ("sh orthonormality", _check_sh_orthonormal),
    ("sg constant", _check_sg_constant),
    ("tile == naive rasterizer", _check_tile_vs_naive),
    ("light linearity", _check_linearity),
    ("finite-difference gradients", _check_gradients),
]


def run_selftest(quick: bool = False) -> bool:
    """Run every check and print one line each; ``quick`` skips the gradient check."""
    ok = True
    for name, fn in CHECKS:
        if quick and fn is _check_gradients:
            continue
        t0 = time.perf_counter()
        try:
            passed, detail = fn()
        except Exception as e:  # report and keep going
            passed, detail = False, f"{type(e).__name__}: {e}"
        ok &= passed
        print(f"[{'PASS' if passed else 'FAIL'}] {name}: {detail} ({time.perf_counter() - t0:.1f} s)", flush=True)
    return ok
