#!/usr/bin/env python3
"""
Acceptance experiments for the discrete spatial diffusion engine.

Runs the long Monte Carlo, calibration and training checks that are too slow
for the unit suite and prints one PASS/FAIL line per check.

Usage:
    python scripts/acceptance.py                 # every check, full size
    python scripts/acceptance.py --quick         # reduced trial counts
    python scripts/acceptance.py --only kernel reconstruction
"""

import argparse
import sys
import time
from pathlib import Path
from typing import Callable, Dict, List, Optional, Tuple

import numpy as np
import torch
from scipy.linalg import expm

sys.path.insert(0, str(Path(__file__).resolve().parent.parent))

from dsd.core.config import configure  # noqa: E402
from dsd.core.logging import get_logger, setup_logging  # noqa: E402
from dsd.core.rng import derive_rng  # noqa: E402
from dsd.models.configs import SamplerConfig, TrainConfig  # noqa: E402
from dsd.models.lattice import (  # noqa: E402
    DIRECTIONS,
    BoundaryCondition,
    IntensityGrid,
    RateField,
    shift_coords,
)
from dsd.services.dataset import synth_blobs  # noqa: E402
from dsd.services.forward import corrupt  # noqa: E402
from dsd.services.kernel import dense_matrix, kernel_for  # noqa: E402
from dsd.services.loss import likelihood_loss, rate_matching_l1  # noqa: E402
from dsd.services.metrics import Binarization, s2_deviation, stacked_pixels  # noqa: E402
from dsd.services.rate_model import OraclePredictor, ToyConvModel, ToyPredictor, backward_pass  # noqa: E402
from dsd.services.reverse import oracle_rates  # noqa: E402
from dsd.services.sampler import generate, generate_batch, inpaint, tau_leap_step  # noqa: E402
from dsd.services.schedule import calibrate, logit_schedule, polynomial_schedule, unevenness  # noqa: E402
from dsd.services.training import build_model, train  # noqa: E402

logger = get_logger("acceptance")

Result = Tuple[bool, str]


def dense_generator(boundary: BoundaryCondition, width: int, height: int, rate: float) -> np.ndarray:
    n = width * height
    q = np.zeros((n, n))
    xs, ys = np.unravel_index(np.arange(n), (width, height))
    for d in DIRECTIONS:
        nx, ny, valid = shift_coords(xs, ys, d, boundary, width, height)
        src = np.flatnonzero(valid)
        np.add.at(q, (src, nx[src] * height + ny[src]), rate)
        np.add.at(q, (src, src), -rate)
    return q


def check_conservation(args: argparse.Namespace) -> Result:
    trials = 200 if args.quick else 10_000
    side = 16 if args.quick else 64
    for trial in range(trials):
        rng = derive_rng(args.seed, "conservation", trial)
        width, height = (int(v) for v in rng.integers(2, side + 1, size=2))
        channels = int(rng.integers(1, 4))
        boundary = BoundaryCondition.PERIODIC if rng.random() < 0.5 else BoundaryCondition.NOFLUX
        grid = IntensityGrid(values=rng.integers(0, 4, size=(width, height, channels)))
        t = float(rng.uniform(0.01, 1.0))
        kernel = kernel_for(boundary, width, height, 5.0, t)
        corrupted, ledger = corrupt(grid, kernel, rng)
        truth = oracle_rates(ledger, corrupted, kernel, 5.0)
        rate_matching_l1(truth, truth)
        config = SamplerConfig(
            width=width, height=height, eps=0.3, boundary=boundary, rate=5.0, totals=grid.totals()
        )
        image = generate(OraclePredictor.from_clean(grid, 5.0, boundary), config, rng)
        if corrupted.totals() != grid.totals() or image.totals() != grid.totals():
            return False, f"trial {trial}: totals {grid.totals()} -> {corrupted.totals()} -> {image.totals()}"
    return True, f"{trials} pipelines, totals unchanged"


def check_kernel(args: argparse.Namespace) -> Result:
    worst, worst_ck = 0.0, 0.0
    sizes = [(w, h) for w in range(1, 9) for h in range(1, 9)]
    for boundary in BoundaryCondition:
        for width, height in sizes:
            for rt in (0.1, 0.5, 2.0, 10.0):
                q = dense_generator(boundary, width, height, 1.0)
                exact = expm(rt * q)
                kernel = dense_matrix(kernel_for(boundary, width, height, 1.0, rt))
                worst = max(worst, float(np.abs(kernel - exact).max()))
            half = dense_matrix(kernel_for(boundary, width, height, 1.0, 0.35))
            rest = dense_matrix(kernel_for(boundary, width, height, 1.0, 0.65))
            whole = dense_matrix(kernel_for(boundary, width, height, 1.0, 1.0))
            worst_ck = max(worst_ck, float(np.abs(half @ rest - whole).max()))
    return worst <= 1e-10 and worst_ck <= 1e-9, f"max |K - expm| = {worst:.2e}, composition {worst_ck:.2e}"


def check_reconstruction(args: argparse.Namespace) -> Result:
    trials = 50 if args.quick else 1000
    errors: Dict[float, float] = {}
    for eps in (0.2, 0.1, 0.05, 0.01):
        per_trial = []
        for trial in range(trials):
            rng = derive_rng(args.seed, "reconstruct", trial)
            values = np.zeros((8, 8, 1), dtype=np.int64)
            count = int(rng.integers(1, 17))
            np.add.at(values[:, :, 0], (rng.integers(0, 8, count), rng.integers(0, 8, count)), 1)
            clean = IntensityGrid(values=values)
            config = SamplerConfig(width=8, height=8, eps=eps, rate=20.0, totals=clean.totals())
            predictor = OraclePredictor.from_clean(clean, 20.0, BoundaryCondition.PERIODIC)
            image = generate(predictor, config, derive_rng(args.seed, "reconstruct-run", trial, int(eps * 1000)))
            per_trial.append(float(np.abs(image.values - clean.values).mean()))
        errors[eps] = float(np.mean(per_trial))
        logger.info("Reconstruction error", eps=eps, mean_l1=errors[eps])
    ordered = [errors[e] for e in (0.2, 0.1, 0.05, 0.01)]
    monotone = all(a >= b - 1e-3 for a, b in zip(ordered, ordered[1:]))
    detail = ", ".join(f"eps={e}: {v:.4f}" for e, v in errors.items())
    return monotone and errors[0.01] <= 0.05, detail


def check_loss(args: argparse.Namespace) -> Result:
    rng = derive_rng(args.seed, "loss")
    truth = RateField(values=rng.uniform(0.05, 5.0, size=(4, 4, 4, 1)))
    best = likelihood_loss(truth, truth, 0.1)
    for _ in range(10_000):
        perturbed = truth.values * np.exp(rng.normal(0.0, 0.05, size=truth.shape))
        if likelihood_loss(RateField(values=perturbed), truth, 0.1) < best:
            return False, "a perturbation lowered the likelihood loss"
    nudged = truth.values.copy()
    nudged[0, 0, 0, 0] += 1e-9
    zero_iff_equal = rate_matching_l1(truth, truth) == 0.0 and rate_matching_l1(RateField(values=nudged), truth) > 0
    return zero_iff_equal, "minimum at pred = truth over 10^4 perturbations"


def check_schedule(args: argparse.Namespace) -> Result:
    count = 40 if args.quick else 500
    samples = synth_blobs(16, 16, count, 0.25, 1.5, seed=args.seed)
    scores = {}
    for name, schedule in (
        ("logit", logit_schedule(200)),
        ("poly1", polynomial_schedule(200, 1)),
        ("poly7", polynomial_schedule(200, 7)),
    ):
        curve = calibrate(
            samples, schedule, 120.0, BoundaryCondition.PERIODIC, args.seed, data_range=1.0, threads=args.threads
        )
        scores[name] = unevenness(curve)
    ok = scores["logit"] < scores["poly1"] and scores["logit"] < scores["poly7"]
    return ok, ", ".join(f"{k}={v:.3f}" for k, v in scores.items())


def check_gradients(args: argparse.Namespace) -> Result:
    rng = derive_rng(args.seed, "gradients")
    grid = IntensityGrid(values=rng.integers(0, 6, size=(6, 6, 1)))
    truth = RateField(values=rng.uniform(0.2, 2.0, size=(4, 6, 6, 1)))
    worst = 0.0
    for kind in ("l1", "likelihood"):
        torch.manual_seed(args.seed)
        model = ToyConvModel(channels=1, hidden=4)
        _, grads = backward_pass(model, grid, 0.4, kind, truth, 0.05)
        h = 1e-5
        for name, param in model.named_parameters():
            flat = param.data.view(-1)
            for index in range(flat.numel()):
                original = flat[index].item()
                flat[index] = original + h
                plus, _ = backward_pass(model, grid, 0.4, kind, truth, 0.05)
                flat[index] = original - h
                minus, _ = backward_pass(model, grid, 0.4, kind, truth, 0.05)
                flat[index] = original
                numeric = (plus - minus) / (2 * h)
                analytic = float(grads[name].reshape(-1)[index])
                scale = max(abs(analytic), abs(numeric), 1e-6)
                worst = max(worst, abs(numeric - analytic) / scale)
    return worst <= 1e-4, f"max relative gradient error {worst:.2e}"


def _trained_model(args: argparse.Namespace, blobs: List[IntensityGrid]) -> ToyConvModel:
    cfg = TrainConfig(
        loss="l1",
        learning_rate=0.01,
        batch_size=8,
        iterations=args.iters,
        seed=args.seed,
        schedule=logit_schedule(200),
        hidden=32,
        workers=args.threads,
        log_every=max(1, args.iters // 20),
    )
    model, _ = train(build_model(blobs, cfg), blobs, cfg, derive_rng(args.seed, "train"))
    return model


def check_end_to_end(args: argparse.Namespace) -> Result:
    count = 60 if args.quick else 500
    blobs = synth_blobs(16, 16, count, 0.25, 1.5, seed=args.seed)
    predictor = ToyPredictor(_trained_model(args, blobs))
    config = SamplerConfig(width=16, height=16, eps=0.15, totals=(64,))
    n = 20 if args.quick else 200
    images = generate_batch(lambda _: predictor, config, n, args.seed, args.threads)
    exact = all(img.total_intensity(0) / 256 == 0.25 for img in images)
    stacked = sum(stacked_pixels(img) for img in images)
    deviation = s2_deviation(images, blobs, 8, binarization=Binarization.CLIP)
    detail = f"mean intensity exact={exact}, stacked pixels {stacked}, S2 deviation {deviation:.4f}"
    return exact and deviation <= 0.03, detail


def check_inpainting(args: argparse.Namespace) -> Result:
    model = ToyConvModel(channels=1, hidden=4, width=16, height=16)
    model.zero_output()
    predictor = ToyPredictor(model)
    partial = synth_blobs(16, 16, 1, 0.25, 1.5, seed=args.seed)[0]
    mask = np.zeros((16, 16), dtype=bool)
    mask[:, :8] = True
    base = int(partial.values[~mask].sum()) or 10
    config = SamplerConfig(width=16, height=16, eps=0.15, totals=(1,))
    completions = []
    for total in (int(round(base * 0.85)), base, int(round(base * 1.15))):
        result = inpaint(predictor, partial, mask, (total,), config, derive_rng(args.seed, "inpaint"))
        if not np.array_equal(result.values[mask], partial.values[mask]):
            return False, "frozen region changed"
        if int(result.values[~mask].sum()) != total:
            return False, f"free region total {int(result.values[~mask].sum())} != {total}"
        completions.append(result)
    differ = completions[0] != completions[1] and completions[1] != completions[2]
    return differ, f"totals around {base} honoured, completions differ={differ}"


def check_non_negative(args: argparse.Namespace) -> Result:
    steps = 10_000 if args.quick else 100_000
    rng = derive_rng(args.seed, "adversarial")
    for step in range(steps):
        width, height, channels = (int(v) for v in rng.integers(1, 6, size=3))
        grid = IntensityGrid(values=rng.integers(0, 4, size=(width, height, channels)))
        scale = 10.0 ** rng.uniform(-3, 4)
        rates = rng.exponential(scale, size=(4, width, height, channels))
        rates[rng.random(rates.shape) < 0.3] = 0.0
        boundary = BoundaryCondition.PERIODIC if rng.random() < 0.5 else BoundaryCondition.NOFLUX
        stepped = tau_leap_step(grid, rates, float(rng.uniform(0, 1)), rng, boundary=boundary)
        if np.any(stepped.values < 0) or stepped.totals() != grid.totals():
            return False, f"step {step} broke occupancy"
    return True, f"{steps} adversarial leaps"


CHECKS: Dict[str, Callable[[argparse.Namespace], Result]] = {
    "conservation": check_conservation,
    "kernel": check_kernel,
    "reconstruction": check_reconstruction,
    "loss": check_loss,
    "schedule": check_schedule,
    "gradients": check_gradients,
    "end-to-end": check_end_to_end,
    "inpainting": check_inpainting,
    "non-negative": check_non_negative,
}


def main(argv: Optional[List[str]] = None) -> int:
    parser = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    parser.add_argument("--only", nargs="+", choices=sorted(CHECKS), default=None)
    parser.add_argument("--quick", action="store_true", help="reduced trial counts")
    parser.add_argument("--seed", type=int, default=0)
    parser.add_argument("--threads", type=int, default=1)
    parser.add_argument("--iters", type=int, default=50_000, help="training iterations for end-to-end")
    parser.add_argument("--log-level", default="WARNING")
    args = parser.parse_args(argv)

    configure(log_level=args.log_level, threads=args.threads)
    setup_logging()
    if args.quick and args.iters == 50_000:
        args.iters = 2_000

    print("Discrete spatial diffusion acceptance")
    print("=" * 50)
    failures = 0
    for name in args.only or list(CHECKS):
        started = time.perf_counter()
        passed, detail = CHECKS[name](args)
        elapsed = time.perf_counter() - started
        failures += not passed
        print(f"{'✓' if passed else '✗'} {name:<15} {detail} ({elapsed:.1f}s)")

    print("=" * 50)
    print("All checks passed" if not failures else f"{failures} check(s) failed")
    return 0 if not failures else 1


if __name__ == "__main__":
    sys.exit(main())
