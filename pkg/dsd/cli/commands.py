"""Subcommand handlers.

Every handler takes the parsed argparse namespace, writes its artefacts,
prints a short report on stdout and returns the process exit code.
Randomness flows from ``--seed`` through keyed streams only.
"""

import argparse
from pathlib import Path
from typing import List, Optional, Sequence, Tuple

import numpy as np

from ..core.config import get_settings
from ..core.errors import DataError, UsageError
from ..core.logging import get_logger
from ..core.rng import derive_rng
from ..models.configs import SamplerConfig, TrainConfig
from ..models.lattice import BoundaryCondition, IntensityGrid, ParticleLedger
from ..models.schedule import Schedule
from ..services.dataset import load_dir_with_maxval, save_dir, totals_at_quantiles
from ..services.forward import corrupt_at_step
from ..services.kernel import dump_kernel, kernel_for, max_row_deviation
from ..services.lattice_io import load_image, load_ledger, save_image, save_ledger
from ..services.metrics import (
    Binarization,
    conservation_audit,
    intensity_drift_percent,
    mean_two_point_correlation,
    porosity,
    s2_deviation,
    stacked_pixels,
    totals_audit,
    write_s2_csv,
)
from ..services.rate_model import (
    OraclePredictor,
    RatePredictor,
    ToyPredictor,
    load_checkpoint,
    save_checkpoint,
)
from ..services.sampler import TraceRow, generate, generate_batch, inpaint, write_trace
from ..services.schedule import calibrate, curve_summary, parse_schedule_spec
from ..services.training import build_model, train, write_history

logger = get_logger(__name__)


def parse_totals(text: Optional[str]) -> Optional[Tuple[int, ...]]:
    """``"64"`` or ``"100,80,120"`` -> per-channel totals."""
    if text is None:
        return None
    try:
        totals = tuple(int(part) for part in text.split(",") if part.strip())
    except ValueError as e:
        raise UsageError(f"Totals must be comma-separated integers, got {text!r}") from e
    if not totals or any(n < 0 for n in totals):
        raise UsageError(f"Totals must be non-negative integers, got {text!r}")
    return totals


def schedule_from_args(args: argparse.Namespace) -> Schedule:
    """Schedule from ``--schedule`` with missing fields taken from flags or settings."""
    settings = get_settings()
    return parse_schedule_spec(
        args.schedule,
        T=args.T if args.T is not None else settings.steps,
        tau1=args.tau1 if args.tau1 is not None else settings.tau1,
        tau2=args.tau2 if args.tau2 is not None else settings.tau2,
        n=args.n,
    )


def _rate(args: argparse.Namespace) -> float:
    return args.rate if args.rate is not None else get_settings().rate


def _eps(args: argparse.Namespace) -> float:
    return args.eps if args.eps is not None else get_settings().eps


def _require_dataset_with_maxval(path: Path) -> Tuple[List[IntensityGrid], int]:
    grids, maxval = load_dir_with_maxval(path)
    if not grids:
        raise DataError(f"No images found in {path}")
    return grids, maxval


def _require_dataset(path: Path) -> List[IntensityGrid]:
    return _require_dataset_with_maxval(path)[0]


def cmd_kernel(args: argparse.Namespace) -> int:
    """Dump a transition kernel and report its worst row-sum deviation."""
    kernel = kernel_for(args.boundary, args.width, args.height, _rate(args), args.time)
    dump_kernel(kernel, args.out)
    deviation = max_row_deviation(kernel)
    logger.info("Kernel written", path=str(args.out), boundary=kernel.boundary.value, time=args.time)
    print(f"max_row_deviation={deviation:.3e}")
    return 0


def cmd_corrupt(args: argparse.Namespace) -> int:
    """Corrupt one image to t_k and print the conservation audit."""
    grid = load_image(args.input)
    if args.k == 0:
        corrupted, ledger = grid, ParticleLedger.from_grid(grid)
    else:
        schedule = schedule_from_args(args)
        rng = derive_rng(args.seed, "corrupt")
        try:
            corrupted, ledger, _ = corrupt_at_step(grid, schedule, args.k, _rate(args), args.boundary, rng)
        except IndexError as e:
            raise UsageError(str(e)) from e

    save_image(corrupted, args.out)
    if args.ledger_out is not None:
        save_ledger(ledger, args.ledger_out)
    drift = intensity_drift_percent(grid, corrupted)
    logger.info("Corrupted image", k=args.k, drift_percent=[float(d) for d in drift])
    for line in conservation_audit(grid, corrupted).lines():
        print(line)
    return 0


def cmd_calibrate(args: argparse.Namespace) -> int:
    """Write the mean SSIM degradation curve of a schedule over a dataset."""
    samples, maxval = _require_dataset_with_maxval(args.data)
    data_range = args.data_range if args.data_range is not None else float(maxval)
    if args.samples is not None:
        samples = samples[: args.samples]
    schedule = schedule_from_args(args)
    curve = calibrate(
        samples,
        schedule,
        _rate(args),
        args.boundary,
        seed=args.seed,
        data_range=data_range,
        threads=get_settings().threads,
    )
    curve.to_csv(args.out)
    if args.schedule_out is not None:
        schedule.to_csv(args.schedule_out)
    final, uneven = curve_summary(curve)
    print(f"final_ssim={final:.6f} unevenness={uneven:.4f} data_range={data_range:g}")
    return 0


def cmd_train(args: argparse.Namespace) -> int:
    """Train the toy rate model and write its checkpoint."""
    dataset = _require_dataset(args.data)
    cfg = TrainConfig(
        loss=args.loss,
        learning_rate=args.lr,
        batch_size=args.batch,
        iterations=args.iters,
        seed=args.seed,
        schedule=schedule_from_args(args),
        rate=_rate(args),
        boundary=args.boundary,
        dataset_path=args.data,
        hidden=args.hidden,
        workers=get_settings().threads,
        log_every=args.log_every,
    )
    model = build_model(dataset, cfg)
    model, history = train(model, dataset, cfg, derive_rng(args.seed, "train"))

    save_checkpoint(model, args.ckpt_out)
    if args.history_out is not None:
        write_history(history, args.history_out)
    print(f"final_loss={history[-1].loss:.6g} iterations={len(history)}")
    return 0


def _trace_path(base: Path, index: int, count: int) -> Path:
    if count == 1:
        return base
    return base.with_name(f"{base.stem}_{index:05d}{base.suffix}")


def _quantile_totals(path: Path, quantile: float) -> Tuple[int, ...]:
    dataset = _require_dataset(path)
    totals = tuple(
        totals_at_quantiles(dataset, [quantile], channel=c)[0] for c in range(dataset[0].channels)
    )
    logger.info("Totals from dataset quantile", path=str(path), quantile=quantile, totals=totals)
    return totals


def cmd_generate(args: argparse.Namespace) -> int:
    """Sample images with exact totals from a checkpoint or a ledger oracle."""
    totals = parse_totals(args.totals)
    if args.totals_from is not None:
        if totals is not None:
            raise UsageError("Pass either --totals or --totals-from, not both")
        totals = _quantile_totals(args.totals_from, args.quantile)
    settings = get_settings()

    if args.ckpt is not None:
        model = load_checkpoint(args.ckpt)
        width = args.width or model.width
        height = args.height or model.height
        if not (width and height):
            raise UsageError("Checkpoint has no training size; pass --width and --height")
        if totals is None:
            raise UsageError("--totals or --totals-from is required with --ckpt")
        boundary = model.boundary
        predictor = ToyPredictor(model)

        def make_predictor(_: int) -> RatePredictor:
            return predictor

    else:
        ledger = load_ledger(args.oracle_ledger)
        clean = ledger.histogram("origin")
        width, height = clean.width, clean.height
        if totals is not None and totals != clean.totals():
            raise UsageError(f"--totals {totals} differ from the ledger's totals {clean.totals()}")
        totals = clean.totals()
        boundary = BoundaryCondition(args.boundary)

        def make_predictor(_: int) -> RatePredictor:
            return OraclePredictor.from_clean(clean, _rate(args), boundary)

    config = SamplerConfig(
        width=width,
        height=height,
        eps=_eps(args),
        boundary=boundary,
        rate=_rate(args),
        totals=totals,
        max_steps=args.max_steps or settings.max_steps,
    )

    if args.trace is None:
        images = generate_batch(make_predictor, config, args.n, args.seed, settings.threads)
    else:
        images = []
        for i in range(args.n):
            trace: List[TraceRow] = []
            rng = derive_rng(args.seed, "generate", i)
            images.append(generate(make_predictor(i), config, rng, trace))
            write_trace(trace, _trace_path(Path(args.trace), i, args.n))

    paths = save_dir(images, args.out)
    failed = [p.name for p, img in zip(paths, images) if not totals_audit(img, totals).passed]
    print(f"generated={len(images)} totals={','.join(map(str, totals))} eps={config.eps}")
    if failed:
        raise DataError(f"Totals not conserved in {failed}")
    return 0


def cmd_inpaint(args: argparse.Namespace) -> int:
    """Regenerate the unfrozen region of an image with exact region totals."""
    partial = load_image(args.partial)
    mask_grid = load_image(args.mask)
    if (mask_grid.width, mask_grid.height) != (partial.width, partial.height):
        raise DataError(
            f"Mask is {mask_grid.width}x{mask_grid.height}, partial image is {partial.width}x{partial.height}"
        )
    frozen = mask_grid.values.any(axis=2)
    region_totals = parse_totals(args.region_totals)

    model = load_checkpoint(args.ckpt)
    config = SamplerConfig(
        width=partial.width,
        height=partial.height,
        eps=_eps(args),
        boundary=model.boundary,
        rate=_rate(args),
        totals=region_totals,
        max_steps=args.max_steps or get_settings().max_steps,
    )
    result = inpaint(
        ToyPredictor(model), partial, frozen, region_totals, config, derive_rng(args.seed, "inpaint")
    )
    save_image(result, args.out)
    free_totals = tuple(int(result.values[~frozen][:, c].sum()) for c in range(result.channels))
    print(f"frozen_pixels={int(frozen.sum())} region_totals={','.join(map(str, free_totals))}")
    return 0


def _default_lag(grids: Sequence[IntensityGrid]) -> int:
    return min(grids[0].width, grids[0].height) // 2


def cmd_metrics(args: argparse.Namespace) -> int:
    """Report totals, stacking, porosity and S2 of a generated set."""
    generated = _require_dataset(args.generated)
    max_lag = args.max_lag if args.max_lag is not None else _default_lag(generated)

    expected = parse_totals(args.totals)
    if expected is not None:
        audits = [totals_audit(g, expected) for g in generated]
        passed = sum(a.passed for a in audits)
        print(f"conservation: {passed}/{len(audits)} images match totals {','.join(map(str, expected))}")

    mode = Binarization(args.binarize)
    stacked = [stacked_pixels(g) for g in generated]
    print(f"stacked_pixels={sum(stacked)} images_with_stacking={sum(n > 0 for n in stacked)}/{len(stacked)}")

    phis = np.array([porosity(g, mode) for g in generated])
    profile = mean_two_point_correlation(generated, max_lag, args.boundary, mode)
    write_s2_csv(profile, args.out)
    print(f"porosity_mean={phis.mean():.6f} porosity_min={phis.min():.6f} porosity_max={phis.max():.6f}")

    if args.reference is not None:
        reference = _require_dataset(args.reference)
        deviation = s2_deviation(generated, reference, max_lag, args.boundary, mode)
        ref_phi = float(np.mean([porosity(g, mode) for g in reference]))
        print(f"reference_porosity={ref_phi:.6f} s2_deviation={deviation:.6f}")
    return 0
