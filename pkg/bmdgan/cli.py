"""
bmdgan command line interface
"""
import argparse
import logging
import os
import sys
from pathlib import Path
from typing import Dict, List, Optional

import torch
from pydantic import ValidationError

from .bmd.actions import (
    fit_bmd_calibration,
    masked_average,
    predict_bmd,
    predict_pf_drr,
    read_calibration,
    write_calibration,
)
from .data import RunConfig
from .errors import (
    ConfigError,
    ImageFormatError,
    InvalidArgument,
    SingularFitError,
    TrainingDiverged,
)
from .gan.actions import (
    GeneratorCheckpoint,
    load_checkpoint,
    load_regression_checkpoint,
    save_regression_checkpoint,
)
from .imaging.actions import ManifestPathNotFound, apply_normalization, manifest_hash
from .imaging.data import HierarchyStage, Split
from .imaging.store import CaseStore
from .metrics.actions import evaluate_run, record_json
from .metrics.data import CasePrediction, CaseTruth, PredictionsDump
from .metrics.plots import write_plots
from .phantom.actions import generate_dataset
from .training.actions import (
    TrainingContext,
    checkpoint_path,
    run_hierarchical,
    train_regression_baseline,
    train_stage,
)
from .utils.confparse import config_hash, parse_config
from .utils.settings import (
    BASELINE_CHECKPOINT_FILENAME,
    BMDGAN_DEBUG,
    BMDGAN_DEVICE,
    BMDGAN_TORCH_THREADS,
    CALIBRATION_FILENAME,
    MANIFEST_FILENAME,
    PLOTS_DIRNAME,
    PREDICTIONS_FILENAME,
    REPORT_FILENAME,
    THREAD_WORKERS,
    TRAIN_LOG_FILENAME,
)
from .version import BMDGAN_VERSION

logger = logging.getLogger(__name__)

LOG_FORMAT = "[%(levelname)s] %(name)s (Source: %(pathname)s:%(lineno)d, Time: %(asctime)s) - %(message)s"

EXIT_CONFIG_ERROR = 2
EXIT_IO_ERROR = 3
EXIT_TRAINING_DIVERGED = 4
EXIT_SINGULAR_FIT = 5


def configure_logging() -> None:
    level = logging.DEBUG if BMDGAN_DEBUG else logging.INFO
    logging.basicConfig(format=LOG_FORMAT, level=level)


def load_run_config(args: argparse.Namespace) -> RunConfig:
    config = parse_config(args.config)
    if getattr(args, "out_dir", None) is not None:
        paths = config.paths.copy(update={"out_dir": Path(args.out_dir)})
        config = config.copy(update={"paths": paths})
    return config


def resolve_manifest(args: argparse.Namespace, config: RunConfig) -> Path:
    if getattr(args, "manifest", None) is not None:
        return Path(args.manifest)
    return config.paths.dataset_dir / MANIFEST_FILENAME


def open_store(args: argparse.Namespace, config: RunConfig) -> CaseStore:
    path = resolve_manifest(args, config)
    if not path.is_file():
        raise FileNotFoundError(f"Manifest not found: {path}; run bmdgan synth first")
    return CaseStore.from_manifest_path(path)


def out_dir(config: RunConfig) -> Path:
    path = config.paths.out_dir
    os.makedirs(path, exist_ok=True)
    return path


def load_stage2_checkpoint(path: Path) -> GeneratorCheckpoint:
    checkpoint = load_checkpoint(path, device=BMDGAN_DEVICE)
    if checkpoint.sidecar.stage != 2:
        raise ConfigError(
            "ckpt", f"{path} is a stage {checkpoint.sidecar.stage} checkpoint, expected stage 2"
        )
    return checkpoint


def synth_handler(args: argparse.Namespace) -> None:
    """
    Handler for "bmdgan synth".
    """
    config = load_run_config(args)
    spec = config.require_phantom()
    dataset_dir = config.paths.dataset_dir
    generate_dataset(
        spec,
        n_cases=config.dataset.n_cases,
        split_fraction=config.dataset.split_fraction,
        rng_seed=config.seeds.data,
        out_dir=dataset_dir,
        dataset=config.dataset,
        threshold_t=config.bmd.threshold_t,
        config_hash=config_hash(config),
        workers=THREAD_WORKERS,
    )
    print(dataset_dir / MANIFEST_FILENAME)


def train_handler(args: argparse.Namespace) -> None:
    """
    Handler for "bmdgan train".
    """
    config = load_run_config(args)
    store = open_store(args, config)
    hierarchical = config.hierarchical and not args.no_hl
    context = TrainingContext(
        store=store,
        manifest_hash=manifest_hash(resolve_manifest(args, config)),
        generator_config=config.generator,
        discriminator_config=config.discriminator,
        loss_weights=config.loss,
        out_dir=out_dir(config),
        seed=config.seeds.train,
        hierarchical=hierarchical,
        warm_start_discriminators=config.warm_start_discriminators,
        config_hash=config_hash(config),
        device=BMDGAN_DEVICE,
    )

    resume = None
    if args.resume is not None:
        resume = load_checkpoint(args.resume, device=BMDGAN_DEVICE)

    if args.stage == "all":
        if resume is not None:
            raise ConfigError("resume", "--resume needs an explicit --stage")
        stage1, _ = run_hierarchical(config.stage1, config.stage2, context)
        if stage1 is not None:
            print(checkpoint_path(context.out_dir, 1))
        print(checkpoint_path(context.out_dir, 2))
        return

    if args.stage == "1":
        train_stage(config.stage1, context, resume=resume)
        print(checkpoint_path(context.out_dir, 1))
        return

    init_generator = None
    init_discriminators = None
    if args.init is not None:
        init = load_checkpoint(args.init, device=BMDGAN_DEVICE)
        if init.sidecar.stage != 1:
            raise ConfigError(
                "init", f"{args.init} is a stage {init.sidecar.stage} checkpoint, expected stage 1"
            )
        init_generator = init.generator
        init_discriminators = init.discriminators
    train_stage(
        config.stage2,
        context,
        init_generator=init_generator,
        init_discriminators=init_discriminators,
        resume=resume,
    )
    print(checkpoint_path(context.out_dir, 2))


def calibrate_handler(args: argparse.Namespace) -> None:
    """
    Handler for "bmdgan calibrate". Reads the TRAIN split only.
    """
    config = load_run_config(args)
    store = open_store(args, config)
    manifest = store.manifest
    ckpt = Path(args.ckpt) if args.ckpt is not None else checkpoint_path(config.paths.out_dir, 2)
    checkpoint = load_stage2_checkpoint(ckpt)

    samples = []
    for entry in sorted(store.entries(Split.TRAIN), key=lambda entry: entry.id):
        drr = predict_pf_drr(
            checkpoint.generator,
            store.xray(entry),
            manifest.xray_normalization,
            manifest.normalization,
        )
        average = masked_average(drr, config.bmd.threshold_t)
        if average.degenerate:
            logger.warning(f"Predicted PF-DRR of TRAIN case {entry.id} is degenerate")
        samples.append((average.value, entry.true_dxa_bmd, entry.true_qct_bmd))
    if Split.TEST in store.accessed_splits:
        raise InvalidArgument("Calibration read TEST cases")

    calibration = fit_bmd_calibration(
        samples,
        t=config.bmd.threshold_t,
        ref_mean=config.bmd.ref_mean,
        ref_sd=config.bmd.ref_sd,
        config_hash=config_hash(config),
        manifest_hash=manifest_hash(resolve_manifest(args, config)),
    )
    path = out_dir(config) / CALIBRATION_FILENAME
    write_calibration(calibration, path)
    print(path)


def evaluate_handler(args: argparse.Namespace) -> None:
    """
    Handler for "bmdgan evaluate".
    """
    config = load_run_config(args)
    torch.manual_seed(config.seeds.eval)
    store = open_store(args, config)
    manifest = store.manifest
    target_dir = out_dir(config)
    ckpt = Path(args.ckpt) if args.ckpt is not None else checkpoint_path(target_dir, 2)
    checkpoint = load_stage2_checkpoint(ckpt)
    calibration_path = (
        Path(args.calibration) if args.calibration is not None else target_dir / CALIBRATION_FILENAME
    )
    calibration = read_calibration(calibration_path)

    entries = sorted(store.entries(Split.TEST), key=lambda entry: entry.id)
    if not entries:
        raise ConfigError("dataset.split_fraction", "the manifest has no TEST cases")

    baseline_checkpoint = None
    if args.baseline is not None:
        baseline_checkpoint = load_regression_checkpoint(args.baseline, device=BMDGAN_DEVICE)

    predictions: Dict[str, CasePrediction] = {}
    ground_truth: Dict[str, CaseTruth] = {}
    baseline: Optional[Dict[str, float]] = {} if baseline_checkpoint is not None else None
    for entry in entries:
        xray = store.xray(entry)
        estimate, drr = predict_bmd(
            checkpoint, xray, calibration, manifest.xray_normalization, manifest.normalization
        )
        repeat_dxa = [
            predict_bmd(
                checkpoint, repeat, calibration, manifest.xray_normalization, manifest.normalization
            )[0].predicted_dxa_bmd
            for repeat in store.repeat_xrays(entry)
        ]
        predictions[entry.id] = CasePrediction(pred_drr=drr, estimate=estimate, repeat_dxa=repeat_dxa)
        ground_truth[entry.id] = CaseTruth(
            true_drr=store.target(entry, HierarchyStage.STAGE2_PROXIMAL),
            true_dxa=entry.true_dxa_bmd,
            true_qct=entry.true_qct_bmd,
            true_pf_average=entry.true_pf_average,
        )
        if baseline is not None and baseline_checkpoint is not None:
            baseline[entry.id] = baseline_checkpoint.predict(
                apply_normalization(xray, manifest.xray_normalization)
            )

    run_hash = config_hash(config)
    run_manifest_hash = manifest_hash(resolve_manifest(args, config))
    report = evaluate_run(
        predictions,
        ground_truth,
        config=config.eval,
        baseline=baseline,
        ref_mean=calibration.ref_mean,
        ref_sd=calibration.ref_sd,
        config_hash=run_hash,
        manifest_hash=run_manifest_hash,
    )

    with open(target_dir / PREDICTIONS_FILENAME, "w", encoding="utf-8") as ofp:
        dump = PredictionsDump(
            dice_thresholds=report.dice_thresholds,
            records=report.per_case_records,
            config_hash=run_hash,
            manifest_hash=run_manifest_hash,
        )
        ofp.write(record_json(dump))
        ofp.write("\n")
    report_path = target_dir / REPORT_FILENAME
    with open(report_path, "w", encoding="utf-8") as ofp:
        ofp.write(record_json(report, sort_keys=True))
        ofp.write("\n")
    if config.eval.plots:
        write_plots(report, target_dir / PLOTS_DIRNAME)

    logger.info(
        f"Evaluated {report.n_cases} TEST cases: PSNR {report.psnr_mean:.2f} dB, "
        f"Dice {report.dice_mean:.3f}, ICC {report.icc:.3f}, PCC {report.pcc:.3f}"
    )
    print(report_path)


def baseline_handler(args: argparse.Namespace) -> None:
    """
    Handler for "bmdgan baseline".
    """
    config = load_run_config(args)
    store = open_store(args, config)
    target_dir = out_dir(config)
    seed = config.baseline.rng_seed if config.baseline.rng_seed is not None else config.seeds.train
    checkpoint = train_regression_baseline(
        store,
        epochs=config.baseline.epochs,
        rng_seed=seed,
        config=config.baseline,
        manifest_hash=manifest_hash(resolve_manifest(args, config)),
        config_hash=config_hash(config),
        device=BMDGAN_DEVICE,
        log_path=target_dir / TRAIN_LOG_FILENAME,
    )
    path = save_regression_checkpoint(checkpoint, target_dir / BASELINE_CHECKPOINT_FILENAME)
    print(path)


def add_common_arguments(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("-c", "--config", required=True, help="Path to the TOML run config")
    parser.add_argument(
        "-o", "--out-dir", default=None, help="Override paths.out_dir of the run config"
    )


def add_manifest_argument(parser: argparse.ArgumentParser) -> None:
    parser.add_argument(
        "-m",
        "--manifest",
        default=None,
        help="Dataset manifest (default: <paths.data_dir>/manifest.json)",
    )


def make_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        description="Bone decomposition of radiographs and BMD estimation"
    )
    parser.add_argument("-v", "--version", action="version", version=BMDGAN_VERSION)
    parser.set_defaults(func=lambda _: parser.print_help())
    subcommands = parser.add_subparsers(description="bmdgan commands")

    parser_synth = subcommands.add_parser("synth", description="Generate a synthetic phantom dataset")
    add_common_arguments(parser_synth)
    parser_synth.set_defaults(func=synth_handler)

    parser_train = subcommands.add_parser("train", description="Train decomposition generators")
    add_common_arguments(parser_train)
    add_manifest_argument(parser_train)
    parser_train.add_argument(
        "-s", "--stage", choices=["1", "2", "all"], default="all", help="Stage(s) to train"
    )
    parser_train.add_argument(
        "--no-hl",
        action="store_true",
        help="Train stage 2 from scratch without hierarchical learning",
    )
    parser_train.add_argument(
        "--init", default=None, help="Stage 1 checkpoint to warm-start stage 2 from"
    )
    parser_train.add_argument(
        "--resume", default=None, help="Checkpoint of the same stage to continue training from"
    )
    parser_train.set_defaults(func=train_handler)

    parser_calibrate = subcommands.add_parser(
        "calibrate", description="Fit PF-DRR average to BMD lines on the TRAIN split"
    )
    add_common_arguments(parser_calibrate)
    add_manifest_argument(parser_calibrate)
    parser_calibrate.add_argument(
        "--ckpt", default=None, help="Stage 2 checkpoint (default: <out_dir>/ckpt_stage2.bin)"
    )
    parser_calibrate.set_defaults(func=calibrate_handler)

    parser_evaluate = subcommands.add_parser(
        "evaluate", description="Evaluate decomposition and BMD estimation on the TEST split"
    )
    add_common_arguments(parser_evaluate)
    add_manifest_argument(parser_evaluate)
    parser_evaluate.add_argument(
        "--ckpt", default=None, help="Stage 2 checkpoint (default: <out_dir>/ckpt_stage2.bin)"
    )
    parser_evaluate.add_argument(
        "--calibration",
        default=None,
        help="Calibration record (default: <out_dir>/calibration.json)",
    )
    parser_evaluate.add_argument(
        "--baseline", default=None, help="Direct regression checkpoint to compare against"
    )
    parser_evaluate.set_defaults(func=evaluate_handler)

    parser_baseline = subcommands.add_parser(
        "baseline", description="Train the direct x-ray to BMD regression baseline"
    )
    add_common_arguments(parser_baseline)
    add_manifest_argument(parser_baseline)
    parser_baseline.set_defaults(func=baseline_handler)

    return parser


def main(argv: Optional[List[str]] = None) -> None:
    configure_logging()
    if BMDGAN_TORCH_THREADS is not None:
        torch.set_num_threads(BMDGAN_TORCH_THREADS)

    parser = make_parser()
    args = parser.parse_args(argv)
    try:
        args.func(args)
    except ConfigError as e:
        logger.error(f"Config error: {e}")
        sys.exit(EXIT_CONFIG_ERROR)
    except (OSError, ImageFormatError, ManifestPathNotFound, ValidationError) as e:
        logger.error(f"I/O error: {e}")
        sys.exit(EXIT_IO_ERROR)
    except TrainingDiverged as e:
        logger.error(f"Training diverged: {e}")
        sys.exit(EXIT_TRAINING_DIVERGED)
    except SingularFitError as e:
        logger.error(f"Singular fit: {e}")
        sys.exit(EXIT_SINGULAR_FIT)
    except InvalidArgument as e:
        logger.error(f"Config error: {e}")
        sys.exit(EXIT_CONFIG_ERROR)


if __name__ == "__main__":
    main()
