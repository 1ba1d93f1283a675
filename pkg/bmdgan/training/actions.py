import logging
import math
import os
from dataclasses import dataclass
from pathlib import Path
from typing import List, Optional, Sequence, Tuple

import numpy as np
import torch
from pydantic import BaseModel

from ..errors import ConfigError, InvalidArgument, TrainingDiverged
from ..gan.actions import (
    GeneratorCheckpoint,
    RegressionCheckpoint,
    build_discriminators,
    build_generator,
    build_regressor,
    images_to_batch,
    parameter_checksum,
    save_checkpoint,
    tensor_to_image,
)
from ..gan.data import (
    CheckpointSidecar,
    DiscriminatorConfig,
    GeneratorConfig,
    RegressionSidecar,
)
from ..gan.models import Generator, MultiscaleDiscriminator, patch_output_size
from ..imaging.actions import apply_normalization, from_normalized, write_image
from ..imaging.data import HierarchyStage, Image2D, ImagePair, Split
from ..imaging.store import CaseStore
from ..losses.actions import (
    adversarial_loss_d,
    adversarial_loss_g,
    feature_matching_loss,
    gradient_correlation_loss,
    l1_loss,
    total_generator_objective,
)
from ..losses.data import LossReport, LossWeights
from ..metrics.actions import psnr, record_json
from ..utils.settings import (
    BMDGAN_DEVICE,
    CHECKPOINT_FILENAME_TEMPLATE,
    PROGRESS_DIRNAME,
    TRAIN_LOG_FILENAME,
)
from ..version import BMDGAN_VERSION
from .augment import apply_affine, augment_pair, sample_affine
from .data import (
    BASELINE_STREAM,
    BaselineConfig,
    BaselineEpochRecord,
    EpochRecord,
    StageConfig,
    StageName,
    StepRecord,
)
from .schedules import stage_lr

logger = logging.getLogger(__name__)

ADAM_BETAS = (0.5, 0.999)
# Discriminator seeds are offset from the generator seed of the same stage
DISCRIMINATOR_SEED_OFFSET = 1


@dataclass
class TrainingContext:
    """
    Everything a training stage needs besides its StageConfig.
    """

    store: CaseStore
    manifest_hash: str
    generator_config: GeneratorConfig
    discriminator_config: DiscriminatorConfig
    loss_weights: LossWeights
    out_dir: Path
    seed: int = 0
    hierarchical: bool = True
    warm_start_discriminators: bool = False
    config_hash: Optional[str] = None
    device: str = BMDGAN_DEVICE
    log_path: Optional[Path] = None

    @property
    def train_log_path(self) -> Path:
        return self.log_path if self.log_path is not None else self.out_dir / TRAIN_LOG_FILENAME


def checkpoint_path(out_dir: Path, stage_number: int) -> Path:
    return Path(out_dir) / CHECKPOINT_FILENAME_TEMPLATE.format(stage=stage_number)


def append_record(path: Path, record: BaseModel) -> None:
    with open(path, "a", encoding="utf-8") as ofp:
        ofp.write(record_json(record, indent=None))
        ofp.write("\n")


def set_requires_grad(module: torch.nn.Module, requires_grad: bool) -> None:
    for parameter in module.parameters():
        parameter.requires_grad_(requires_grad)


def load_stage_pairs(store: CaseStore, stage: HierarchyStage) -> List[ImagePair]:
    """
    NORMALIZED (x-ray, target) pairs of the TRAIN split, in id order.
    """
    manifest = store.manifest
    pairs = []
    for entry in sorted(store.entries(Split.TRAIN), key=lambda entry: entry.id):
        pair = store.pair(entry, stage)
        pairs.append(
            ImagePair(
                id=pair.id,
                xray=apply_normalization(pair.xray, manifest.xray_normalization),
                target=apply_normalization(pair.target, manifest.normalization),
                stage=pair.stage,
                side=pair.side,
            )
        )
    return pairs


def epoch_rng(seed: int, stage_number: int, epoch: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([seed, stage_number, epoch]))


def batch_rng(seed: int, stage_number: int, epoch: int, batch: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([seed, stage_number, epoch, batch + 1]))


def epoch_batches(n_items: int, batch_size: int, rng: np.random.Generator) -> List[np.ndarray]:
    order = rng.permutation(n_items)
    return [order[start : start + batch_size] for start in range(0, n_items, batch_size)]


def check_stage_preconditions(
    stage_config: StageConfig,
    context: TrainingContext,
    init_generator: Optional[Generator],
    resume: Optional[GeneratorCheckpoint] = None,
) -> None:
    """
    Raises ConfigError for anything that would make the stage fail after it started.
    """
    stage_key = "stage1" if stage_config.stage == StageName.STAGE1 else "stage2"
    if not context.store.entries(Split.TRAIN):
        raise ConfigError(stage_key, "the manifest has no TRAIN cases")
    if (
        stage_config.stage == StageName.STAGE2
        and context.hierarchical
        and init_generator is None
        and resume is None
    ):
        raise ConfigError(
            "hierarchical",
            "stage 2 with hierarchical learning needs the stage 1 generator; "
            "pass --init or disable hierarchical learning (--no-hl)",
        )
    if init_generator is not None and init_generator.config != context.generator_config:
        raise ConfigError("generator", "the initial generator was built with a different config")
    if resume is not None and (
        resume.sidecar.generator_config != context.generator_config
        or resume.sidecar.discriminator_config != context.discriminator_config
    ):
        raise ConfigError("resume", "checkpoint networks were built with a different config")

    canvas = context.store.manifest.canvas
    multiple = context.generator_config.size_multiple
    if canvas.width % multiple != 0 or canvas.height % multiple != 0:
        raise ConfigError(
            "generator.n_downsamples",
            f"canvas {canvas.width}x{canvas.height} is not divisible by 2^n_downsamples = {multiple}",
        )
    quarter = min(canvas.width, canvas.height) // 4
    if patch_output_size(quarter, context.discriminator_config.n_layers) < 1:
        raise ConfigError(
            "discriminator.n_layers",
            f"canvas {canvas.width}x{canvas.height} is too small for three discriminator scales",
        )


def initial_generator(
    stage_config: StageConfig,
    context: TrainingContext,
    init_generator: Optional[Generator] = None,
) -> Generator:
    """
    Fresh generator for the stage, carrying the parameters of init_generator when given.
    """
    seed = stage_seed(stage_config, context)
    generator = build_generator(context.generator_config, seed=seed)
    if init_generator is not None:
        generator.load_state_dict(init_generator.state_dict())
    return generator.to(context.device)


def stage_seed(stage_config: StageConfig, context: TrainingContext) -> int:
    return stage_config.rng_seed if stage_config.rng_seed is not None else context.seed


def validation_psnr(
    generator: Generator, pairs: Sequence[ImagePair], context: TrainingContext
) -> Tuple[float, Optional[Image2D]]:
    """
    Mean PSNR of the generator on the tracking pairs, in quantitative units with the target
    normalization scale as data range. Also returns the first prediction.
    """
    normalization = context.store.manifest.normalization
    generator.eval()
    values = []
    first = None
    with torch.no_grad():
        for pair in pairs:
            output = generator(images_to_batch([pair.xray], device=context.device))
            predicted = from_normalized(
                tensor_to_image(output[0, 0]), normalization.scale, normalization.offset
            )
            truth = from_normalized(pair.target, normalization.scale, normalization.offset)
            values.append(psnr(predicted, truth, normalization.scale))
            if first is None:
                first = predicted
    generator.train()
    return float(np.mean(values)), first


def _check_finite(value: torch.Tensor, what: str, stage: int, epoch: int, step: int) -> None:
    if not torch.isfinite(value).all():
        raise TrainingDiverged(
            f"Non-finite {what} at stage {stage}, epoch {epoch}, step {step}; "
            f"the last good checkpoint is kept"
        )


def train_stage(
    stage_config: StageConfig,
    context: TrainingContext,
    init_generator: Optional[Generator] = None,
    init_discriminators: Optional[MultiscaleDiscriminator] = None,
    resume: Optional[GeneratorCheckpoint] = None,
) -> GeneratorCheckpoint:
    """
    Adversarial training of one hierarchy stage. Every batch runs a discriminator step on
    (x-ray, fake) and (x-ray, target), then a generator step on the full objective. A checkpoint is
    written after every epoch.
    """
    check_stage_preconditions(stage_config, context, init_generator, resume)
    number = stage_config.number
    seed = stage_seed(stage_config, context)
    weights = context.loss_weights

    pairs = load_stage_pairs(context.store, stage_config.target_stage)
    tracking = pairs[: stage_config.tracking_cases]

    generator = initial_generator(stage_config, context, init_generator)
    discriminators = build_discriminators(
        context.discriminator_config, seed=seed + DISCRIMINATOR_SEED_OFFSET
    ).to(context.device)
    if init_discriminators is not None and context.warm_start_discriminators:
        discriminators.load_state_dict(init_discriminators.state_dict())

    optimizer_g = torch.optim.AdamW(
        generator.parameters(),
        lr=stage_config.lr_initial,
        betas=ADAM_BETAS,
        weight_decay=stage_config.weight_decay,
    )
    optimizer_d = torch.optim.AdamW(
        discriminators.parameters(),
        lr=stage_config.lr_initial,
        betas=ADAM_BETAS,
        weight_decay=stage_config.weight_decay,
    )

    start_epoch = 0
    if resume is not None:
        if resume.sidecar.stage != number:
            raise ConfigError(
                "resume", f"checkpoint is from stage {resume.sidecar.stage}, not stage {number}"
            )
        generator.load_state_dict(resume.generator.state_dict())
        if resume.discriminators is not None:
            discriminators.load_state_dict(resume.discriminators.state_dict())
        if resume.optimizer_g_state is not None:
            optimizer_g.load_state_dict(resume.optimizer_g_state)
        if resume.optimizer_d_state is not None:
            optimizer_d.load_state_dict(resume.optimizer_d_state)
        start_epoch = resume.sidecar.epoch
        logger.info(f"Resuming stage {number} after epoch {start_epoch}")

    logger.info(
        f"Stage {number}: {len(pairs)} TRAIN pairs, {stage_config.epochs} epochs, initial generator "
        f"checksum {parameter_checksum(generator)[:12]}"
    )

    out_dir = Path(context.out_dir)
    os.makedirs(out_dir, exist_ok=True)
    progress_dir = out_dir / PROGRESS_DIRNAME
    ckpt_path = checkpoint_path(out_dir, number)
    checkpoint: Optional[GeneratorCheckpoint] = resume

    generator.train()
    discriminators.train()
    n_batches = math.ceil(len(pairs) / stage_config.batch_size)
    for epoch in range(start_epoch, stage_config.epochs):
        lr = stage_lr(stage_config, epoch)
        for optimizer in (optimizer_g, optimizer_d):
            for group in optimizer.param_groups:
                group["lr"] = lr

        batches = epoch_batches(len(pairs), stage_config.batch_size, epoch_rng(seed, number, epoch))
        for batch_index, indices in enumerate(batches):
            step = epoch * n_batches + batch_index
            rng = batch_rng(seed, number, epoch, batch_index)
            batch = [augment_pair(pairs[i], stage_config.augment, rng) for i in indices]
            xray = images_to_batch([pair.xray for pair in batch], device=context.device)
            target = images_to_batch([pair.target for pair in batch], device=context.device)

            fake = generator(xray)

            # Discriminator step
            real_outputs = discriminators(xray, target)
            fake_outputs = discriminators(xray, fake.detach())
            loss_d = adversarial_loss_d(
                [score for score, _ in real_outputs],
                [score for score, _ in fake_outputs],
                weights.gan_mode,
                scale_reduction="sum",
            )
            _check_finite(loss_d, "discriminator loss", number, epoch, step)
            optimizer_d.zero_grad()
            loss_d.backward()
            optimizer_d.step()

            # Generator step
            set_requires_grad(discriminators, False)
            fake_outputs = discriminators(xray, fake)
            with torch.no_grad():
                real_outputs = discriminators(xray, target)
            gan_g = adversarial_loss_g(
                [score for score, _ in fake_outputs], weights.gan_mode, scale_reduction="sum"
            )
            fm = feature_matching_loss(
                [features for _, features in real_outputs],
                [features for _, features in fake_outputs],
            )
            l1 = l1_loss(fake, target)
            gc = gradient_correlation_loss(fake, target, literal_sign=weights.gc_literal_sign)
            total_g = total_generator_objective(weights, gan_g, fm, l1, gc)
            _check_finite(total_g, "generator loss", number, epoch, step)
            optimizer_g.zero_grad()
            total_g.backward()
            optimizer_g.step()
            set_requires_grad(discriminators, True)

            report = LossReport(
                gan_g=float(gan_g),
                gan_d=float(loss_d),
                fm=float(fm),
                l1=float(l1),
                gc=float(gc),
                total_g=float(total_g),
            )
            append_record(
                context.train_log_path,
                StepRecord(stage=number, epoch=epoch, step=step, lr=lr, **report.dict()),
            )
            logger.debug(f"Stage {number} epoch {epoch} step {step}: {report.json()}")

        val_psnr, snapshot = validation_psnr(generator, tracking, context)
        append_record(
            context.train_log_path,
            EpochRecord(stage=number, epoch=epoch, lr=lr, val_psnr=val_psnr),
        )
        logger.info(f"Stage {number} epoch {epoch + 1}/{stage_config.epochs}: val PSNR {val_psnr:.2f} dB")
        if (
            snapshot is not None
            and stage_config.snapshot_every > 0
            and (epoch + 1) % stage_config.snapshot_every == 0
        ):
            os.makedirs(progress_dir, exist_ok=True)
            write_image(
                snapshot,
                progress_dir / f"stage{number}_epoch{epoch + 1:03d}_{tracking[0].id}.bdr2",
            )

        checkpoint = GeneratorCheckpoint(
            sidecar=CheckpointSidecar(
                stage=number,
                epoch=epoch + 1,
                generator_config=context.generator_config,
                discriminator_config=context.discriminator_config,
                loss_weights=weights,
                rng_seed=seed,
                manifest_hash=context.manifest_hash,
                config_hash=context.config_hash,
                hierarchical=context.hierarchical,
                bmdgan_version=BMDGAN_VERSION,
            ),
            generator=generator,
            discriminators=discriminators,
            optimizer_g_state=optimizer_g.state_dict(),
            optimizer_d_state=optimizer_d.state_dict(),
        )
        save_checkpoint(checkpoint, ckpt_path)

    if checkpoint is None:
        raise InvalidArgument(f"Stage {number} has no epochs left to train")
    return checkpoint


def run_hierarchical(
    stage1_config: StageConfig,
    stage2_config: StageConfig,
    context: TrainingContext,
) -> Tuple[Optional[GeneratorCheckpoint], GeneratorCheckpoint]:
    """
    Stage 1 on whole-bone targets, then stage 2 on proximal targets warm-started from the stage 1
    generator. Without hierarchical learning stage 1 is skipped and stage 2 starts from scratch.
    """
    if not context.hierarchical:
        logger.info("Hierarchical learning disabled: training stage 2 from scratch")
        return None, train_stage(stage2_config, context)

    stage1 = train_stage(stage1_config, context)
    logger.info(
        f"Warm-starting stage 2 from stage 1 generator "
        f"{parameter_checksum(stage1.generator)[:12]}"
    )
    stage2 = train_stage(
        stage2_config,
        context,
        init_generator=stage1.generator,
        init_discriminators=stage1.discriminators,
    )
    return stage1, stage2


def train_regression_baseline(
    store: CaseStore,
    epochs: int,
    rng_seed: int,
    config: Optional[BaselineConfig] = None,
    manifest_hash: str = "",
    config_hash: Optional[str] = None,
    device: str = BMDGAN_DEVICE,
    log_path: Optional[Path] = None,
) -> RegressionCheckpoint:
    """
    Direct x-ray to DXA-BMD regression with a mean squared error loss on standardized targets.
    """
    if config is None:
        config = BaselineConfig()
    entries = sorted(store.entries(Split.TRAIN), key=lambda entry: entry.id)
    if not entries:
        raise ConfigError("baseline", "the manifest has no TRAIN cases")
    if epochs < 1:
        raise ConfigError("baseline.epochs", f"must be at least 1, got {epochs}")

    xray_normalization = store.manifest.xray_normalization
    xrays = [apply_normalization(store.xray(entry), xray_normalization) for entry in entries]
    targets = np.array([entry.true_dxa_bmd for entry in entries], dtype=np.float64)
    target_mean = float(targets.mean())
    target_std = float(targets.std())
    if target_std < 1e-12:
        target_std = 1.0
    standardized = (targets - target_mean) / target_std

    regressor = build_regressor(config.regressor, seed=rng_seed).to(device)
    optimizer = torch.optim.AdamW(
        regressor.parameters(), lr=config.lr, betas=ADAM_BETAS, weight_decay=config.weight_decay
    )
    regressor.train()
    for epoch in range(epochs):
        losses = []
        baseline_rng = epoch_rng(rng_seed, BASELINE_STREAM, epoch)
        batches = epoch_batches(len(xrays), config.batch_size, baseline_rng)
        for batch_index, indices in enumerate(batches):
            rng = batch_rng(rng_seed, BASELINE_STREAM, epoch, batch_index)
            images = [
                xrays[i].with_pixels(apply_affine(xrays[i].pixels, sample_affine(config.augment, rng)))
                for i in indices
            ]
            batch = images_to_batch(images, device=device)
            expected = torch.tensor(standardized[indices], dtype=torch.float32, device=device)
            loss = torch.mean((regressor(batch) - expected) ** 2)
            if not torch.isfinite(loss):
                raise TrainingDiverged(f"Non-finite baseline loss at epoch {epoch}")
            optimizer.zero_grad()
            loss.backward()
            optimizer.step()
            losses.append(float(loss))
        mse = float(np.mean(losses))
        if log_path is not None:
            append_record(log_path, BaselineEpochRecord(epoch=epoch, lr=config.lr, mse=mse))
        logger.debug(f"Baseline epoch {epoch + 1}/{epochs}: MSE {mse:.5f}")

    sidecar = RegressionSidecar(
        epoch=epochs,
        regressor_config=config.regressor,
        target_mean=target_mean,
        target_std=target_std,
        rng_seed=rng_seed,
        manifest_hash=manifest_hash,
        config_hash=config_hash,
        bmdgan_version=BMDGAN_VERSION,
    )
    return RegressionCheckpoint(sidecar=sidecar, regressor=regressor)
