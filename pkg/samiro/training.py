"""
Training schemes: masked-image pretraining of the oracle encoder and
fine-tuning of the lane model under a feature regulariser.

Randomness is split into independent streams spawned from the run seed:
model initialisation, regulariser initialisation, batch order and patch
masks. Switching the regulariser off therefore leaves every other draw
unchanged.
"""

import logging
import math
import os
from collections.abc import Callable, Iterator, Sequence
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from config import EvalConfig, LabConfig
from helpers.constants import ABLATION_SETTINGS, TAG_OCCLUSION
from helpers.exceptions import DimensionError, IncompatibleCheckpointError, TrainingError
from helpers.serialization import load_checkpoint, save_checkpoint
from samiro.lanes import Lane
from samiro.losses import RegularizerState, lane_detection_loss, regularizer_terms, total_loss
from samiro.metrics import EvalReport, evaluate_sets
from samiro.nn import Encoder, LaneHead, ReconstructionDecoder, decode_lanes
from samiro.synth import Scene, render_gt_mask
from samiro.tensor import Tensor, average, backward, elementwise, no_grad, precision, reduce

logger = logging.getLogger("training")

STREAM_MODEL, STREAM_REGULARIZER, STREAM_BATCHES, STREAM_MASKS = range(4)


def seed_streams(seed: int) -> list[np.random.Generator]:
    return [np.random.default_rng(s) for s in np.random.SeedSequence(seed).spawn(4)]


# Models


class LaneModel:
    """Target encoder plus segmentation head."""

    def __init__(self, encoder: Encoder, head: LaneHead):
        self.encoder = encoder
        self.head = head

    @classmethod
    def build(cls, cfg: LabConfig, rng: np.random.Generator | None) -> "LaneModel":
        model = cfg.model
        encoder = Encoder(model.target_widths, cfg.data.channels, model.kernel_size, rng)
        head = LaneHead(model.target_widths[-1], len(model.target_widths), model.head_hidden, rng)
        return cls(encoder, head)

    def parameters(self) -> dict[str, Tensor]:
        return {**self.encoder.parameters("encoder."), **self.head.parameters("head.")}

    def forward(self, image: Tensor) -> tuple[list[Tensor], Tensor]:
        pyramid = self.encoder(image)
        return pyramid, self.head(pyramid[-1])


def build_oracle(cfg: LabConfig, rng: np.random.Generator | None) -> Encoder:
    return Encoder(cfg.model.oracle_widths, cfg.data.channels, cfg.model.kernel_size, rng)


# Optimisation


def optimizer_step(
    params: dict[str, Tensor], velocities: dict[str, np.ndarray], lr: float, momentum: float
) -> None:
    """v <- momentum * v + g; p <- p - lr * v; then gradients are cleared."""
    for name, param in params.items():
        grad = param.grad if param.grad is not None else np.zeros_like(param.data)
        if grad.shape != param.shape:
            raise DimensionError(f"gradient of {name} has shape {list(grad.shape)}, parameter {list(param.shape)}")
        velocity = velocities.get(name)
        if velocity is None:
            velocity = np.zeros_like(param.data)
        elif velocity.shape != param.shape:
            raise DimensionError(f"velocity of {name} has shape {list(velocity.shape)}, parameter {list(param.shape)}")
        velocity = (momentum * velocity + grad).astype(param.dtype)
        velocities[name] = velocity
        param.data = (param.data - lr * velocity).astype(param.dtype)
        param.grad = None


class SGD:
    """SGD with momentum and optional cosine decay over ``total_steps``."""

    def __init__(
        self, params: dict[str, Tensor], lr: float, momentum: float, total_steps: int = 0, cosine: bool = False
    ):
        self.params = params
        self.base_lr = lr
        self.momentum = momentum
        self.total_steps = total_steps
        self.cosine = cosine
        self.velocities: dict[str, np.ndarray] = {}
        self.steps_taken = 0

    def learning_rate(self) -> float:
        if not self.cosine or self.total_steps <= 0:
            return self.base_lr
        progress = min(self.steps_taken / self.total_steps, 1.0)
        return self.base_lr * 0.5 * (1.0 + math.cos(math.pi * progress))

    def step(self) -> float:
        lr = self.learning_rate()
        optimizer_step(self.params, self.velocities, lr, self.momentum)
        self.steps_taken += 1
        return lr


def batch_schedule(count: int, batch_size: int, steps: int, rng: np.random.Generator) -> Iterator[list[int]]:
    """Index batches for ``steps`` steps: reshuffled every epoch, last partial batch dropped."""
    if count < batch_size:
        raise TrainingError(f"dataset of {count} scene(s) cannot fill a batch of {batch_size}")
    produced = 0
    while produced < steps:
        order = rng.permutation(count)
        for start in range(0, count - batch_size + 1, batch_size):
            if produced == steps:
                return
            yield order[start : start + batch_size].tolist()
            produced += 1


def _check_finite(value: float, step: int, what: str) -> None:
    if not math.isfinite(value):
        raise TrainingError(f"step {step}: {what} became {value}")


@dataclass
class RunRecord:
    """Per-step loss rows plus the run's final report."""

    columns: list[str]
    rows: list[list[float]] = field(default_factory=list)
    report: EvalReport | None = None
    config_hash: str = ""

    def column(self, name: str) -> list[float]:
        index = self.columns.index(name)
        return [row[index] for row in self.rows]

    @property
    def steps(self) -> int:
        return len(self.rows)


# Masked image modelling


def masked_patch_count(patches: int, ratio: float) -> int:
    """ceil(ratio * patches), robust to representation error in the product."""
    return min(patches, math.ceil(round(ratio * patches, 9)))


def patch_mask(rng: np.random.Generator, height: int, width: int, patch: int, ratio: float) -> np.ndarray:
    """Boolean [H,W] map, True on the masked patches."""
    if height % patch or width % patch:
        raise DimensionError(f"patch size {patch} does not divide {height}x{width}")
    rows, cols = height // patch, width // patch
    chosen = rng.choice(rows * cols, size=masked_patch_count(rows * cols, ratio), replace=False)
    grid = np.zeros(rows * cols, dtype=bool)
    grid[chosen] = True
    return np.repeat(np.repeat(grid.reshape(rows, cols), patch, axis=0), patch, axis=1)


def masked_reconstruction_loss(recon: Tensor, image: Tensor, mask: np.ndarray) -> Tensor:
    """Mean squared error over masked pixels only; unmasked pixels contribute nothing."""
    if recon.shape != image.shape:
        raise DimensionError(f"reconstruction {list(recon.shape)} vs image {list(image.shape)}")
    weights = Tensor(mask[None].astype(np.float64), dtype=recon.dtype)
    residual = recon - image
    masked = int(mask.sum()) * image.shape[0]
    if masked == 0:
        raise TrainingError("patch mask selects no pixels")
    return reduce("sum", elementwise("mul", residual * residual, weights)) * (1.0 / masked)


@dataclass
class PretrainResult:
    encoder: Encoder
    record: RunRecord


def mim_pretrain(cfg: LabConfig, scenes: Sequence[Scene], seed: int | None = None) -> PretrainResult:
    """
    Train the oracle encoder with a light decoder to reconstruct masked
    patches. The decoder is discarded; only the encoder is returned.
    """
    if not scenes:
        raise TrainingError("masked-image pretraining needs at least one image")
    train = cfg.train
    seed = train.seed if seed is None else seed
    if train.mim_images:
        scenes = scenes[: train.mim_images]
    streams = seed_streams(seed)
    record = RunRecord(columns=["step", "lr", "mim_loss"], config_hash=cfg.config_hash())

    with precision(train.precision):
        encoder = build_oracle(cfg, streams[STREAM_MODEL])
        if train.oracle_mode == "random":
            logger.info({"event": "oracle_random", "seed": seed})
            encoder.freeze()
            return PretrainResult(encoder, record)
        decoder = ReconstructionDecoder(
            encoder.widths[-1], encoder.num_stages, cfg.data.channels, cfg.model.head_hidden, streams[STREAM_MODEL]
        )
        params = {**encoder.parameters("encoder."), **decoder.parameters("decoder.")}
        optimizer = SGD(params, train.pretrain_lr, train.momentum, train.pretrain_steps, train.cosine)
        images = [Tensor(scene.image.data) for scene in scenes]
        batch_size = min(train.batch_size, len(images))
        batches = batch_schedule(len(images), batch_size, train.pretrain_steps, streams[STREAM_BATCHES])
        for step, batch in enumerate(batches, start=1):
            losses = []
            for index in batch:
                image = images[index]
                mask = patch_mask(
                    streams[STREAM_MASKS], image.shape[1], image.shape[2], train.patch_size, train.mask_ratio
                )
                visible = Tensor(image.data * ~mask[None], dtype=image.dtype)
                recon = decoder(encoder(visible)[-1])
                losses.append(masked_reconstruction_loss(recon, image, mask))
            loss = average(losses)
            _check_finite(loss.item(), step, "MIM loss")
            backward(loss)
            lr = optimizer.step()
            record.rows.append([step, lr, loss.item()])
            if step % train.log_every == 0 or step == 1:
                logger.info({"event": "mim_step", "step": step, "loss": round(loss.item(), 6)})
    encoder.freeze()
    return PretrainResult(encoder, record)


# Fine-tuning


@dataclass
class FinetuneResult:
    model: LaneModel
    regularizer: RegularizerState
    record: RunRecord


def finetune(
    cfg: LabConfig,
    oracle: Encoder | None,
    scenes: Sequence[Scene],
    seed: int | None = None,
    on_checkpoint: Callable[[int, "LaneModel", RegularizerState], None] | None = None,
) -> FinetuneResult:
    """
    Train the lane model on labelled scenes.

    With an oracle and an active loss config, every step adds lambda times
    the mean of the per-stage regulariser terms computed against the frozen
    oracle's features of the same image. The oracle is never updated.
    """
    if not scenes:
        raise TrainingError("fine-tuning needs at least one labelled scene")
    train, loss_cfg = cfg.train, cfg.loss
    seed = train.seed if seed is None else seed
    streams = seed_streams(seed)
    regularized = oracle is not None and loss_cfg.active
    if oracle is None and loss_cfg.variant != "none":
        logger.warning({"event": "no_oracle", "detail": "regulariser disabled, training the baseline"})

    stage_columns = [f"reg_stage{stage}" for stage in loss_cfg.stage_set]
    record = RunRecord(columns=["step", "lr", "l_ld", *stage_columns, "total"], config_hash=cfg.config_hash())

    if regularized:
        check_oracle_compatible(oracle, cfg)

    with precision(train.precision):
        model = LaneModel.build(cfg, streams[STREAM_MODEL])
        oracle_widths = oracle.widths if oracle is not None else cfg.model.oracle_widths
        regularizer = RegularizerState(
            oracle_widths, cfg.model.target_widths, loss_cfg, cfg.model.attention_kernel, streams[STREAM_REGULARIZER]
        )
        params = model.parameters()
        if regularized:
            params.update(regularizer.parameters())
        optimizer = SGD(params, train.lr, train.momentum, train.steps, train.cosine)

        images = [Tensor(scene.image.data) for scene in scenes]
        masks = [Tensor(render_gt_mask(scene, train.mask_width)) for scene in scenes]
        batch_size = min(train.batch_size, len(images))
        for step, batch in enumerate(batch_schedule(len(images), batch_size, train.steps, streams[STREAM_BATCHES]), 1):
            ld_terms = []
            stage_terms: list[list[Tensor]] = [[] for _ in loss_cfg.stage_set]
            for index in batch:
                target_pyramid, prob = model.forward(images[index])
                ld_terms.append(lane_detection_loss(prob, masks[index]))
                if regularized:
                    with no_grad():
                        oracle_pyramid = oracle(images[index])
                    for slot, term in enumerate(regularizer_terms(regularizer, oracle_pyramid, target_pyramid)):
                        stage_terms[slot].append(term)
            l_ld = average(ld_terms)
            per_stage = [average(terms) for terms in stage_terms] if regularized else []
            total = total_loss(l_ld, per_stage, loss_cfg) if regularized else l_ld
            _check_finite(total.item(), step, "total loss")
            backward(total)
            lr = optimizer.step()
            stage_values = [term.item() for term in per_stage] if regularized else [0.0] * len(stage_columns)
            record.rows.append([step, lr, l_ld.item(), *stage_values, total.item()])
            if step % train.log_every == 0 or step == 1:
                logger.info(
                    {
                        "event": "train_step",
                        "step": step,
                        "l_ld": round(l_ld.item(), 6),
                        "total": round(total.item(), 6),
                    }
                )
            if on_checkpoint is not None and train.checkpoint_every and step % train.checkpoint_every == 0:
                on_checkpoint(step, model, regularizer)
    return FinetuneResult(model, regularizer, record)


# Inference and evaluation


def predict_lanes(model: LaneModel, image: Tensor, eval_cfg: EvalConfig) -> list[Lane]:
    with no_grad():
        _, prob = model.forward(image)
    return decode_lanes(prob, eval_cfg.row_stride, eval_cfg.threshold, eval_cfg.max_dx, eval_cfg.max_row_gap)


def predict_dataset(model: LaneModel, scenes: Sequence[Scene], eval_cfg: EvalConfig) -> list[list[Lane]]:
    return [predict_lanes(model, Tensor(scene.image.data), eval_cfg) for scene in scenes]


def evaluate_predictions(
    predictions: Sequence[Sequence[Lane]], scenes: Sequence[Scene], eval_cfg: EvalConfig
) -> EvalReport:
    return evaluate_sets(
        predictions,
        [scene.lanes for scene in scenes],
        [(scene.height, scene.width) for scene in scenes],
        [scene.meta.tags for scene in scenes],
        eval_cfg.iou,
        eval_cfg.synth_lane_width,
        eval_cfg.matcher,
        settings={"format": "synth"},
    )


def evaluate_model(model: LaneModel, scenes: Sequence[Scene], eval_cfg: EvalConfig) -> EvalReport:
    return evaluate_predictions(predict_dataset(model, scenes, eval_cfg), scenes, eval_cfg)


# Checkpoints


def _widths(text: str) -> tuple[int, ...]:
    return tuple(int(part) for part in text.split(",") if part)


def save_oracle(encoder: Encoder, directory: str | os.PathLike) -> Path:
    manifest = {
        "kind": "oracle",
        "widths": ",".join(str(w) for w in encoder.widths),
        "in_channels": str(encoder.in_channels),
        "kernel_size": str(encoder.kernel_size),
    }
    return save_checkpoint(directory, encoder.state_dict(), manifest)


def load_oracle(directory: str | os.PathLike, cfg: LabConfig) -> Encoder:
    tensors, manifest = load_checkpoint(directory)
    if manifest.get("kind") != "oracle":
        raise IncompatibleCheckpointError(f"{directory}: checkpoint kind '{manifest.get('kind')}' is not an oracle")
    try:
        widths = _widths(manifest["widths"])
        in_channels = int(manifest["in_channels"])
        kernel_size = int(manifest["kernel_size"])
    except (KeyError, ValueError) as e:
        raise IncompatibleCheckpointError(f"{directory}: manifest is missing or garbles {e}")
    encoder = Encoder(widths, in_channels, kernel_size, rng=None)
    try:
        encoder.load_state_dict(tensors)
    except DimensionError as e:
        raise IncompatibleCheckpointError(f"{directory}: {e}")
    check_oracle_compatible(encoder, cfg)
    encoder.freeze()
    return encoder


def check_oracle_compatible(oracle: Encoder, cfg: LabConfig) -> None:
    if oracle.in_channels != cfg.data.channels:
        raise IncompatibleCheckpointError(
            f"oracle reads {oracle.in_channels}-channel images, data has {cfg.data.channels} channel(s)"
        )
    if cfg.loss.stage_set and max(cfg.loss.stage_set) > oracle.num_stages:
        raise IncompatibleCheckpointError(
            f"oracle has {oracle.num_stages} stage(s), stage_set asks for {list(cfg.loss.stage_set)}"
        )


def save_lane_model(
    model: LaneModel, regularizer: RegularizerState, directory: str | os.PathLike, cfg: LabConfig
) -> Path:
    tensors = {name: value.data for name, value in model.parameters().items()}
    tensors.update({name: value.data for name, value in regularizer.parameters().items()})
    manifest = {
        "kind": "lane_model",
        "widths": ",".join(str(w) for w in model.encoder.widths),
        "in_channels": str(model.encoder.in_channels),
        "kernel_size": str(model.encoder.kernel_size),
        "head_hidden": str(cfg.model.head_hidden),
        "variant": cfg.loss.variant,
        "config_hash": cfg.config_hash(),
    }
    return save_checkpoint(directory, tensors, manifest)


# Loss-component ablation


@dataclass
class AblationResult:
    setting: str
    seed: int
    f1: float
    f1_occluded: float
    record: RunRecord


def ablation_config(cfg: LabConfig, setting: str, seed: int) -> LabConfig:
    variant, use_norm, use_attention = ABLATION_SETTINGS[setting]
    updated = cfg.replace("loss", variant=variant, use_norm=use_norm, use_attention=use_attention)
    return updated.replace("train", seed=seed)


def run_ablation(
    cfg: LabConfig, train_scenes: Sequence[Scene], test_scenes: Sequence[Scene]
) -> list[AblationResult]:
    """Every setting for every configured seed; one oracle is pretrained per seed."""
    occluded = [scene for scene in test_scenes if TAG_OCCLUSION in scene.meta.tags]
    results = []
    for seed in cfg.train.seeds:
        oracle = mim_pretrain(cfg.replace("train", seed=seed), train_scenes).encoder
        for setting in ABLATION_SETTINGS:
            run_cfg = ablation_config(cfg, setting, seed)
            run = finetune(run_cfg, oracle, train_scenes)
            predictions = predict_dataset(run.model, test_scenes, cfg.eval)
            report = evaluate_predictions(predictions, test_scenes, cfg.eval)
            occluded_predictions = [
                pred for pred, scene in zip(predictions, test_scenes, strict=True) if TAG_OCCLUSION in scene.meta.tags
            ]
            occluded_report = evaluate_predictions(occluded_predictions, occluded, cfg.eval)
            run.record.report = report
            results.append(AblationResult(setting, seed, report.f1, occluded_report.f1, run.record))
            logger.info({"event": "ablation_run", "setting": setting, "seed": seed, "f1": round(report.f1, 6)})
    return results
