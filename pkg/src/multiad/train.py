"""Alternating discriminator / student training with a frozen teacher."""

from __future__ import annotations

import logging
import math
from typing import Callable

import numpy as np

from .backbone import Network, calibrate_bn_stats, forward_pyramid
from .checkpoint import Checkpoint
from .config import PipelineConfig
from .data import LabeledSample, stack_images
from .distill import (
    discriminator_forward,
    loss_adversarial,
    loss_discriminator,
    loss_generator,
    loss_student,
    normalize_pyramid,
)
from .model import INFER_BATCH, MultiADModel
from .tensor import (
    AdamState,
    NonFiniteGradient,
    Tape,
    Tensor,
    adam_step,
    collect_grads,
    cross_entropy,
    global_avg_pool,
    linear,
    zero_grads,
)

log = logging.getLogger(__name__)

RNG_DROPOUT = 8
RNG_SHUFFLE = 7
RNG_PRETEXT = 9
# cap on images used for the one-shot teacher BN statistics pass (memory bound)
TEACHER_CALIBRATION_IMAGES = 256


class TrainingError(RuntimeError):
    pass


def steps_per_epoch(n: int, batch_size: int) -> int:
    return math.ceil(n / batch_size)


def epoch_order(seed: int, epoch: int, n: int) -> np.ndarray:
    return np.random.default_rng([seed, RNG_SHUFFLE, epoch]).permutation(n)


def new_checkpoint(config: PipelineConfig) -> Checkpoint:
    model = MultiADModel.initialize(config)
    rng = np.random.default_rng([config.seed, RNG_DROPOUT])
    return Checkpoint(
        model=model,
        student_opt=AdamState(lr=config.lr),
        disc_opt=AdamState(lr=config.lr),
        rng_state=rng.bit_generator.state,
    )


def pretrain_teacher_pretext(teacher: Network, images: np.ndarray, config: PipelineConfig) -> None:
    """Fit the teacher on 4-way rotation prediction, then leave it for freezing.

    The rotation head is discarded afterwards; BN running statistics stay.
    """
    rng = np.random.default_rng([config.seed, RNG_PRETEXT])
    width = config.backbone.widths[3]
    head = Tensor((rng.standard_normal((4, width)) * np.sqrt(2.0 / width)).astype(np.float32), requires_grad=True)
    head_b = Tensor(np.zeros(4, dtype=np.float32), requires_grad=True)
    params = dict(teacher.params)
    params["head.weight"], params["head.bias"] = head, head_b
    opt = AdamState(lr=config.lr)
    teacher.set_trainable(True)
    bs = max(2, config.batch_size)
    for epoch in range(config.pretext_epochs):
        order = rng.permutation(len(images))
        for start in range(0, len(order), bs):
            idx = order[start : start + bs]
            ks = rng.integers(0, 4, len(idx))
            batch = np.stack([np.rot90(images[i], k, axes=(1, 2)) for i, k in zip(idx, ks)])
            zero_grads(params)
            with Tape() as tape:
                pyr = forward_pyramid(Tensor(np.ascontiguousarray(batch)), teacher, config.backbone, "train")
                logits = linear(global_avg_pool(pyr.stage4), head, head_b)
                loss = cross_entropy(logits, ks)
            tape.backward(loss)
            adam_step(params, collect_grads(params), opt)
        log.info("pretext epoch %d loss %.4f", epoch, loss.item())
    teacher.set_trainable(False)


def prepare_teacher(model: MultiADModel, images: np.ndarray) -> None:
    """Build the frozen teacher: optional pretext fit, then BN statistics from normals.

    Runs once, before the first distillation step; the teacher never changes after.
    """
    config = model.config
    if config.teacher_mode == "pretext":
        pretrain_teacher_pretext(model.teacher, images, config)
    if config.teacher_bn_calibration:
        calibrate_bn_stats(model.teacher, config.backbone, images[:TEACHER_CALIBRATION_IMAGES])
    model.teacher.set_trainable(False)


def _teacher_cache(model: MultiADModel, images: np.ndarray) -> list[np.ndarray]:
    chunks: list[list[np.ndarray]] = []
    for start in range(0, len(images), INFER_BATCH):
        pyr = model.teacher_pyramid(images[start : start + INFER_BATCH])
        chunks.append([lvl.data for lvl in pyr])
    return [np.concatenate([c[n] for c in chunks]) for n in range(len(chunks[0]))]


def _check_finite(step: int, **terms: float | None) -> None:
    for name, value in terms.items():
        if value is not None and not np.isfinite(value):
            raise TrainingError(f"non-finite {name} at step {step}")


def train_step(
    ckpt: Checkpoint,
    images: np.ndarray,
    teacher_levels: list[np.ndarray],
    rng: np.random.Generator,
) -> dict:
    """One alternating update on a batch; returns the step's loss record."""
    cfg = ckpt.config
    model = ckpt.model
    student, disc = model.student, model.discriminator
    t_norm = normalize_pyramid([Tensor(t) for t in teacher_levels])
    zero_grads(student.params)
    l_d_val = l_adv_val = None
    with Tape() as tape_s:
        s_pyr = forward_pyramid(Tensor(images), student, cfg.backbone, cfg.student_bn_mode)
        l_g = loss_generator(t_norm, normalize_pyramid(s_pyr))
        l_adv = None
        if cfg.discriminator_enabled:
            zero_grads(disc.params)
            with Tape() as tape_d:
                kw = dict(dropout_p=cfg.dropout_p, slope=cfg.leaky_slope)
                d_real = discriminator_forward(Tensor(teacher_levels[3]), disc, rng, "train", **kw)
                d_fake = discriminator_forward(s_pyr.stage4.detach(), disc, rng, "train", **kw)
                l_d = loss_discriminator(d_real, d_fake)
            l_d_val = l_d.item()
            _check_finite(ckpt.step, L_D=l_d_val)
            tape_d.backward(l_d)
            try:
                adam_step(disc.params, collect_grads(disc.params), ckpt.disc_opt)
            except NonFiniteGradient as exc:
                raise TrainingError(f"step {ckpt.step}: discriminator {exc}") from exc
            d_student = discriminator_forward(
                s_pyr.stage4, disc.frozen_view(), rng, "train", update_stats=False, **kw
            )
            l_adv = loss_adversarial(d_student)
            l_adv_val = l_adv.item()
        l_s = loss_student(l_g, l_adv, cfg.lam)
    record = {
        "step": ckpt.step,
        "L_G": l_g.item(),
        "L_D": l_d_val,
        "L_adv": l_adv_val,
        "L_S": l_s.item(),
    }
    _check_finite(ckpt.step, L_G=record["L_G"], L_adv=l_adv_val, L_S=record["L_S"])
    tape_s.backward(l_s)
    try:
        adam_step(student.params, collect_grads(student.params), ckpt.student_opt)
    except NonFiniteGradient as exc:
        raise TrainingError(f"step {ckpt.step}: student {exc}") from exc
    ckpt.step += 1
    return record


def train(
    config: PipelineConfig,
    train_split: list[LabeledSample],
    resume: Checkpoint | None = None,
    max_steps: int | None = None,
    on_step: Callable[[dict], None] | None = None,
) -> Checkpoint:
    """Run (or continue) training and return the resulting checkpoint.

    ``max_steps`` caps the number of optimizer steps taken in this call; refinement
    calibration only runs once the configured number of epochs is complete.
    """
    if any(s.label != 0 for s in train_split):
        raise TrainingError("training split contains anomalous samples")
    if len(train_split) < 2:
        raise TrainingError("need at least 2 training images")
    images = stack_images(train_split)
    if images.shape[1] != config.backbone.in_channels:
        raise TrainingError(f"images have {images.shape[1]} channels, config expects {config.backbone.in_channels}")
    if images.shape[2:] != (config.input_extent, config.input_extent):
        raise TrainingError(f"images are {images.shape[2:]}, config expects extent {config.input_extent}")

    if resume is None:
        ckpt = new_checkpoint(config)
    else:
        ckpt = resume
        if ckpt.config.to_dict() != config.to_dict():
            raise TrainingError("resume checkpoint was trained with a different config")
    if not ckpt.teacher_ready:
        if ckpt.step > 0:
            raise TrainingError("checkpoint has training steps but an unprepared teacher")
        prepare_teacher(ckpt.model, images)
        ckpt.teacher_ready = True
    model = ckpt.model
    model.teacher.set_trainable(False)
    model.student.set_trainable(True)
    model.discriminator.set_trainable(config.discriminator_enabled)

    rng = np.random.default_rng([config.seed, RNG_DROPOUT])
    rng.bit_generator.state = ckpt.rng_state
    cache = _teacher_cache(model, images)
    per_epoch = steps_per_epoch(len(images), config.batch_size)
    total = per_epoch * config.epochs
    budget = total - ckpt.step if max_steps is None else min(max_steps, total - ckpt.step)
    for _ in range(budget):
        epoch, k = divmod(ckpt.step, per_epoch)
        idx = epoch_order(config.seed, epoch, len(images))[k * config.batch_size : (k + 1) * config.batch_size]
        rec = train_step(ckpt, images[idx], [c[idx] for c in cache], rng)
        ckpt.rng_state = rng.bit_generator.state
        ckpt.history.append(rec)
        if on_step is not None:
            on_step(rec)
        if rec["step"] % per_epoch == per_epoch - 1:
            log.info("epoch %d step %d L_G %.5f L_S %.5f", epoch, rec["step"], rec["L_G"], rec["L_S"])
    model.student.set_trainable(False)
    model.discriminator.set_trainable(False)
    if ckpt.step >= total and config.mff_enabled and model.refinement is None:
        model.calibrate_refinement(images)
    return ckpt
