"""Training loop: batch size 1, Adam, teacher forcing, seeded determinism.

Per step one image is drawn in seeded shuffled order, the network is rolled
out with the fixation inputs of one randomly chosen anchor scanpath, and the
KL/soft-DTW loss against all of the image's scanpaths is backpropagated.
The loss log and checkpoints are byte-reproducible functions of
(dataset, config, seed).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import AdamState
from .data_io import Checkpoint, PreparedExample, read_checkpoint, write_checkpoint
from .errors import DataError, NumericalError, ParameterError
from .losses import LossConfig, kl_dtw_loss
from .model import ModelConfig, ScanpathModel, model_from_checkpoint, model_to_checkpoint


@dataclass(frozen=True)
class TrainConfig:
    model: ModelConfig
    loss: LossConfig = field(default_factory=LossConfig)
    lr: float = 1e-4
    max_steps: int = 2000
    checkpoint_every: int = 500
    seed: int = 0
    teacher_forcing: bool = True

    def __post_init__(self):
        if self.lr <= 0:
            raise ParameterError(f"learning rate must be positive, got {self.lr}")
        if self.max_steps < 0 or self.checkpoint_every < 0:
            raise ParameterError("step counts must be nonnegative")


@dataclass
class TrainState:
    model: ScanpathModel
    adam: AdamState
    rng: np.random.Generator
    step: int = 0


def init_state(cfg: TrainConfig) -> TrainState:
    rng = np.random.default_rng(cfg.seed)
    model = ScanpathModel.create(cfg.model, rng)
    params = [t for _, t in model.parameters()]
    return TrainState(model=model, adam=AdamState.init(params), rng=rng)


def _features_for(model: ScanpathModel, example: PreparedExample, features):
    if model.cfg.feature_source == "trainable":
        if example.image is None:
            raise DataError(f"image '{example.image_id}' has no pixels for the trainable feature stack")
        return model.feature_stack(image=example.image)
    if features is None or example.image_id not in features:
        raise DataError(f"no precomputed features for image '{example.image_id}'")
    return model.feature_stack(precomputed=features[example.image_id])


def train_step(example: PreparedExample, state: TrainState, cfg: TrainConfig,
               features=None) -> float:
    """One optimizer update on one image; returns the scalar loss."""
    if not example.scanpaths:
        raise DataError(f"image '{example.image_id}' has no scanpaths")
    model = state.model
    n_fix = model.cfg.n_fixations

    anchor_idx = int(state.rng.integers(len(example.scanpaths)))
    anchor_maps = example.spatialized[anchor_idx].maps[: n_fix - 1]
    feat = _features_for(model, example, features)
    frames = model.rollout_training(
        feat, state.rng, input_maps=anchor_maps if cfg.teacher_forcing else None
    )
    loss = kl_dtw_loss(frames, list(example.spatialized), cfg.loss, model.cfg.grid)
    value = loss.item()
    if not math.isfinite(value):
        raise NumericalError(f"non-finite loss {value} at step {state.step + 1}")

    params = [t for _, t in model.parameters()]
    ad.zero_grads(params)
    ad.backward(loss)
    grads = ad.collect_grads(params)
    ad.adam_step(params, grads, state.adam, cfg.lr)
    state.step += 1
    return value


def _epoch_order(seed: int, epoch: int, n: int) -> np.ndarray:
    return np.random.default_rng((seed, epoch)).permutation(n)


def _checkpoint(state: TrainState) -> Checkpoint:
    return model_to_checkpoint(
        state.model, adam=state.adam, step=state.step, rng_state=state.rng.bit_generator.state
    )


def train(prepared: list[PreparedExample], cfg: TrainConfig, out_dir,
          features=None, resume_from=None):
    """Run the loop; writes loss_log.csv and checkpoints, returns (path, log).

    resume_from restores parameters, optimizer moments, the step counter and
    the generator state, reproducing the uninterrupted trajectory exactly.
    """
    if not prepared:
        raise DataError("training needs at least one prepared image")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)

    if resume_from is not None:
        ckpt = read_checkpoint(resume_from)
        model, adam, step, rng = model_from_checkpoint(ckpt, expected=cfg.model)
        if adam is None or rng is None:
            raise DataError(f"{resume_from}: checkpoint carries no optimizer/rng state, cannot resume")
        state = TrainState(model=model, adam=adam, rng=rng, step=step)
    else:
        state = init_state(cfg)
        write_checkpoint(out / "checkpoint_000000.spck", _checkpoint(state))

    n = len(prepared)
    log: list[tuple[int, float]] = []
    order, order_epoch = None, -1
    while state.step < cfg.max_steps:
        epoch, offset = divmod(state.step, n)
        if epoch != order_epoch:
            order, order_epoch = _epoch_order(cfg.seed, epoch, n), epoch
        example = prepared[int(order[offset])]
        value = train_step(example, state, cfg, features=features)
        log.append((state.step, value))
        if cfg.checkpoint_every and state.step % cfg.checkpoint_every == 0:
            write_checkpoint(out / f"checkpoint_{state.step:06d}.spck", _checkpoint(state))

    if log or resume_from is not None:
        final_path = out / "checkpoint_final.spck"
        write_checkpoint(final_path, _checkpoint(state))
    else:
        final_path = out / "checkpoint_000000.spck"
    with open(out / "loss_log.csv", "w", encoding="utf-8") as fh:
        fh.write("step,loss\n")
        for step, value in log:
            fh.write(f"{step},{value!r}\n")
    return final_path, log
