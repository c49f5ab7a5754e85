"""Adam optimization loop, evaluation driver, and deterministic orchestration.

Given (seed, config, dataset), every logged loss and the final checkpoint
bytes are fully determined: parameter init and batch order come from seeded
PRNGs, and the numeric path is single-worker. Checkpoints taken mid-run carry
the optimizer moments and the PRNG state, so resuming reproduces the straight
-through run bitwise.
"""

from __future__ import annotations

import json
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .checkpoint import Checkpoint, collect_tensors, save_checkpoint
from .data import Dataset, to_grayscale
from .losses import LossConfig, total_loss
from .metrics import MetricsReport, aggregate_report, segmentation_metrics
from .model import DDANetParams, ModelConfig, build, forward, named_parameters
from .tensor import Graph, Tensor


@dataclass
class TrainConfig:
    learning_rate: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    epochs: int = 50
    batch_size: int = 4
    input_size: int = 64
    seed: int = 0
    checkpoint_every: int = 0

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise ValueError("betas must lie in [0, 1)")
        if self.epochs < 1:
            raise ValueError("epochs must be at least 1")
        if self.batch_size < 1:
            raise ValueError("batch_size must be at least 1")
        if self.input_size < 16 or self.input_size % 16:
            raise ValueError("input_size must be a positive multiple of 16")

    def to_dict(self) -> dict:
        return {
            "learning_rate": self.learning_rate,
            "beta1": self.beta1,
            "beta2": self.beta2,
            "adam_eps": self.adam_eps,
            "epochs": self.epochs,
            "batch_size": self.batch_size,
            "input_size": self.input_size,
            "seed": self.seed,
            "checkpoint_every": self.checkpoint_every,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        return cls(**d)


class AdamState:
    """First/second moment estimates per parameter name, plus the step count."""

    def __init__(self, named: list[tuple[str, Tensor]]):
        self.m = {name: np.zeros_like(t.data) for name, t in named}
        self.v = {name: np.zeros_like(t.data) for name, t in named}
        self.t = 0


def adam_step(named: list[tuple[str, Tensor]], grads: dict[str, np.ndarray],
              state: AdamState, cfg: TrainConfig):
    """One Adam update with bias correction, applied in place.

    m <- b1*m + (1-b1)*g;  v <- b2*v + (1-b2)*g^2;
    p <- p - lr * m_hat / (sqrt(v_hat) + eps)
    """
    state.t += 1
    bc1 = 1.0 - cfg.beta1 ** state.t
    bc2 = 1.0 - cfg.beta2 ** state.t
    for name, p in named:
        g = grads.get(name)
        if g is None:
            raise ValueError(f"missing gradient for parameter {name!r}")
        if g.shape != p.data.shape:
            raise ValueError(f"gradient shape {g.shape} != parameter shape {p.data.shape} ({name})")
        m = state.m[name]
        v = state.v[name]
        m[...] = cfg.beta1 * m + (1.0 - cfg.beta1) * g
        v[...] = cfg.beta2 * v + (1.0 - cfg.beta2) * (g * g)
        m_hat = m / bc1
        v_hat = v / bc2
        p.data = p.data - cfg.learning_rate * m_hat / (np.sqrt(v_hat) + cfg.adam_eps)
    return named, state


def _cache_pairs(dataset: Dataset, size: int) -> list[tuple[np.ndarray, np.ndarray]]:
    return [dataset.load_pair(i, size) for i in range(len(dataset))]


def _mean_dsc(params: DDANetParams, pairs: list) -> float:
    values = []
    for img, mask in pairs:
        out = forward(params, Tensor(img), mode="eval")
        dsc, _, _, _ = segmentation_metrics(out.mask.data, mask)
        values.append(float(dsc[0]))
    return float(np.mean(values))


def train(model_cfg: ModelConfig, train_cfg: TrainConfig, dataset: Dataset,
          val_dataset: Dataset | None = None, loss_cfg: LossConfig | None = None,
          out_path=None, log_path=None, resume: Checkpoint | None = None,
          ) -> tuple[Checkpoint, list[dict]]:
    """Run the optimization loop and return the final checkpoint plus the log.

    The per-epoch log records mean loss components over the epoch's batches
    and the validation DSC (measured on the training set when no validation
    split is supplied). Aborts with a diagnostic on a non-finite loss.
    """
    if len(dataset) == 0:
        raise ValueError("training dataset is empty")
    if resume is not None and resume.epoch >= train_cfg.epochs:
        raise ValueError(
            f"checkpoint is already at epoch {resume.epoch}, nothing left of {train_cfg.epochs}"
        )
    if loss_cfg is None:
        loss_cfg = LossConfig()

    rng = np.random.default_rng(train_cfg.seed)
    if resume is not None:
        params = resume.to_params()
        named = named_parameters(params)
        state = AdamState(named)
        for name, _ in named:
            state.m[name] = resume.tensors[f"adam.m.{name}"].copy()
            state.v[name] = resume.tensors[f"adam.v.{name}"].copy()
        state.t = resume.adam_step or 0
        if resume.rng_state is not None:
            rng.bit_generator.state = resume.rng_state
        start_epoch = resume.epoch
    else:
        params = build(model_cfg, train_cfg.seed)
        named = named_parameters(params)
        state = AdamState(named)
        start_epoch = 0

    pairs = _cache_pairs(dataset, train_cfg.input_size)
    val_pairs = _cache_pairs(val_dataset, train_cfg.input_size) if val_dataset else pairs
    n = len(pairs)

    log_file = open(log_path, "w") if log_path else None
    log: list[dict] = []
    best_dsc = -1.0
    try:
        for epoch in range(start_epoch, train_cfg.epochs):
            order = rng.permutation(n)
            sums = {"loss_total": 0.0, "loss_bce_mask": 0.0, "loss_dice": 0.0, "loss_bce_gray": 0.0}
            n_batches = 0
            for b0 in range(0, n, train_cfg.batch_size):
                idx = order[b0 : b0 + train_cfg.batch_size]
                images = np.concatenate([pairs[i][0] for i in idx])
                masks = np.concatenate([pairs[i][1] for i in idx])
                grays = to_grayscale(images)
                with Graph() as g:
                    out = forward(params, Tensor(images), mode="train")
                    loss, parts = total_loss(out, Tensor(masks), Tensor(grays), loss_cfg)
                    if not np.isfinite(parts["loss_total"]):
                        raise RuntimeError(
                            f"non-finite loss at epoch {epoch + 1}, batch {n_batches + 1}: {parts}"
                        )
                    g.backward(loss)
                grads = {name: t.grad for name, t in named}
                adam_step(named, grads, state, train_cfg)
                for key in sums:
                    sums[key] += parts[key]
                n_batches += 1

            record = {
                "epoch": epoch + 1,
                "loss_total": sums["loss_total"] / n_batches,
                "loss_bce_mask": sums["loss_bce_mask"] / n_batches,
                "loss_dice": sums["loss_dice"] / n_batches,
                "loss_bce_gray": sums["loss_bce_gray"] / n_batches,
                "val_dsc": _mean_dsc(params, val_pairs),
            }
            log.append(record)
            if log_file:
                log_file.write(json.dumps(record) + "\n")
                log_file.flush()

            ckpt = Checkpoint(
                model_config=params.config,
                train_config=train_cfg,
                epoch=epoch + 1,
                tensors=collect_tensors(params, (state.m, state.v)),
                adam_step=state.t,
                rng_state=rng.bit_generator.state,
            )
            if out_path and record["val_dsc"] > best_dsc:
                best_dsc = record["val_dsc"]
                save_checkpoint(ckpt, f"{out_path}.best")
            if (
                out_path
                and train_cfg.checkpoint_every
                and (epoch + 1) % train_cfg.checkpoint_every == 0
            ):
                save_checkpoint(ckpt, out_path)
    finally:
        if log_file:
            log_file.close()

    if out_path:
        save_checkpoint(ckpt, out_path)
    return ckpt, log


def evaluate(ckpt: Checkpoint, dataset: Dataset) -> MetricsReport:
    """Eval-mode forward over every image at the checkpoint's input size."""
    if len(dataset) == 0:
        raise ValueError("evaluation dataset is empty")
    params = ckpt.to_params()
    size = ckpt.train_config.input_size
    all_dsc, all_iou, all_rec, all_prec = [], [], [], []
    forward_time = 0.0
    for i in range(len(dataset)):
        img, mask = dataset.load_pair(i, size)
        x = Tensor(img)
        t0 = time.perf_counter()
        out = forward(params, x, mode="eval")
        forward_time += time.perf_counter() - t0
        dsc, iou, rec, prec = segmentation_metrics(out.mask.data, mask)
        all_dsc.append(dsc[0])
        all_iou.append(iou[0])
        all_rec.append(rec[0])
        all_prec.append(prec[0])
    fps = len(dataset) / forward_time if forward_time > 0 else float("inf")
    return aggregate_report((all_dsc, all_iou, all_rec, all_prec), fps)
