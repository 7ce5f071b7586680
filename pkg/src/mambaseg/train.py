"""Toy-scale training: SGD with momentum, CE + soft-Dice loss, val checkpoints.

The loop is a pure function of (model config, train config, dataset spec):
initialization, batch order, and evaluation cadence all draw from named
seed streams, so two runs with the same inputs produce bit-identical logs
and weights.  Validation mean Dice is computed every ``eval_every``
iterations and checkpoints are written only on strict improvement.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from . import metrics, weights_io
from .data import Dataset, SyntheticDatasetSpec, generate_dataset
from .nd import ops
from .nd.tensor import NonFiniteError, ShapeError, Tape, Tensor
from .rng import stream
from .unet import ModelConfig, ModelWeights, forward, init_weights

DICE_SMOOTH = 1e-6


@dataclass(frozen=True)
class TrainConfig:
    iterations: int = 2000
    batch_size: int = 4
    lr: float = 0.01
    momentum: float = 0.9
    weight_decay: float = 1e-4
    eval_every: int = 200
    seed: int = 0
    ce_weight: float = 1.0
    dice_weight: float = 1.0
    threads: int = 1

    def __post_init__(self):
        if self.iterations < 1 or self.batch_size < 1 or self.eval_every < 1:
            raise ValueError("iterations, batch_size, eval_every must be positive")
        if self.lr < 0:  # zero allowed: it is the standard no-learning diagnostic
            raise ValueError("lr must be nonnegative")
        if not 0.0 <= self.momentum < 1.0:
            raise ValueError("momentum must lie in [0, 1)")
        if self.weight_decay < 0:
            raise ValueError("weight_decay must be nonnegative")
        if self.ce_weight < 0 or self.dice_weight < 0:
            raise ValueError("loss weights must be nonnegative")
        if self.ce_weight + self.dice_weight == 0:
            raise ValueError("at least one loss weight must be positive")
        if self.threads < 1:
            raise ValueError("threads must be positive")


def sgd_step(params, grads, velocity, cfg: TrainConfig):
    """One momentum-SGD update; decay is folded into the velocity buffer.

    ``velocity`` is mutated in place; a fresh parameter dict is returned so
    tensors stay immutable.  A non-finite gradient aborts with the name of
    the offending parameter.
    """
    updated = {}
    for name, p in params.items():
        g = grads[name]
        if g is None or not np.all(np.isfinite(g)):
            raise NonFiniteError(f"non-finite gradient for parameter {name!r}")
        v = cfg.momentum * velocity[name] + g + cfg.weight_decay * p.data
        velocity[name] = v
        updated[name] = Tensor(p.data - cfg.lr * v, requires_grad=True)
    return updated


def loss(logits: Tensor, labels, cfg: TrainConfig) -> Tensor:
    """ce_weight * cross-entropy + dice_weight * (1 - soft Dice), scalar.

    Soft Dice averages over foreground classes; each class ratio is smoothed
    so absent classes contribute a perfect score instead of 0/0.
    """
    labels = np.asarray(labels)
    if labels.shape != logits.shape[:-1]:
        raise ShapeError(
            f"labels {labels.shape} do not align with logits {logits.shape}"
        )
    num_classes = logits.shape[-1]

    ce = ops.neg(ops.mean(ops.select_class(ops.log_softmax(logits), labels)))

    probs = ops.softmax(logits)
    score_sum = None
    for cls in range(1, num_classes):
        p_cls = ops.take_channel(probs, cls)
        mask = (labels == cls).astype(np.float64)
        intersection = ops.sum(ops.mul(p_cls, Tensor(mask)))
        denom = ops.add(ops.sum(p_cls), float(mask.sum()))
        score = ops.div(
            ops.add(ops.mul(intersection, 2.0), DICE_SMOOTH),
            ops.add(denom, DICE_SMOOTH),
        )
        score_sum = score if score_sum is None else ops.add(score_sum, score)
    soft_dice = ops.mul(score_sum, 1.0 / (num_classes - 1))

    return ops.add(
        ops.mul(ce, cfg.ce_weight),
        ops.mul(ops.sub(1.0, soft_dice), cfg.dice_weight),
    )


def predict(images, weights: ModelWeights, threads: int = 1) -> np.ndarray:
    """Class-index maps from argmax logits; no tape is recorded."""
    logits = forward(Tensor(np.asarray(images, dtype=np.float64)), weights,
                     threads=threads)
    return np.argmax(logits.data, axis=-1)


def _val_mean_dice(images, labels, weights, num_classes, threads) -> float:
    preds = predict(images, weights, threads=threads)
    scores = [
        metrics.image_dice(pred, gt, num_classes)
        for pred, gt in zip(preds, labels)
    ]
    return float(np.mean(scores))


def evaluate(weights: ModelWeights, dataset: Dataset, split: str = "test",
             threads: int = 1, batch: int = 8):
    """Full metric report plus the per-image mean-Dice list for one split."""
    images, labels = dataset.split(split)
    num_classes = weights.config.num_classes
    preds = np.concatenate([
        predict(images[i:i + batch], weights, threads=threads)
        for i in range(0, len(images), batch)
    ])
    report = metrics.evaluate_batch(zip(preds, labels), num_classes)
    dices = [
        metrics.image_dice(pred, gt, num_classes)
        for pred, gt in zip(preds, labels)
    ]
    return report, dices


@dataclass
class TrainResult:
    best_weights: ModelWeights
    final_weights: ModelWeights
    log: list
    best_val_dice: float
    best_iteration: int


def _copy_weights(cfg: ModelConfig, params) -> ModelWeights:
    return ModelWeights(
        cfg, {n: Tensor(p.data.copy(), requires_grad=True) for n, p in params.items()}
    )


def train(model_cfg: ModelConfig, train_cfg: TrainConfig,
          dataset_spec: SyntheticDatasetSpec | None = None,
          dataset: Dataset | None = None,
          checkpoint_path: str | None = None,
          log_path: str | None = None) -> TrainResult:
    """Run the loop; returns the best-on-validation weights and the log."""
    if dataset is None:
        if dataset_spec is None:
            raise ValueError("provide dataset_spec or a pre-built dataset")
        dataset = generate_dataset(dataset_spec)
    train_images, train_labels = dataset.split("train")
    val_images, val_labels = dataset.split("val")

    weights = init_weights(model_cfg, seed=train_cfg.seed)
    params = weights.named_params()
    velocity = {name: np.zeros_like(p.data) for name, p in params.items()}

    log = []
    best_dice, best_params, best_iter = -np.inf, None, -1
    log_file = open(log_path, "w") if log_path else None
    try:
        for it in range(1, train_cfg.iterations + 1):
            picks = stream(train_cfg.seed, "batch", str(it)).integers(
                0, len(train_images), size=train_cfg.batch_size
            )
            batch_images = Tensor(train_images[picks])
            batch_labels = train_labels[picks]
            with Tape() as tape:
                logits = forward(batch_images, weights, threads=train_cfg.threads)
                batch_loss = loss(logits, batch_labels, train_cfg)
            tape.backward(batch_loss)
            grads = {name: p.grad for name, p in params.items()}
            params = sgd_step(params, grads, velocity, train_cfg)
            weights = ModelWeights(model_cfg, params)

            if it % train_cfg.eval_every == 0 or it == train_cfg.iterations:
                val_dice = _val_mean_dice(
                    val_images, val_labels, weights,
                    model_cfg.num_classes, train_cfg.threads,
                )
                record = {
                    "iteration": it,
                    "loss": float(batch_loss.data),
                    "val_dice": val_dice,
                }
                if not log or log[-1]["iteration"] != it:
                    log.append(record)
                    if log_file:
                        log_file.write(json.dumps(record) + "\n")
                        log_file.flush()
                    if val_dice > best_dice:
                        best_dice, best_iter = val_dice, it
                        best_params = {
                            n: Tensor(p.data.copy(), requires_grad=True)
                            for n, p in params.items()
                        }
                        if checkpoint_path:
                            weights_io.save_weights(
                                _copy_weights(model_cfg, best_params),
                                checkpoint_path,
                            )
    finally:
        if log_file:
            log_file.close()

    if best_params is None:  # no eval ever ran (cannot happen: final always does)
        best_params, best_dice, best_iter = params, float("nan"), train_cfg.iterations
    return TrainResult(
        best_weights=ModelWeights(model_cfg, best_params),
        final_weights=weights,
        log=log,
        best_val_dice=float(best_dice),
        best_iteration=best_iter,
    )
