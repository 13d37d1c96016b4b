"""Losses, Adam, polynomial LR schedule and the weakly-supervised loop.

The composite objective is

    total = sim + dice + lambda * reg

with MSE image similarity, soft Dice on linearly warped one-hot masks and
the mean squared forward difference of the displacement. Training-time
regularization uses forward differences (cheap, sparse adjoint); the
evaluation metrics use central differences (accurate) - both operator
families are documented where they live.
"""

import csv
import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import field as field_mod
from . import metrics as metrics_mod
from . import scf as scf_mod
from .errors import NonFiniteFieldError, ScfregError, TrainingDivergedError
from .nn import engine, ops

logger = logging.getLogger(__name__)

SOFT_DICE_EPS = 1e-5


@dataclass
class TrainConfig:
    epochs: int
    lambda_: float = 0.1
    lr0: float = 1e-4
    poly_power: float = 0.9
    batch: int = 1
    seed: int = 0
    dice_labels: tuple | None = None   # None: all foreground labels
    use_integration: bool = False
    checkpoint_every: int = 0          # 0: checkpoint only at the end

    def __post_init__(self):
        if self.lambda_ < 0 or self.lr0 <= 0 or self.epochs < 1:
            raise ScfregError("need lambda >= 0, lr0 > 0, epochs >= 1")
        if self.batch != 1:
            raise ScfregError("only batch size 1 is supported")


@dataclass
class LossBreakdown:
    sim: float
    dice: float
    reg: float
    lambda_: float

    @property
    def total(self) -> float:
        return self.sim + self.dice + self.lambda_ * self.reg


@dataclass
class RegPair:
    """One training/validation example; probs_f is the optional confidence
    of the fixed mask."""

    im_m: np.ndarray
    im_f: np.ndarray
    seg_m: np.ndarray
    seg_f: np.ndarray
    probs_f: np.ndarray | None = None

    def fixed_mask(self) -> field_mod.SegMask:
        return field_mod.SegMask(self.seg_f, self.probs_f)


def loss_sim(warped, fixed) -> engine.Node:
    """Mean squared error between the warped moving image and the fixed one."""
    warped = engine.as_node(warped)
    fixed = np.asarray(fixed, dtype=np.float64)
    if warped.data.shape != fixed.shape:
        raise ScfregError(f"shapes differ: {warped.data.shape} vs {fixed.shape}")
    diff = engine.sub(warped, fixed)
    return engine.mean_all(engine.mul(diff, diff))


def one_hot_channels(labels: np.ndarray, label_ids) -> np.ndarray:
    """Binary indicator channels [L, S...] for the given label ids."""
    labels = np.asarray(labels)
    return np.stack([(labels == l).astype(np.float64) for l in label_ids])


def loss_dice(moving_onehot: np.ndarray, disp, fixed_onehot: np.ndarray,
              eps: float = SOFT_DICE_EPS) -> engine.Node:
    """Soft Dice loss: warp the moving one-hot channels linearly, then
    1 - mean_l (2 sum(w_l g_l) + eps) / (sum w_l + sum g_l + eps)."""
    if moving_onehot.shape != fixed_onehot.shape:
        raise ScfregError("one-hot channel shapes differ")
    if moving_onehot.shape[0] == 0:
        raise ScfregError("empty label set for the dice loss")
    warped = ops.warp_channels(moving_onehot, disp)
    spatial_axes = tuple(range(1, moving_onehot.ndim))
    inter = engine.sum_axes(engine.mul(warped, fixed_onehot), spatial_axes)
    sums = engine.add(
        engine.sum_axes(warped, spatial_axes), fixed_onehot.sum(axis=spatial_axes)
    )
    dice_per_label = engine.div(
        engine.add(engine.scale(inter, 2.0), eps), engine.add(sums, eps)
    )
    return engine.sub(1.0, engine.mean_all(dice_per_label))


def loss_reg(u):
    """Mean squared forward-difference of the displacement field.

    Each of the d*d (component, axis) pairs is averaged over its valid
    positions, then the pairs are averaged, so a single unit-slope
    component contributes exactly 1/(d*d):

    >>> import numpy as np
    >>> u = np.zeros((2, 4, 4))
    >>> u[0] = np.arange(4, dtype=float)[:, None]  # u_0(y, x) = y
    >>> loss_reg(u)
    0.25

    Accepts a plain array (returns float) or a Node (returns a Node).
    """
    if isinstance(u, engine.Node):
        return ops.fwd_diff_penalty(u)
    return float(ops.fwd_diff_penalty(engine.as_node(np.asarray(u))).data)


class Adam:
    """Adam with bias correction; clears gradients after each step."""

    def __init__(self, params, beta1: float = 0.9, beta2: float = 0.999,
                 eps: float = 1e-8):
        self.params = list(params)
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.t = 0
        self._m = [np.zeros_like(p.data) for p in self.params]
        self._v = [np.zeros_like(p.data) for p in self.params]

    def step(self, lr: float) -> None:
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        for p, m, v in zip(self.params, self._m, self._v):
            g = p.grad
            m *= b1
            m += (1 - b1) * g
            v *= b2
            v += (1 - b2) * g * g
            m_hat = m / (1 - b1**self.t)
            v_hat = v / (1 - b2**self.t)
            p.data -= lr * m_hat / (np.sqrt(v_hat) + self.eps)
            p.zero_grad()


def poly_lr(epoch: int, cfg: TrainConfig) -> float:
    """lr0 * (1 - epoch/epochs) ** poly_power, evaluated per epoch."""
    if not 0 <= epoch < cfg.epochs:
        raise ScfregError(f"epoch {epoch} outside [0, {cfg.epochs})")
    return cfg.lr0 * (1.0 - epoch / cfg.epochs) ** cfg.poly_power


def step_losses(model: scf_mod.ScfModel, pair: RegPair, moving_onehot, fixed_onehot,
                lambda_: float):
    """Forward pass producing the total loss node plus the breakdown."""
    model.invalidate_cache()
    u = scf_mod.register(model, pair.im_m, pair.im_f, pair.fixed_mask(), training=True)
    warped = ops.warp_channels(np.asarray(pair.im_m, dtype=np.float64)[None], u)
    sim = loss_sim(engine.reshape(warped, pair.im_f.shape), pair.im_f)
    dice = loss_dice(moving_onehot, u, fixed_onehot)
    reg = loss_reg(u)
    total = engine.add(engine.add(sim, dice), engine.scale(reg, lambda_))
    breakdown = LossBreakdown(
        sim=float(sim.data), dice=float(dice.data), reg=float(reg.data), lambda_=lambda_
    )
    return total, breakdown


def validation_dice(model: scf_mod.ScfModel, pairs, labels) -> float:
    """Mean foreground Dice after nearest-neighbour warping of the moving
    segmentations by the predicted fields."""
    scores = []
    for pair in pairs:
        model.invalidate_cache()
        u = scf_mod.register(model, pair.im_m, pair.im_f, pair.fixed_mask())
        warped_seg = field_mod.warp_image(pair.seg_m, u, mode="nearest")
        _, mean = metrics_mod.dice(warped_seg, pair.seg_f, labels=labels)
        scores.append(mean)
    return float(np.mean(scores))


def train_loop(model: scf_mod.ScfModel, train_pairs, cfg: TrainConfig,
               val_pairs=None, out_dir=None):
    """Train ``model`` in place; returns (model, history).

    Shuffles pairs per epoch with the seeded RNG, writes ``history.csv``
    and checkpoints under ``out_dir`` when given, and aborts on NaN loss.
    History rows: epoch, lr, sim, dice, reg, total, val_dice.
    """
    if not train_pairs:
        raise ScfregError("empty training set")
    rng = np.random.default_rng(cfg.seed)
    optimizer = Adam(model.parameters())
    labels = cfg.dice_labels
    if labels is None:
        labels = tuple(range(1, model.num_regions))
    onehots = [
        (one_hot_channels(p.seg_m, labels), one_hot_channels(p.seg_f, labels))
        for p in train_pairs
    ]
    history = []
    out_dir = Path(out_dir) if out_dir is not None else None
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)
    for epoch in range(cfg.epochs):
        lr = poly_lr(epoch, cfg)
        sums = np.zeros(4)
        for idx in rng.permutation(len(train_pairs)):
            pair = train_pairs[idx]
            try:
                total, breakdown = step_losses(
                    model, pair, onehots[idx][0], onehots[idx][1], cfg.lambda_
                )
            except NonFiniteFieldError as exc:
                raise TrainingDivergedError(
                    f"{exc} at epoch {epoch}, lr {lr:.3e}"
                ) from exc
            if not np.isfinite(total.data):
                raise TrainingDivergedError(
                    f"NaN/inf loss at epoch {epoch}, lr {lr:.3e}"
                )
            engine.backward(total)
            optimizer.step(lr)
            sums += (breakdown.sim, breakdown.dice, breakdown.reg, breakdown.total)
        means = sums / len(train_pairs)
        row = {
            "epoch": epoch, "lr": lr, "sim": means[0], "dice": means[1],
            "reg": means[2], "total": means[3],
            "val_dice": validation_dice(model, val_pairs, labels) if val_pairs else "",
        }
        history.append(row)
        model.epoch = epoch + 1
        if out_dir is not None and cfg.checkpoint_every and (epoch + 1) % cfg.checkpoint_every == 0:
            scf_mod.save_model(out_dir / f"ckpt_epoch_{epoch + 1:04d}", model)
        if epoch % max(1, cfg.epochs // 10) == 0:
            logger.info(
                "epoch %d/%d lr %.2e total %.5f%s", epoch, cfg.epochs, lr, means[3],
                f" val_dice {row['val_dice']:.4f}" if row["val_dice"] != "" else "",
            )
    if out_dir is not None:
        write_history(out_dir / "history.csv", history)
        scf_mod.save_model(out_dir / "ckpt_final", model)
    return model, history


def write_history(path, history) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(
            fh, fieldnames=["epoch", "lr", "sim", "dice", "reg", "total", "val_dice"]
        )
        writer.writeheader()
        writer.writerows(history)
