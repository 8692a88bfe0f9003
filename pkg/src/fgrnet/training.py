"""Joint autoencoder + classifier training with Adam."""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field

import numpy as np

from . import tensor as T
from .exceptions import ConfigError, ContractError, DivergenceError
from .losses import combined_loss, cross_entropy, reconstruction_loss, ssim
from .metrics import MetricsReport, evaluate_predictions
from .model import FGRNetParams, forward_infer, forward_train

log = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    learning_rate: float = 1e-3
    batch_size: int = 2
    epochs: int = 15
    alpha: float = 0.5
    rec_loss: str = "mse"
    lr_decay_gamma: float | None = None
    lr_decay_every: int = 10
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    augment: bool = True
    balance: bool = True
    validation_fraction: float = 0.2
    seed: int = 0

    def __post_init__(self):
        self.validate()

    def validate(self):
        if self.learning_rate <= 0:
            raise ConfigError("learning_rate must be positive")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if self.epochs < 0:
            raise ConfigError("epochs must be >= 0")
        if not 0.0 <= self.alpha <= 1.0:
            raise ConfigError("alpha must lie in [0, 1]")
        if self.rec_loss.lower() not in ("mse", "mae", "ssim"):
            raise ConfigError(f"rec_loss must be one of mse, mae, ssim; got {self.rec_loss!r}")
        if self.lr_decay_gamma is not None and not 0 < self.lr_decay_gamma <= 1:
            raise ConfigError("lr_decay_gamma must lie in (0, 1]")
        if self.lr_decay_every < 1:
            raise ConfigError("lr_decay_every must be >= 1")
        if not 0.0 <= self.validation_fraction < 1.0:
            raise ConfigError("validation_fraction must lie in [0, 1)")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class AdamState:
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    t: int = 0


def adam_step(params: dict[str, np.ndarray], grads: dict[str, np.ndarray | None], state: AdamState,
              lr: float = 1e-3, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8) -> AdamState:
    """Bias-corrected Adam update applied in place to ``params`` arrays.

    A missing gradient counts as zero. Non-finite gradients abort before any
    parameter is touched.
    """
    for name, g in grads.items():
        if g is not None and not np.all(np.isfinite(g)):
            raise DivergenceError(f"non-finite gradient for parameter {name!r} at step {state.t + 1}")
    state.t += 1
    c1 = 1.0 - beta1 ** state.t
    c2 = 1.0 - beta2 ** state.t
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(p)
        if name not in state.m:
            state.m[name] = np.zeros_like(p)
            state.v[name] = np.zeros_like(p)
        m = state.m[name]
        v = state.v[name]
        m *= beta1
        m += (1 - beta1) * g
        v *= beta2
        v += (1 - beta2) * g * g
        p -= (lr * (m / c1) / (np.sqrt(v / c2) + eps)).astype(p.dtype, copy=False)
    return state


AUGMENTATIONS = ("identity", "hflip", "vflip", "rot90", "rot180", "rot270")


def apply_augmentation(image: np.ndarray, kind: str) -> np.ndarray:
    """Exact, label-preserving pixel permutations of a (C, S, S) image."""
    if kind == "identity":
        return image.copy()
    if kind == "hflip":
        return image[:, :, ::-1].copy()
    if kind == "vflip":
        return image[:, ::-1, :].copy()
    if kind.startswith("rot"):
        return np.rot90(image, int(kind[3:]) // 90, axes=(1, 2)).copy()
    raise ContractError(f"unknown augmentation {kind!r}")


def augment(image: np.ndarray, rng) -> np.ndarray:
    if image.shape[-1] != image.shape[-2]:
        raise ContractError("augmentation requires square images")
    return apply_augmentation(image, AUGMENTATIONS[int(rng.integers(len(AUGMENTATIONS)))])


def balance_dataset(images: np.ndarray, labels: np.ndarray, rng) -> tuple[np.ndarray, np.ndarray]:
    """Oversample minority classes with augmented copies up to the majority count.

    Originals are kept in place; copies are appended.
    """
    labels = np.asarray(labels)
    classes, counts = np.unique(labels, return_counts=True)
    if classes.size == 0:
        raise ContractError("cannot balance an empty dataset")
    target = counts.max()
    extra_x, extra_y = [], []
    for cls, count in zip(classes, counts):
        idx = np.flatnonzero(labels == cls)
        need = target - count
        if need == 0:
            continue
        order = rng.permutation(idx)
        for j in range(need):
            extra_x.append(augment(images[order[j % len(order)]], rng))
            extra_y.append(cls)
    if not extra_x:
        return images, labels
    return (np.concatenate([images, np.stack(extra_x).astype(images.dtype)]),
            np.concatenate([labels, np.asarray(extra_y, dtype=labels.dtype)]))


def split_validation(n: int, fraction: float, seed: int) -> tuple[np.ndarray, np.ndarray]:
    order = np.random.default_rng([seed, 80]).permutation(n)
    n_val = int(round(n * fraction))
    return np.sort(order[n_val:]), np.sort(order[:n_val])


@dataclass
class EpochRecord:
    epoch: int
    rec_loss: float
    cls_loss: float
    loss: float
    val_accuracy: float | None
    learning_rate: float


@dataclass
class TrainHistory:
    initial_rec_loss: float
    initial_cls_loss: float
    initial_loss: float
    epochs: list[EpochRecord] = field(default_factory=list)
    val_metrics: MetricsReport | None = None

    def to_table(self, sep: str = "\t") -> str:
        rows = [sep.join(["epoch", "L_rec", "L_c", "L", "val_accuracy"])]
        rows.append(sep.join(["0", f"{self.initial_rec_loss:.6f}", f"{self.initial_cls_loss:.6f}",
                              f"{self.initial_loss:.6f}", ""]))
        for r in self.epochs:
            acc = "" if r.val_accuracy is None else f"{r.val_accuracy:.4f}"
            rows.append(sep.join([str(r.epoch), f"{r.rec_loss:.6f}", f"{r.cls_loss:.6f}", f"{r.loss:.6f}", acc]))
        return "\n".join(rows) + "\n"


def batch_losses(params: FGRNetParams, images: np.ndarray, labels: np.ndarray, rec_loss: str, alpha: float):
    recon, logits = forward_train(params, images)
    l_rec = reconstruction_loss(rec_loss)(recon, T.Tensor(images.astype(recon.dtype, copy=False)))
    l_c = cross_entropy(logits, labels)
    return l_rec, l_c, combined_loss(l_rec, l_c, alpha)


def evaluate_loss(params: FGRNetParams, images, labels, rec_loss: str, alpha: float, batch_size: int = 16):
    """Sample-weighted mean of (L_rec, L_c, L) over a dataset, no gradients."""
    frozen = params.frozen()
    totals = np.zeros(3)
    for start in range(0, len(images), batch_size):
        xb, yb = images[start:start + batch_size], labels[start:start + batch_size]
        parts = batch_losses(frozen, xb, yb, rec_loss, alpha)
        totals += len(xb) * np.array([p.item() for p in parts])
    return tuple(totals / len(images))


def predict_logits(params: FGRNetParams, images: np.ndarray, batch_size: int = 32) -> np.ndarray:
    frozen = params.frozen()
    out = [forward_infer(frozen, images[s:s + batch_size]).data for s in range(0, len(images), batch_size)]
    return np.concatenate(out) if out else np.zeros((0, params.config.num_classes))


def predict(params: FGRNetParams, images: np.ndarray, batch_size: int = 32) -> np.ndarray:
    return predict_logits(params, images, batch_size).argmax(axis=1)


def mean_ssim(params: FGRNetParams, images: np.ndarray, batch_size: int = 16) -> float:
    frozen = params.frozen()
    vals = []
    for s in range(0, len(images), batch_size):
        xb = images[s:s + batch_size]
        recon, _ = forward_train(frozen, xb)
        for r, x in zip(recon.data, xb):
            vals.append(ssim(T.Tensor(r.astype(np.float64)), T.Tensor(x.astype(np.float64))).item())
    return float(np.mean(vals))


def train(params: FGRNetParams, images: np.ndarray, labels: np.ndarray, config: TrainConfig,
          validation: tuple[np.ndarray, np.ndarray] | None = None) -> tuple[FGRNetParams, TrainHistory]:
    """Optimise encoder, decoder and classifier jointly; returns new params.

    Without ``validation`` a seeded split of ``images`` is held out.
    """
    config.validate()
    images = np.asarray(images, dtype=np.dtype(params.config.dtype))
    labels = np.asarray(labels, dtype=np.int64)
    if len(images) != len(labels) or len(images) == 0:
        raise ContractError("images and labels must be non-empty and of equal length")
    if validation is None and config.validation_fraction > 0:
        tr, va = split_validation(len(images), config.validation_fraction, config.seed)
        validation = (images[va], labels[va])
        images, labels = images[tr], labels[tr]
    rng = np.random.default_rng(config.seed)
    if config.balance:
        images, labels = balance_dataset(images, labels, rng)

    params = params.copy()
    for t in params.tensors.values():
        t.requires_grad = True
    arrays = {k: t.data for k, t in params.tensors.items()}
    state = AdamState()
    k = params.config.num_classes

    l_rec0, l_c0, l0 = evaluate_loss(params, images, labels, config.rec_loss, config.alpha)
    history = TrainHistory(l_rec0, l_c0, l0)
    log.info("initial loss %.4f (rec %.4f, cls %.4f)", l0, l_rec0, l_c0)

    lr = config.learning_rate
    for epoch in range(1, config.epochs + 1):
        if config.lr_decay_gamma is not None and epoch > 1 and (epoch - 1) % config.lr_decay_every == 0:
            lr *= config.lr_decay_gamma
        order = rng.permutation(len(images))
        sums = np.zeros(3)
        for step, start in enumerate(range(0, len(order), config.batch_size)):
            idx = order[start:start + config.batch_size]
            xb = images[idx]
            if config.augment:
                xb = np.stack([augment(x, rng) for x in xb])
            params.zero_grad()
            l_rec, l_c, loss = batch_losses(params, xb, labels[idx], config.rec_loss, config.alpha)
            if not np.isfinite(loss.item()):
                raise DivergenceError(f"loss became non-finite at epoch {epoch}, step {step}")
            T.backward(loss)
            adam_step(arrays, {k_: t.grad for k_, t in params.tensors.items()}, state,
                      lr, config.beta1, config.beta2, config.eps)
            sums += len(idx) * np.array([l_rec.item(), l_c.item(), loss.item()])
        means = sums / len(order)
        val_acc = None
        if validation is not None and len(validation[0]):
            report = evaluate_predictions(predict(params, validation[0]), validation[1], k)
            val_acc = report.accuracy
            history.val_metrics = report
        history.epochs.append(EpochRecord(epoch, *means, val_acc, lr))
        log.info("epoch %d: L_rec %.4f L_c %.4f L %.4f val_acc %s", epoch, *means, val_acc)
    params.zero_grad()
    return params, history
