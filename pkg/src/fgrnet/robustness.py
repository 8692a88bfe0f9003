"""Common-corruption harness and targeted PGD."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy.ndimage import affine_transform, gaussian_filter

from . import tensor as T
from .exceptions import ConfigError, ContractError
from .metrics import MetricsReport, evaluate_predictions
from .model import FGRNetParams, forward_infer
from .tensor import Tensor
from .training import predict

# kind -> (default range, identity value)
PERTURBATIONS = {
    "GaussianBlur": ((0.5, 1.5), 0.0),
    "AdditiveGaussian": ((0.5 / 255.0, 0.04), 0.0),
    "GammaContrast": ((0.5, 1.5), 1.0),
    "AdditivePoisson": ((1.0, 1.0), 0.0),
    "Affine": ((0.5, 1.5), 1.0),
    "Multiplicative": ((0.1, 5.5), 1.0),
}
POISSON_LAMBDA = 10.0


@dataclass
class PerturbationSpec:
    """One corruption family with the range its parameter is drawn from.

    For AdditivePoisson the parameter is the blend weight of the shot noise
    (1 = full Poisson(lam * x) / lam resample, 0 = untouched).
    """

    kind: str
    low: float | None = None
    high: float | None = None
    seed: int = 0
    lam: float = POISSON_LAMBDA

    def __post_init__(self):
        if self.kind not in PERTURBATIONS:
            raise ConfigError(f"unknown perturbation {self.kind!r}; choose from {sorted(PERTURBATIONS)}")
        lo, hi = PERTURBATIONS[self.kind][0]
        self.low = lo if self.low is None else float(self.low)
        self.high = hi if self.high is None else float(self.high)
        if self.low > self.high:
            raise ConfigError(f"{self.kind}: low {self.low} exceeds high {self.high}")
        if self.kind in ("GaussianBlur", "AdditiveGaussian", "AdditivePoisson") and self.low < 0:
            raise ConfigError(f"{self.kind}: parameter must be non-negative")
        if self.kind in ("GammaContrast", "Affine") and self.low <= 0:
            raise ConfigError(f"{self.kind}: parameter must be positive")
        if self.kind == "Multiplicative" and self.low < 0:
            raise ConfigError("Multiplicative: factor must be non-negative")
        if self.lam <= 0:
            raise ConfigError("Poisson rate must be positive")

    @classmethod
    def identity(cls, kind: str, seed: int = 0) -> "PerturbationSpec":
        value = PERTURBATIONS[kind][1]
        return cls(kind, value, value, seed)

    @property
    def name(self) -> str:
        return self.kind


def default_specs(seed: int = 0) -> list[PerturbationSpec]:
    return [PerturbationSpec(kind, seed=seed) for kind in PERTURBATIONS]


def _scale_about_centre(image: np.ndarray, scale: float) -> np.ndarray:
    if scale == 1.0:
        return image.copy()
    H, W = image.shape[-2:]
    centre = np.array([(H - 1) / 2.0, (W - 1) / 2.0])
    matrix = np.eye(2) / scale
    offset = centre - matrix @ centre
    return np.stack([affine_transform(ch, matrix, offset=offset, order=1, mode="constant", cval=0.0)
                     for ch in image])


def perturb(image: np.ndarray, spec: PerturbationSpec, index: int = 0) -> np.ndarray:
    """Apply ``spec`` to a (C, H, W) image in [0, 1]; the output is clamped to [0, 1].

    The parameter and any noise come from a generator seeded by
    ``(spec.seed, index)``.
    """
    x = np.asarray(image, dtype=np.float64)
    rng = np.random.default_rng([spec.seed, index])
    value = spec.low if spec.low == spec.high else float(rng.uniform(spec.low, spec.high))
    kind = spec.kind
    if kind == "GaussianBlur":
        out = x.copy() if value == 0 else np.stack([gaussian_filter(ch, value, mode="nearest") for ch in x])
    elif kind == "AdditiveGaussian":
        out = x + rng.normal(0.0, value, x.shape) if value > 0 else x.copy()
    elif kind == "GammaContrast":
        out = x ** value
    elif kind == "AdditivePoisson":
        shot = rng.poisson(spec.lam * np.clip(x, 0, 1)) / spec.lam if value > 0 else x
        out = x + value * (shot - x)
    elif kind == "Affine":
        out = _scale_about_centre(x, value)
    elif kind == "Multiplicative":
        out = x * value
    else:  # guarded by PerturbationSpec
        raise ContractError(kind)
    return np.clip(out, 0.0, 1.0).astype(np.asarray(image).dtype)


@dataclass
class AttackConfig:
    steps: int = 20
    step_size: float = 0.01
    radius: float = 0.13
    target_class: int = 0
    random_start: bool = False
    seed: int = 0

    def __post_init__(self):
        if self.steps < 1:
            raise ConfigError("PGD needs at least one step")
        if self.step_size <= 0:
            raise ConfigError("step_size must be positive")
        if self.radius < 0:
            raise ConfigError("radius must be non-negative")


@dataclass
class AttackResult:
    adversarial: np.ndarray
    probabilities: list[float]
    iterates_linf: list[float] = field(default_factory=list)
    iterates_in_range: list[bool] = field(default_factory=list)


def _target_probability(logits: np.ndarray, target: int) -> float:
    z = logits.astype(np.float64)
    z = z - z.max()
    return float(np.exp(z[target]) / np.exp(z).sum())


def _target_nll(logits: Tensor, target: int) -> Tensor:
    # unclamped -log softmax: the floored cross-entropy has zero gradient once the
    # target probability drops below its floor, which would freeze the attack
    shifted = logits - Tensor(logits.data.max(axis=1, keepdims=True))
    return T.log(T.tsum(T.exp(shifted), axis=1))[0] - shifted[0, target]


def pgd_attack(params: FGRNetParams, image: np.ndarray, config: AttackConfig) -> AttackResult:
    """Targeted L-inf PGD: signed descent on the target-class negative log-probability.

    Every iterate is projected onto the radius ball around ``image`` and
    clamped to [0, 1]. ``probabilities`` holds the target-class softmax
    probability before the first step and after each step.
    """
    frozen = params.frozen()
    k = params.config.num_classes
    if not 0 <= config.target_class < k:
        raise ContractError(f"target class {config.target_class} outside [0, {k})")
    dtype = np.dtype(params.config.dtype)
    orig = np.asarray(image, dtype=np.float64)
    if orig.ndim == 4:
        orig = orig[0]
    lo = np.maximum(orig - config.radius, 0.0)
    hi = np.minimum(orig + config.radius, 1.0)
    x = orig.copy()
    if config.random_start and config.radius > 0:
        rng = np.random.default_rng(config.seed)
        x = np.clip(orig + rng.uniform(-config.radius, config.radius, orig.shape), lo, hi)

    probs, linf, in_range = [], [], []

    def record(logits):
        probs.append(_target_probability(logits[0], config.target_class))
        linf.append(float(np.abs(x - orig).max()))
        in_range.append(bool(x.min() >= 0.0 and x.max() <= 1.0))

    for _ in range(config.steps):
        xt = Tensor(x[None].astype(dtype), requires_grad=True)
        logits = forward_infer(frozen, xt)
        record(logits.data)
        T.backward(_target_nll(logits, config.target_class))
        x = np.clip(x - config.step_size * np.sign(xt.grad[0].astype(np.float64)), lo, hi)
    record(forward_infer(frozen, x[None].astype(dtype)).data)
    return AttackResult(x.astype(dtype), probs, linf, in_range)


@dataclass
class RobustnessRow:
    name: str
    metrics: MetricsReport


def robustness_report(params: FGRNetParams, images: np.ndarray, labels: np.ndarray,
                      specs: Sequence[PerturbationSpec], n: int | None = 100,
                      class_names=None) -> list[RobustnessRow]:
    """Clean metrics row followed by one row per perturbation, all on the same subset."""
    images = np.asarray(images)
    labels = np.asarray(labels)
    if len(images) == 0:
        raise ContractError("robustness report needs at least one image")
    if n is not None:
        images, labels = images[:n], labels[:n]
    k = params.config.num_classes
    rows = [RobustnessRow("FGR-Net", evaluate_predictions(predict(params, images), labels, k, class_names))]
    for spec in specs:
        perturbed = np.stack([perturb(img, spec, i) for i, img in enumerate(images)])
        rows.append(RobustnessRow(spec.name, evaluate_predictions(predict(params, perturbed), labels, k, class_names)))
    return rows


def robustness_table(rows: Sequence[RobustnessRow], sep: str = "\t") -> str:
    out = [sep.join(["noise_type", "accuracy", "precision", "recall", "f1"])]
    for r in rows:
        m = r.metrics
        out.append(sep.join([r.name, f"{m.accuracy:.4f}", f"{m.macro_precision:.4f}",
                             f"{m.macro_recall:.4f}", f"{m.macro_f1:.4f}"]))
    return "\n".join(out) + "\n"
