"""Attribution maps (gradient, GradCAM, occlusion) and their latency benchmark."""

from __future__ import annotations

import time
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from . import tensor as T
from .exceptions import ContractError
from .model import FGRNetParams, classify, encode, forward_infer
from .tensor import Tensor

GRADIENT = "Gradient"
GRADCAM = "GradCAM"
OCCLUSION = "Occlusion"
PREDICTION = "prediction"


@dataclass
class SaliencyMap:
    values: np.ndarray
    method: str
    class_index: int
    signed: bool = True

    @property
    def shape(self) -> tuple[int, int]:
        return self.values.shape


def _batch(image, dtype) -> np.ndarray:
    x = np.asarray(image.data if isinstance(image, Tensor) else image)
    if x.ndim == 3:
        x = x[None]
    if x.ndim != 4 or x.shape[0] != 1:
        raise ContractError(f"expected a single (C, H, W) image, got shape {x.shape}")
    return x.astype(dtype, copy=False)


def _scorer(model) -> tuple[Callable[[Tensor], Tensor], np.dtype]:
    """Logit function and working dtype for FGR-Net params or a plain callable."""
    if isinstance(model, FGRNetParams):
        frozen = model.frozen()
        return (lambda x: forward_infer(frozen, x)), np.dtype(model.config.dtype)
    if callable(model):
        return model, np.dtype(np.float64)
    raise ContractError("model must be FGRNetParams or a callable returning logits")


def gradient_saliency(model, image, class_index: int) -> SaliencyMap:
    """d(class logit)/d(pixel), averaged over colour channels."""
    score, dtype = _scorer(model)
    x = Tensor(_batch(image, dtype).copy(), requires_grad=True)
    logits = score(x)
    _check_class(logits, class_index)
    target = logits[0, class_index]
    if target.requires_grad:
        T.backward(target)
    grad = x.grad if x.grad is not None else np.zeros_like(x.data)
    return SaliencyMap(grad[0].mean(axis=0), GRADIENT, class_index, signed=True)


def _check_class(logits: Tensor, class_index: int):
    if not 0 <= class_index < logits.shape[1]:
        raise ContractError(f"class index {class_index} outside [0, {logits.shape[1]})")


def gradcam(model, image, class_index: int, rectify: bool = False, layer: str = "last_conv") -> SaliencyMap:
    """Channel-mean of d(class logit)/d(feature map), bilinearly resized to the input.

    ``layer`` picks the encoder's last conv output ("last_conv", before the
    final pool) or the pooled bottleneck ("bottleneck"). ``model`` may also be
    a ``(features, head)`` pair of callables.

    The feature network runs untracked; only the head is differentiated.
    """
    if isinstance(model, FGRNetParams):
        frozen = model.frozen()
        x = Tensor(_batch(image, model.config.dtype))
        bottleneck, skips = encode(frozen, x)
        if layer == "last_conv":
            feature = skips[-1]
            head = lambda f: classify(frozen, T.maxpool2d(f, 2, 2))
        elif layer == "bottleneck":
            feature = bottleneck
            head = lambda f: classify(frozen, f)
        else:
            raise ContractError(f"unknown GradCAM layer {layer!r}")
    else:
        features, head = model
        x = Tensor(_batch(image, np.float64))
        feature = features(x)
    feature = Tensor(feature.data, requires_grad=True)
    logits = head(feature)
    _check_class(logits, class_index)
    T.backward(logits[0, class_index])
    grad = feature.grad
    channel_mean = Tensor(grad.mean(axis=1, keepdims=True))
    H, W = x.shape[2:]
    projected = T.resize_bilinear(channel_mean, H, W).data[0, 0]
    if rectify:
        projected = np.maximum(projected, 0)
    return SaliencyMap(projected, GRADCAM, class_index, signed=not rectify)


def occlusion_positions(side: int, patch: int, stride: int) -> list[int]:
    """Patch offsets along one axis; the last patch is flush with the border."""
    pos = list(range(0, side - patch + 1, stride))
    if pos[-1] != side - patch:
        pos.append(side - patch)
    return pos


def occlusion(model, image, class_index: int, patch: int | None = None, stride: int | None = None,
              baseline: float = 0.5, batch_size: int = 32) -> SaliencyMap:
    """Score change when square patches are replaced by ``baseline``.

    Each pixel gets the mean, over patches covering it, of
    logit(occluded) - logit(original): positive where occlusion raises the
    class score.
    """
    score, dtype = _scorer(model)
    x = _batch(image, dtype)
    _, C, H, W = x.shape
    patch = max(1, min(H, W) // 8) if patch is None else int(patch)
    stride = max(1, patch // 2) if stride is None else int(stride)
    if stride < 1:
        raise ContractError("occlusion stride must be >= 1")
    if not 1 <= patch <= min(H, W):
        raise ContractError(f"patch {patch} must lie in [1, {min(H, W)}]")

    # the reference goes through the same batched kernels as the occluded copies,
    # so a no-op occlusion cancels exactly
    base_logits = score(Tensor(np.repeat(x, 2, axis=0)))
    _check_class(base_logits, class_index)
    base = float(base_logits.data[0, class_index])
    boxes = [(r, c) for r in occlusion_positions(H, patch, stride) for c in occlusion_positions(W, patch, stride)]
    deltas = np.empty(len(boxes))
    for start in range(0, len(boxes), batch_size):
        chunk = boxes[start:start + batch_size]
        batch = np.repeat(x, len(chunk), axis=0)
        for i, (r, c) in enumerate(chunk):
            batch[i, :, r:r + patch, c:c + patch] = baseline
        deltas[start:start + len(chunk)] = score(Tensor(batch)).data[:, class_index] - base

    total = np.zeros((H, W))
    count = np.zeros((H, W))
    for (r, c), d in zip(boxes, deltas):
        total[r:r + patch, c:c + patch] += d
        count[r:r + patch, c:c + patch] += 1
    return SaliencyMap(total / count, OCCLUSION, class_index, signed=True)


@dataclass
class TimingReport:
    method: str
    mean_ms: float
    coefficient_of_variation: float
    runs: int
    samples_ms: list[float] = field(default_factory=list, repr=False)


def _method_fn(params: FGRNetParams, image, method: str, class_index: int, occlusion_kw: dict):
    frozen = params.frozen()
    if method == PREDICTION:
        x = _batch(image, params.config.dtype)
        return lambda: forward_infer(frozen, x)
    if method == GRADIENT:
        return lambda: gradient_saliency(params, image, class_index)
    if method == GRADCAM:
        return lambda: gradcam(params, image, class_index)
    if method == OCCLUSION:
        return lambda: occlusion(params, image, class_index, **occlusion_kw)
    raise ContractError(f"unknown method {method!r}")


def timing_benchmark(params: FGRNetParams, image, methods: Sequence[str] = (PREDICTION, GRADIENT, GRADCAM, OCCLUSION),
                     runs: int = 50, class_index: int = 0, occlusion_kw: dict | None = None) -> list[TimingReport]:
    """Mean and coefficient of variation of single-image latency per method.

    One untimed warm-up call precedes the ``runs`` timed calls.
    """
    if runs < 2:
        raise ContractError("timing needs at least 2 runs")
    reports = []
    for method in methods:
        fn = _method_fn(params, image, method, class_index, occlusion_kw or {})
        fn()
        samples = []
        for _ in range(runs):
            t0 = time.perf_counter()
            fn()
            samples.append((time.perf_counter() - t0) * 1000.0)
        arr = np.asarray(samples)
        mean = float(arr.mean())
        cv = float(arr.std(ddof=1) / mean) if mean > 0 else 0.0
        reports.append(TimingReport(method, mean, cv, runs, samples))
    return reports


def timing_table(reports: Sequence[TimingReport], sep: str = "\t") -> str:
    rows = [sep.join(["method", "mean_ms", "cv", "runs"])]
    rows += [sep.join([r.method, f"{r.mean_ms:.3f}", f"{r.coefficient_of_variation:.4f}", str(r.runs)])
             for r in reports]
    return "\n".join(rows) + "\n"
