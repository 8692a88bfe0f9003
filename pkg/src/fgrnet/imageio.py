"""Binary PPM (P6) images, saliency raw files and heat overlays."""

from __future__ import annotations

import re
from pathlib import Path

import numpy as np

from .exceptions import ContractError, DimensionError
from .interpret import SaliencyMap

_SAL_MAGIC = "FGRSAL1"


def write_ppm(path, image: np.ndarray) -> None:
    """Write a (3, H, W) float image in [0, 1] as 8-bit P6."""
    image = np.asarray(image)
    if image.ndim != 3 or image.shape[0] != 3:
        raise DimensionError(f"expected a (3, H, W) image, got {image.shape}", axis="channel")
    pixels = np.round(np.clip(image, 0.0, 1.0) * 255.0).astype(np.uint8)
    H, W = pixels.shape[1:]
    with open(path, "wb") as fh:
        fh.write(f"P6\n{W} {H}\n255\n".encode("ascii"))
        fh.write(np.ascontiguousarray(pixels.transpose(1, 2, 0)).tobytes())


def read_ppm(path) -> np.ndarray:
    """Read a P6 file into a (3, H, W) float32 image in [0, 1]."""
    try:
        raw = Path(path).read_bytes()
    except OSError as exc:
        raise ContractError(f"cannot read image {path}: {exc}") from exc
    # header: magic, width, height, maxval, each separated by whitespace; '#' comments allowed
    tokens, pos = [], 0
    while len(tokens) < 4:
        m = re.compile(rb"\s*(#[^\n]*\n\s*)*([^\s#]+)").match(raw, pos)
        if m is None:
            raise ContractError(f"{path}: malformed PPM header")
        tokens.append(m.group(2))
        pos = m.end()
    if tokens[0] != b"P6":
        raise ContractError(f"{path}: not a binary PPM (P6) file")
    width, height, maxval = (int(t) for t in tokens[1:])
    if maxval != 255:
        raise ContractError(f"{path}: only maxval 255 is supported")
    pos += 1
    body = raw[pos:pos + width * height * 3]
    if len(body) != width * height * 3:
        raise ContractError(f"{path}: truncated pixel data")
    pixels = np.frombuffer(body, dtype=np.uint8).reshape(height, width, 3)
    return pixels.transpose(2, 0, 1).astype(np.float32) / np.float32(255.0)


def write_saliency(path, smap: SaliencyMap) -> None:
    """Text header line pair followed by little-endian float64 values, row-major."""
    H, W = smap.values.shape
    header = f"{_SAL_MAGIC}\n{smap.method} {H} {W} {smap.class_index} {int(smap.signed)}\n"
    with open(path, "wb") as fh:
        fh.write(header.encode("ascii"))
        fh.write(np.ascontiguousarray(smap.values, dtype="<f8").tobytes())


def read_saliency(path) -> SaliencyMap:
    raw = Path(path).read_bytes()
    first = raw.index(b"\n")
    second = raw.index(b"\n", first + 1)
    if raw[:first].decode("ascii") != _SAL_MAGIC:
        raise ContractError(f"{path}: not a saliency file")
    method, H, W, cls, signed = raw[first + 1:second].decode("ascii").split()
    H, W = int(H), int(W)
    values = np.frombuffer(raw[second + 1:], dtype="<f8")
    if values.size != H * W:
        raise ContractError(f"{path}: expected {H * W} values, found {values.size}")
    return SaliencyMap(values.reshape(H, W).astype(np.float64), method, int(cls), bool(int(signed)))


def render_overlay(image: np.ndarray, smap: SaliencyMap | np.ndarray, polarity: str = "signed",
                   strength: float = 0.7) -> np.ndarray:
    """Colour a saliency map over the grayscale image; returns (3, H, W) in [0, 1].

    ``signed``: positive values tint green, negative red, scaled by the map's
    largest magnitude. ``magnitude``: |value| rescaled to [0, 1] on a
    black-red-yellow ramp.
    """
    values = smap.values if isinstance(smap, SaliencyMap) else np.asarray(smap, dtype=np.float64)
    image = np.asarray(image, dtype=np.float64)
    if image.ndim != 3 or values.shape != image.shape[1:]:
        raise DimensionError(f"map shape {values.shape} does not match image {image.shape}", axis="height")
    gray = image.mean(axis=0)
    out = np.stack([gray, gray, gray])
    peak = np.abs(values).max()
    if peak == 0:
        return out
    if polarity == "signed":
        pos = np.clip(values, 0, None) / peak * strength
        neg = np.clip(-values, 0, None) / peak * strength
        green = np.array([0.0, 1.0, 0.0])[:, None, None]
        red = np.array([1.0, 0.0, 0.0])[:, None, None]
        out = out * (1 - pos - neg) + green * pos + red * neg
    elif polarity == "magnitude":
        level = np.abs(values) / peak
        ramp = np.stack([np.clip(2 * level, 0, 1), np.clip(2 * level - 1, 0, 1), np.zeros_like(level)])
        w = level * strength
        out = out * (1 - w) + ramp * w
    else:
        raise ContractError(f"polarity must be 'signed' or 'magnitude', got {polarity!r}")
    return np.clip(out, 0.0, 1.0)
