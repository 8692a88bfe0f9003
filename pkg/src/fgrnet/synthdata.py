"""Procedural fundus-like images with controllable quality degradation.

Stands in for clinical datasets: a circular aperture with black surround, a
warm radial background, bright optic disk, dark macula and a random-walk
vessel tree. Ungradable samples are produced by degrading clean ones.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.ndimage import gaussian_filter

from .exceptions import ContractError

TWO_CLASS = "two_class"
THREE_CLASS = "three_class"

# label -> severity band; bands leave gaps so classes never overlap
SEVERITY_BANDS = {
    TWO_CLASS: {1: (0.0, 0.1), 0: (0.6, 1.0)},
    THREE_CLASS: {0: (0.0, 0.1), 1: (0.3, 0.5), 2: (0.7, 1.0)},
}
CLASS_NAMES = {
    TWO_CLASS: ["ungradable", "gradable"],
    THREE_CLASS: ["good", "usable", "reject"],
}
APERTURE_FRACTION = 0.46
MIN_INSIDE = 2.0 / 255.0


@dataclass
class SyntheticSample:
    image: np.ndarray
    label: int
    scheme: str
    gen_params: dict = field(default_factory=dict)


@dataclass
class SyntheticDataset:
    train: list[SyntheticSample]
    test: list[SyntheticSample]
    scheme: str

    @staticmethod
    def arrays(samples: list[SyntheticSample]) -> tuple[np.ndarray, np.ndarray]:
        if not samples:
            return np.zeros((0,)), np.zeros((0,), dtype=np.int64)
        return (np.stack([s.image for s in samples]).astype(np.float32),
                np.array([s.label for s in samples], dtype=np.int64))

    @property
    def class_names(self) -> list[str]:
        return CLASS_NAMES[self.scheme]


def aperture_mask(size: int) -> np.ndarray:
    yy, xx = np.mgrid[0:size, 0:size]
    c = (size - 1) / 2.0
    return (yy - c) ** 2 + (xx - c) ** 2 <= (APERTURE_FRACTION * size) ** 2


def _stamp(canvas: np.ndarray, y: float, x: float, radius: float, strength: float):
    size = canvas.shape[0]
    r = int(np.ceil(radius + 1))
    y0, y1 = max(0, int(y) - r), min(size, int(y) + r + 2)
    x0, x1 = max(0, int(x) - r), min(size, int(x) + r + 2)
    if y0 >= y1 or x0 >= x1:
        return
    yy, xx = np.mgrid[y0:y1, x0:x1]
    d = np.sqrt((yy - y) ** 2 + (xx - x) ** 2)
    soft = np.clip(radius + 0.5 - d, 0.0, 1.0) * strength
    np.maximum(canvas[y0:y1, x0:x1], soft, out=canvas[y0:y1, x0:x1])


def generate_fundus(seed: int, size: int = 64) -> np.ndarray:
    """Clean synthetic fundus image, shape (3, size, size), values in [0, 1]."""
    image, _ = _generate(seed, size)
    return image


def _generate(seed: int, size: int) -> tuple[np.ndarray, dict]:
    if size < 32:
        raise ContractError(f"size must be at least 32, got {size}")
    rng = np.random.default_rng(seed)
    mask = aperture_mask(size)
    c = (size - 1) / 2.0
    radius = APERTURE_FRACTION * size
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    rho = np.sqrt((yy - c) ** 2 + (xx - c) ** 2) / radius

    tint = np.array([0.78, 0.36, 0.16]) + rng.uniform(-0.06, 0.06, 3)
    falloff = 1.0 - 0.45 * rho ** 2
    img = tint[:, None, None] * falloff[None]

    # optic disk sits on one side of the centre, macula on the other
    side = rng.choice([-1.0, 1.0])
    disk_y = c + rng.uniform(-0.12, 0.12) * radius
    disk_x = c + side * rng.uniform(0.35, 0.5) * radius
    disk_ry = radius * rng.uniform(0.13, 0.17)
    disk_rx = disk_ry * rng.uniform(0.8, 0.95)
    disk = np.exp(-(((yy - disk_y) / disk_ry) ** 2 + ((xx - disk_x) / disk_rx) ** 2) ** 2)
    img = img + np.array([0.25, 0.45, 0.35])[:, None, None] * disk[None]

    mac_y = disk_y + rng.uniform(-0.05, 0.05) * radius
    mac_x = c - side * rng.uniform(0.05, 0.15) * radius
    mac_r = radius * rng.uniform(0.12, 0.16)
    macula = np.exp(-((yy - mac_y) ** 2 + (xx - mac_x) ** 2) / (2 * mac_r ** 2))
    img = img * (1.0 - 0.35 * macula[None])

    vessels = np.zeros((size, size))
    n_vessels = int(rng.integers(6, 11))
    step = size / 64.0
    for v in range(n_vessels):
        angle = 2 * np.pi * v / n_vessels + rng.uniform(-0.3, 0.3)
        y, x = disk_y, disk_x
        width = rng.uniform(0.9, 1.4) * step
        n_steps = int(rng.integers(25, 40))
        for _ in range(n_steps):
            angle += rng.normal(0.0, 0.18)
            y += np.sin(angle) * 1.5 * step
            x += np.cos(angle) * 1.5 * step
            _stamp(vessels, y, x, width, 1.0)
            width = max(0.45 * step, width * 0.985)
            if (y - c) ** 2 + (x - c) ** 2 > radius ** 2:
                break
    vessel_color = np.array([0.45, 0.12, 0.08])
    img = img * (1 - 0.7 * vessels[None]) + vessel_color[:, None, None] * 0.7 * vessels[None] * 0.5

    img = np.clip(img, MIN_INSIDE, 1.0) * mask[None]
    params = {"vessel_count": n_vessels, "disk_center": [float(disk_y), float(disk_x)]}
    return img, params


def sharpness_energy(image: np.ndarray) -> float:
    """Sum of squared first differences between neighbouring in-aperture pixels."""
    inside = image.max(axis=0) > 0
    dy = (image[:, 1:, :] - image[:, :-1, :]) ** 2
    dx = (image[:, :, 1:] - image[:, :, :-1]) ** 2
    my = inside[1:, :] & inside[:-1, :]
    mx = inside[:, 1:] & inside[:, :-1]
    return float((dy * my[None]).sum() + (dx * mx[None]).sum())


def degrade(image: np.ndarray, severity: float, rng) -> tuple[np.ndarray, dict]:
    """Blur, exposure shift, contrast compression and haze scaled by ``severity``.

    Blur uses mask-normalised convolution so the black surround does not
    bleed in. Returns the degraded image and the applied parameters.
    """
    severity = float(np.clip(severity, 0.0, 1.0))
    rng = np.random.default_rng(rng)
    exposure_dir = rng.choice([-1.0, 1.0])
    haze_color = np.array([0.55, 0.45, 0.40]) + rng.uniform(-0.05, 0.05, 3)
    size = image.shape[-1]
    applied = {
        "severity": severity,
        "blur_sigma": severity * size / 20.0,
        "exposure_offset": float(exposure_dir * 0.25 * severity),
        "contrast_factor": 1.0 - 0.7 * severity,
        "haze_weight": 0.5 * severity,
    }
    if severity == 0.0:
        return image.copy(), applied

    inside = image.max(axis=0) > 0
    m = inside.astype(np.float64)
    out = image.astype(np.float64)
    sigma = applied["blur_sigma"]
    norm = gaussian_filter(m, sigma, mode="constant")
    norm = np.where(norm > 1e-8, norm, 1.0)
    out = np.stack([gaussian_filter(ch * m, sigma, mode="constant") / norm for ch in out])

    mean = out[:, inside].mean(axis=1)[:, None, None]
    out = mean + (out - mean) * applied["contrast_factor"]
    w = applied["haze_weight"]
    out = (1 - w) * out + w * haze_color[:, None, None]
    out = out + applied["exposure_offset"]
    out = np.clip(out, MIN_INSIDE, 1.0) * m[None]
    return out.astype(image.dtype), applied


def quantize(image: np.ndarray) -> np.ndarray:
    """Snap to the 8-bit grid so on-disk round trips are lossless."""
    # same float32 arithmetic as read_ppm, so round trips are bit-exact
    return np.round(np.clip(image, 0.0, 1.0) * 255.0).astype(np.float32) / np.float32(255.0)


def image_hash(image: np.ndarray) -> str:
    return hashlib.sha256(np.ascontiguousarray(quantize(image)).tobytes()).hexdigest()


def make_dataset(n: int, scheme: str = TWO_CLASS, seed: int = 0, size: int = 64,
                 test_fraction: float = 0.2) -> SyntheticDataset:
    """Balanced labelled samples with a stratified, seeded train/test split."""
    if scheme not in SEVERITY_BANDS:
        raise ContractError(f"unknown scheme {scheme!r}")
    bands = SEVERITY_BANDS[scheme]
    k = len(bands)
    per_class = n // k
    if per_class < 10:
        raise ContractError(f"need at least 10 samples per class, got n={n} for {k} classes")

    root = np.random.SeedSequence(seed)
    train, test = [], []
    index = 0
    for label in sorted(bands):
        lo, hi = bands[label]
        samples = []
        for _ in range(per_class):
            sample_seq = np.random.SeedSequence([root.entropy, index])
            index += 1
            gen_seed, deg_seed, sev_seed = sample_seq.generate_state(3)
            clean, gen = _generate(int(gen_seed), size)
            severity = float(np.random.default_rng(int(sev_seed)).uniform(lo, hi))
            img, applied = degrade(clean, severity, int(deg_seed))
            samples.append(SyntheticSample(quantize(img), label, scheme, {**gen, **applied}))
        order = np.random.default_rng([seed, label]).permutation(per_class)
        n_test = int(round(per_class * test_fraction))
        test.extend(samples[i] for i in order[:n_test])
        train.extend(samples[i] for i in order[n_test:])
    return SyntheticDataset(train=train, test=test, scheme=scheme)


MANIFEST = "manifest.tsv"


def save_dataset(dataset: SyntheticDataset, directory) -> Path:
    """Write one P6 image per sample plus a tab-separated manifest."""
    from .imageio import write_ppm

    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    lines = ["filename\tlabel\tscheme\tsplit\tgen_params"]
    for split, samples in (("train", dataset.train), ("test", dataset.test)):
        for i, s in enumerate(samples):
            fname = f"{split}_{i:05d}.ppm"
            write_ppm(directory / fname, s.image)
            lines.append("\t".join([fname, str(s.label), s.scheme, split, json.dumps(s.gen_params, sort_keys=True)]))
    (directory / MANIFEST).write_text("\n".join(lines) + "\n")
    return directory


def load_dataset(directory) -> SyntheticDataset:
    from .imageio import read_ppm

    directory = Path(directory)
    manifest = directory / MANIFEST
    if not manifest.exists():
        raise ContractError(f"no {MANIFEST} in {directory}")
    train, test, scheme = [], [], TWO_CLASS
    for line in manifest.read_text().splitlines()[1:]:
        if not line.strip():
            continue
        fname, label, scheme, split, params = line.split("\t")
        sample = SyntheticSample(read_ppm(directory / fname), int(label), scheme, json.loads(params))
        (train if split == "train" else test).append(sample)
    return SyntheticDataset(train=train, test=test, scheme=scheme)
