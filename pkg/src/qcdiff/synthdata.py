"""Procedural scene renderer and parametric degradation model.

Produces (image, class label, degradation spec, pseudo quality) records:
8 scene classes rendered deterministically from (class_id, rng_seed), and
4 degradation kinds whose strength maps directly to a pseudo-MOS label
(1 - strength; clean images get 1.0).
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from enum import Enum
from pathlib import Path

import numpy as np
from scipy import ndimage

from . import rng as qrng
from .checkpoint import load_tensors, save_tensors
from .errors import MissingArtifactError, ParameterError

RESOLUTION = 32
N_CLASSES = 8
CLASS_NAMES = [
    "circles",
    "rectangles",
    "stripes",
    "checker",
    "radial_gradient",
    "sine_texture",
    "scattered_dots",
    "triangle",
]


class DegradationKind(str, Enum):
    NONE = "none"
    GAUSSIAN_BLUR = "gaussian_blur"
    ADDITIVE_NOISE = "additive_noise"
    BLOCK_QUANTIZE = "block_quantize"
    CONTRAST_CRUSH = "contrast_crush"


DEGRADED_KINDS = [
    DegradationKind.GAUSSIAN_BLUR,
    DegradationKind.ADDITIVE_NOISE,
    DegradationKind.BLOCK_QUANTIZE,
    DegradationKind.CONTRAST_CRUSH,
]


@dataclass(frozen=True)
class SceneSpec:
    class_id: int
    rng_seed: int

    def __post_init__(self):
        if not 0 <= self.class_id < N_CLASSES:
            raise ParameterError(f"class_id must be in [0, {N_CLASSES - 1}], got {self.class_id}")


@dataclass(frozen=True)
class DegradationSpec:
    kind: DegradationKind
    strength: float

    def __post_init__(self):
        if not 0.0 <= self.strength <= 1.0:
            raise ParameterError(f"degradation strength must be in [0,1], got {self.strength}")


@dataclass
class TrainingRecord:
    image: np.ndarray  # (3, 32, 32) float32 in [0, 1]
    class_id: int
    degradation: DegradationSpec
    pseudo_mos: float
    scene_seed: int


# -- rendering ---------------------------------------------------------------

_YY, _XX = np.meshgrid(
    np.arange(RESOLUTION, dtype=np.float32),
    np.arange(RESOLUTION, dtype=np.float32),
    indexing="ij",
)


def _scene_rng(spec: SceneSpec) -> np.random.Generator:
    return qrng.stream(spec.rng_seed, f"scene:{spec.class_id}")


def _color(rng, lo=0.2, hi=1.0):
    return rng.uniform(lo, hi, size=3).astype(np.float32)


def render_scene(spec: SceneSpec) -> np.ndarray:
    """Render a deterministic 3x32x32 image in [0,1] for the given spec."""
    rng = _scene_rng(spec)
    img = np.empty((3, RESOLUTION, RESOLUTION), dtype=np.float32)
    img[:] = _color(rng, 0.0, 0.25)[:, None, None]
    cid = spec.class_id

    if cid == 0:  # circles
        for _ in range(int(rng.integers(2, 5))):
            cy, cx = rng.uniform(4, 28, size=2)
            r = rng.uniform(4, 9)
            mask = (_YY - cy) ** 2 + (_XX - cx) ** 2 <= r * r
            img[:, mask] = _color(rng)[:, None]
    elif cid == 1:  # rectangles
        for _ in range(int(rng.integers(2, 5))):
            y0, x0 = rng.integers(0, 20, size=2)
            h, w = rng.integers(6, 14, size=2)
            img[:, y0 : y0 + h, x0 : x0 + w] = _color(rng)[:, None, None]
    elif cid == 2:  # stripes
        width = int(rng.integers(2, 6))
        c1, c2 = _color(rng), _color(rng, 0.0, 0.5)
        axis = _XX if rng.random() < 0.5 else _YY
        band = (axis.astype(int) // width) % 2
        img[:] = np.where(band[None] == 0, c1[:, None, None], c2[:, None, None])
    elif cid == 3:  # checker
        cell = int(rng.choice([4, 8]))
        c1, c2 = _color(rng), _color(rng, 0.0, 0.4)
        board = ((_YY.astype(int) // cell) + (_XX.astype(int) // cell)) % 2
        img[:] = np.where(board[None] == 0, c1[:, None, None], c2[:, None, None])
    elif cid == 4:  # radial gradient, center strictly brightest, faint rings
        cy = cx = (RESOLUTION - 1) / 2.0
        dist = np.sqrt((_YY - cy) ** 2 + (_XX - cx) ** 2)
        profile = 1.0 - dist / dist.max()
        rings = 0.08 * (0.5 + 0.5 * np.sin(dist * rng.uniform(2.0, 3.0)))
        tint = _color(rng, 0.6, 1.0)
        img[:] = (0.9 * profile + rings)[None] * tint[:, None, None]
    elif cid == 5:  # sinusoidal texture
        fy, fx = rng.uniform(0.3, 1.2, size=2)
        phase = rng.uniform(0, 2 * np.pi)
        wave = 0.5 + 0.5 * np.sin(fy * _YY + fx * _XX + phase) * np.cos(
            0.5 * fx * _YY - fy * _XX
        )
        tint = _color(rng, 0.5, 1.0)
        img[:] = wave[None].astype(np.float32) * tint[:, None, None]
    elif cid == 6:  # scattered dots
        img[:] = _color(rng, 0.0, 0.15)[:, None, None]
        for _ in range(int(rng.integers(12, 25))):
            cy, cx = rng.integers(1, RESOLUTION - 1, size=2)
            img[:, cy - 1 : cy + 2, cx - 1 : cx + 2] = _color(rng, 0.6, 1.0)[:, None, None]
    elif cid == 7:  # triangle scene
        pts = rng.uniform(2, 30, size=(3, 2)).astype(np.float32)
        (y0, x0), (y1, x1), (y2, x2) = pts

        def edge(ya, xa, yb, xb):
            return (_XX - xa) * (yb - ya) - (_YY - ya) * (xb - xa)

        d0 = edge(y0, x0, y1, x1)
        d1 = edge(y1, x1, y2, x2)
        d2 = edge(y2, x2, y0, x0)
        inside = ((d0 >= 0) & (d1 >= 0) & (d2 >= 0)) | ((d0 <= 0) & (d1 <= 0) & (d2 <= 0))
        img[:, inside] = _color(rng)[:, None]

    return np.clip(img, 0.0, 1.0)


# -- degradations ------------------------------------------------------------

# fixed zero-mean per-block DC offsets shared by every block_quantize call
_BLOCK_DC_PATTERN = (
    np.random.Generator(np.random.Philox(20240915))
    .uniform(-1.0, 1.0, size=(3, RESOLUTION // 8, RESOLUTION // 8))
    .astype(np.float32)[:, :, None, :, None]
    .reshape(3, RESOLUTION // 8, 1, RESOLUTION // 8, 1)
)


def degrade(image: np.ndarray, spec: DegradationSpec, rng: np.random.Generator) -> np.ndarray:
    """Apply one degradation; output stays in [0,1], strength 0 is identity."""
    if image.min() < -1e-6 or image.max() > 1 + 1e-6:
        raise ParameterError("degrade() expects an image in [0,1]")
    s = float(spec.strength)
    if spec.kind == DegradationKind.NONE or s == 0.0:
        return image.astype(np.float32).copy()

    if spec.kind == DegradationKind.GAUSSIAN_BLUR:
        sigma = 2.0 * s
        out = ndimage.gaussian_filter(
            image, sigma=(0, sigma, sigma), mode="reflect", truncate=3.0
        )
    elif spec.kind == DegradationKind.ADDITIVE_NOISE:
        out = image + (0.25 * s) * rng.standard_normal(image.shape)
    elif spec.kind == DegradationKind.BLOCK_QUANTIZE:
        # JPEG-like artifact: per-8x8-block mean, residual attenuated in
        # proportion to strength, plus a fixed per-block DC shift emulating
        # DC-coefficient quantization error
        c, h, w = image.shape
        blocks = image.reshape(c, h // 8, 8, w // 8, 8)
        means = blocks.mean(axis=(2, 4), keepdims=True)
        resid = (blocks - means) * (1.0 - s)
        dc = _BLOCK_DC_PATTERN[:, : h // 8, :, : w // 8, :]
        out = (means + resid + (0.12 * s) * dc).reshape(c, h, w)
    elif spec.kind == DegradationKind.CONTRAST_CRUSH:
        mean = image.mean()
        out = mean + (image - mean) * (1.0 - 0.9 * s)
    else:  # pragma: no cover
        raise ParameterError(f"unknown degradation kind {spec.kind}")

    return np.clip(out, 0.0, 1.0).astype(np.float32)


def pseudo_mos(spec: DegradationSpec) -> float:
    return 1.0 if spec.kind == DegradationKind.NONE else 1.0 - float(spec.strength)


# -- dataset -----------------------------------------------------------------


def build_dataset(
    n: int, degrade_fraction: float, rng: np.random.Generator
) -> list[TrainingRecord]:
    """Sample `n` records; ~degrade_fraction carry one uniform-strength kind."""
    if n < 1:
        raise ParameterError(f"dataset size must be >= 1, got {n}")
    if not 0.0 <= degrade_fraction <= 1.0:
        raise ParameterError(f"degrade_fraction must be in [0,1], got {degrade_fraction}")
    records = []
    for _ in range(n):
        class_id = int(rng.integers(0, N_CLASSES))
        scene_seed = int(rng.integers(0, 2**63 - 1))
        clean = render_scene(SceneSpec(class_id, scene_seed))
        if rng.random() < degrade_fraction:
            kind = DEGRADED_KINDS[int(rng.integers(0, len(DEGRADED_KINDS)))]
            spec = DegradationSpec(kind, float(rng.uniform(0.0, 1.0)))
        else:
            spec = DegradationSpec(DegradationKind.NONE, 0.0)
        image = degrade(clean, spec, rng)
        records.append(
            TrainingRecord(
                image=image,
                class_id=class_id,
                degradation=spec,
                pseudo_mos=pseudo_mos(spec),
                scene_seed=scene_seed,
            )
        )
    return records


def save_dataset(directory, records: list[TrainingRecord], meta: dict | None = None):
    """Persist records as a tensor file plus a JSON manifest."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    images = np.stack([r.image for r in records])
    save_tensors(directory / "images.qda", {"images": images})
    hist = np.bincount([r.class_id for r in records], minlength=N_CLASSES)
    manifest = {
        "n": len(records),
        "class_histogram": hist.tolist(),
        "records": [
            {
                "class_id": r.class_id,
                "kind": r.degradation.kind.value,
                "strength": r.degradation.strength,
                "pseudo_mos": r.pseudo_mos,
                "scene_seed": r.scene_seed,
            }
            for r in records
        ],
    }
    if meta:
        manifest.update(meta)
    (directory / "manifest.json").write_text(json.dumps(manifest, indent=1))


def load_dataset(directory) -> list[TrainingRecord]:
    directory = Path(directory)
    manifest_path = directory / "manifest.json"
    if not manifest_path.exists():
        raise MissingArtifactError(f"dataset manifest not found: {manifest_path}")
    manifest = json.loads(manifest_path.read_text())
    images = load_tensors(directory / "images.qda")["images"]
    records = []
    for img, rec in zip(images, manifest["records"]):
        records.append(
            TrainingRecord(
                image=img,
                class_id=rec["class_id"],
                degradation=DegradationSpec(DegradationKind(rec["kind"]), rec["strength"]),
                pseudo_mos=rec["pseudo_mos"],
                scene_seed=rec["scene_seed"],
            )
        )
    return records
