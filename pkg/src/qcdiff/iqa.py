"""No-reference quality measurement.

Two families of scorers:
  * analytic metrics (Laplacian sharpness, high-pass noise estimate,
    contrast, 8-periodic blockiness) used as held-out measures and as
    degradation-matched oracles, and
  * a small trained CNN regressor whose scalar score conditions the
    generative model and whose pooled penultimate activations provide the
    reference-based conditioning embedding.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy import signal, stats

from . import tensor as T
from .errors import DegenerateDataError, DimensionError, ParameterError
from .nn import ParamStore, he_init, linear, linear_init
from .optim import AdamW
from .synthdata import RESOLUTION, DegradationKind, TrainingRecord
from .tensor import Tensor

EMBEDDING_DIM = 64

_LAPLACIAN = np.array([[0, 1, 0], [1, -4, 1], [0, 1, 0]], dtype=np.float32)
# Immerkaer noise-estimation operator
_HIGHPASS = np.array([[1, -2, 1], [-2, 4, -2], [1, -2, 1]], dtype=np.float32)


@dataclass(frozen=True)
class AnalyticMetricSet:
    sharpness: float
    noise_level: float
    contrast: float
    blockiness: float

    def as_vector(self) -> np.ndarray:
        return np.array(
            [self.sharpness, self.noise_level, self.contrast, self.blockiness],
            dtype=np.float32,
        )


def _luminance(image: np.ndarray) -> np.ndarray:
    return 0.299 * image[0] + 0.587 * image[1] + 0.114 * image[2]


def analytic_metrics(image: np.ndarray) -> AnalyticMetricSet:
    """Compute the four analytic measures of a 3x32x32 image in [0,1]."""
    if image.shape != (3, RESOLUTION, RESOLUTION):
        raise DimensionError(
            f"analytic_metrics expects (3,{RESOLUTION},{RESOLUTION}), got {image.shape}"
        )
    lum = _luminance(np.asarray(image, dtype=np.float64))
    lap = signal.convolve2d(lum, _LAPLACIAN, mode="valid")
    sharpness = float(lap.var())
    hp = signal.convolve2d(lum, _HIGHPASS, mode="valid")
    noise_level = float(np.median(np.abs(hp)) / 0.6745)
    contrast = float(lum.std())
    # mean |gradient| at 8-periodic block boundaries minus elsewhere
    gx = np.abs(np.diff(lum, axis=1))
    gy = np.abs(np.diff(lum, axis=0))
    cols = np.arange(gx.shape[1])
    rows = np.arange(gy.shape[0])
    bx = (cols % 8) == 7
    by = (rows % 8) == 7
    excess_x = gx[:, bx].mean() - gx[:, ~bx].mean()
    excess_y = gy[by, :].mean() - gy[~by, :].mean()
    blockiness = float(max(excess_x + excess_y, 0.0))
    return AnalyticMetricSet(sharpness, noise_level, contrast, blockiness)


def within_block_detail(image: np.ndarray) -> float:
    """Std of the image minus its per-8x8-block means (in-block texture)."""
    arr = np.asarray(image, dtype=np.float64)
    c, h, w = arr.shape
    blocks = arr.reshape(c, h // 8, 8, w // 8, 8)
    resid = blocks - blocks.mean(axis=(2, 4), keepdims=True)
    return float(resid.std())


def degradation_measure(kind: DegradationKind, image: np.ndarray) -> float:
    """Analytic measure oriented to increase with the strength of `kind`."""
    m = analytic_metrics(image)
    if kind == DegradationKind.GAUSSIAN_BLUR:
        return -m.sharpness
    if kind == DegradationKind.ADDITIVE_NOISE:
        return m.noise_level
    if kind == DegradationKind.BLOCK_QUANTIZE:
        # boundary excess has a large content baseline on periodic scenes;
        # in-block texture loss is the robust signature of block coding
        return -within_block_detail(image)
    if kind == DegradationKind.CONTRAST_CRUSH:
        return -m.contrast
    raise ParameterError(f"no matched measure for kind {kind}")


# -- trained regressor -------------------------------------------------------


class IqaModel:
    """3-layer strided conv stack -> 64-d pooled embedding -> scalar score."""

    CHANNELS = (16, 32, 64)

    def __init__(self, rng: np.random.Generator | None = None):
        rng = rng if rng is not None else np.random.default_rng(0)
        self.store = ParamStore()
        p = self.store
        cin = 3
        for i, cout in enumerate(self.CHANNELS):
            p.add(f"conv{i}.w", he_init(rng, (cout, cin, 3, 3), cin * 9))
            p.add(f"conv{i}.b", np.zeros(cout, dtype=np.float32))
            p.add(f"norm{i}.g", np.ones(cout, dtype=np.float32))
            p.add(f"norm{i}.b", np.zeros(cout, dtype=np.float32))
            cin = cout
        p.add("head.w", linear_init(rng, EMBEDDING_DIM, 1))
        p.add("head.b", np.zeros(1, dtype=np.float32))

    def embed_tensor(self, x: Tensor) -> Tensor:
        """Pooled penultimate activations, differentiable; x is (N,3,32,32)."""
        p = self.store
        h = (x - 0.5) * 2.0
        for i in range(len(self.CHANNELS)):
            h = T.conv2d(h, p[f"conv{i}.w"], padding=1)
            h = h + p[f"conv{i}.b"].reshape(1, -1, 1, 1)
            h = T.group_norm(h, p[f"norm{i}.g"], p[f"norm{i}.b"], groups=4)
            h = T.silu(h)
            h = T.downsample2x(h)
        return h.mean(axis=(2, 3))  # (N, 64)

    def score_tensor(self, x: Tensor) -> Tensor:
        return linear(self.embed_tensor(x), self.store["head.w"], self.store["head.b"])

    def score(self, image: np.ndarray) -> float:
        with T.no_grad():
            return float(self.score_tensor(Tensor(image[None])).data[0, 0])

    # inference chunk size: keeps the im2col workspace small for large inputs
    CHUNK = 256

    def score_batch(self, images: np.ndarray) -> np.ndarray:
        with T.no_grad():
            return np.concatenate(
                [
                    self.score_tensor(Tensor(images[i : i + self.CHUNK])).data[:, 0]
                    for i in range(0, len(images), self.CHUNK)
                ]
            )

    def embed(self, image: np.ndarray) -> "ReferenceEmbedding":
        with T.no_grad():
            vec = self.embed_tensor(Tensor(image[None])).data[0].copy()
        return ReferenceEmbedding(vector=vec)

    def embed_batch(self, images: np.ndarray) -> np.ndarray:
        with T.no_grad():
            return np.concatenate(
                [
                    self.embed_tensor(Tensor(images[i : i + self.CHUNK])).data
                    for i in range(0, len(images), self.CHUNK)
                ]
            )


@dataclass
class ReferenceEmbedding:
    vector: np.ndarray
    source: str = ""

    def unit(self) -> np.ndarray:
        n = np.linalg.norm(self.vector)
        return self.vector / n if n > 0 else self.vector.copy()


def train_iqa(
    records: list[TrainingRecord],
    epochs: int = 60,
    lr: float = 5e-3,
    rng: np.random.Generator | None = None,
    batch_size: int = 64,
    holdout_fraction: float = 0.15,
) -> tuple[IqaModel, dict]:
    """Fit the regressor to pseudo-MOS labels; returns (model, report).

    Random horizontal/vertical flips are applied during training so the
    embedding keeps degradation information rather than scene layout.
    """
    rng = rng if rng is not None else np.random.default_rng(0)
    labels = np.array([r.pseudo_mos for r in records], dtype=np.float32)
    if labels.std() == 0:
        raise DegenerateDataError("training labels have zero variance (all-clean dataset?)")
    images = np.stack([r.image for r in records])
    n = len(records)
    perm = rng.permutation(n)
    n_hold = max(1, int(n * holdout_fraction)) if n > 3 else 0
    hold_idx, train_idx = perm[:n_hold], perm[n_hold:]
    model = IqaModel(rng)
    opt = AdamW(model.store.tensors(), lr=lr, weight_decay=1e-2)
    losses = []
    total_steps = max(1, epochs * int(np.ceil(len(train_idx) / batch_size)))
    step = 0
    for epoch in range(epochs):
        order = rng.permutation(len(train_idx))
        for start in range(0, len(order), batch_size):
            # cosine decay keeps late epochs from bouncing around the optimum
            opt.lr = lr * 0.5 * (1.0 + np.cos(np.pi * step / total_steps))
            step += 1
            idx = train_idx[order[start : start + batch_size]]
            batch = images[idx]
            if rng.random() < 0.5:
                batch = batch[:, :, :, ::-1]
            if rng.random() < 0.5:
                batch = batch[:, :, ::-1, :]
            x = Tensor(np.ascontiguousarray(batch))
            y = Tensor(labels[idx][:, None])
            pred = model.score_tensor(x)
            diff = pred - y
            loss = (diff * diff).mean()
            opt.zero_grad()
            loss.backward()
            opt.step()
            losses.append(loss.item())
    report = {"losses": losses}
    if n_hold:
        pred = model.score_batch(images[hold_idx])
        report["holdout_srocc"] = float(stats.spearmanr(pred, labels[hold_idx]).statistic)
    return model, report


def save_iqa(path, model: IqaModel):
    from .checkpoint import save_tensors

    save_tensors(path, {f"iqa.{k}": v for k, v in model.store.state_dict().items()})


def load_iqa(path) -> IqaModel:
    from .checkpoint import load_tensors

    state = load_tensors(path)
    model = IqaModel()
    model.store.load_state_dict(
        {k.removeprefix("iqa."): v for k, v in state.items() if k.startswith("iqa.")}
    )
    return model


# -- conditioning scores -----------------------------------------------------

CONDITION_METRICS = ("iqa_score", "contrast")


def condition_scores(model: IqaModel, images: np.ndarray) -> np.ndarray:
    """Raw conditioning vector per image: (trained score, analytic contrast)."""
    scores = model.score_batch(images)
    contrast = np.array(
        [analytic_metrics(img).contrast for img in images], dtype=np.float32
    )
    return np.stack([scores, contrast], axis=1)


@dataclass
class ScoreStandardizer:
    mean: np.ndarray
    std: np.ndarray

    def apply(self, scores: np.ndarray) -> np.ndarray:
        return ((np.asarray(scores, dtype=np.float64) - self.mean) / self.std).astype(
            np.float32
        )

    def invert(self, standardized: np.ndarray) -> np.ndarray:
        return (np.asarray(standardized, dtype=np.float64) * self.std + self.mean).astype(
            np.float32
        )

    def to_json(self) -> dict:
        return {"mean": self.mean.tolist(), "std": self.std.tolist()}

    @classmethod
    def from_json(cls, d: dict) -> "ScoreStandardizer":
        return cls(np.asarray(d["mean"], dtype=np.float64), np.asarray(d["std"], dtype=np.float64))


def fit_standardizer(scores: np.ndarray) -> ScoreStandardizer:
    """Zero-mean / unit-variance affine fit (population 1/N convention)."""
    scores = np.asarray(scores, dtype=np.float64)
    if scores.ndim != 2 or scores.shape[0] < 2:
        raise ParameterError(f"need an (N>=2, m) score matrix, got shape {scores.shape}")
    std = scores.std(axis=0)
    for j, s in enumerate(std):
        if s == 0:
            raise DegenerateDataError(f"metric column {j} has zero variance")
    return ScoreStandardizer(mean=scores.mean(axis=0), std=std)


@dataclass
class QualityCondition:
    """Standardized conditioning vector plus its provenance."""

    scores: np.ndarray | None  # standardized, shape (m,); None for reference mode
    provenance: str = "raw"
    percentile: float | None = None
    embedding: np.ndarray | None = None

    @classmethod
    def null(cls) -> "QualityCondition":
        return cls(scores=None, provenance="null")


def percentile_condition(
    standardizer: ScoreStandardizer, training_scores: np.ndarray, p: float
) -> QualityCondition:
    """Standardized empirical p-th percentile (per metric) of the train set."""
    if not 0.0 <= p <= 100.0:
        raise ParameterError(f"percentile must be in [0,100], got {p}")
    training_scores = np.asarray(training_scores, dtype=np.float64)
    if training_scores.size == 0:
        raise ParameterError("empty score set")
    raw = np.percentile(training_scores, p, axis=0)
    return QualityCondition(
        scores=standardizer.apply(raw), provenance="percentile", percentile=p
    )
