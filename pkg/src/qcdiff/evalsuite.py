"""Measurement battery: RelGain, sweeps, SSIM, seed stats, content probe.

Everything here is a pure function of (arrays, seeds, checkpoints); sweep
drivers take a generator callable so they can be exercised with stubs in
tests and with the real sampler in the CLI.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import ndimage, stats

from . import rng as qrng
from . import synthdata as sd
from . import tensor as T
from .errors import DimensionError, ParameterError
from .iqa import _luminance
from .nn import ParamStore, he_init, linear, linear_init
from .optim import AdamW
from .tensor import Tensor

# -- RelGain -----------------------------------------------------------------


@dataclass
class RelGainResult:
    percent: float
    offset: float
    n_pairs: int
    n_excluded: int


def rel_gain(baseline: np.ndarray, conditioned: np.ndarray) -> RelGainResult:
    """Mean per-pair percent change, with scores offset into a positive range.

    When the baseline set touches zero or goes negative, both sides are
    shifted by 1 + |min(baseline)| first; pairs whose baseline magnitude is
    still below 1e-6 are excluded and counted.
    """
    baseline = np.asarray(baseline, dtype=np.float64)
    conditioned = np.asarray(conditioned, dtype=np.float64)
    if baseline.shape != conditioned.shape:
        raise DimensionError(
            f"paired score shapes differ: {baseline.shape} vs {conditioned.shape}"
        )
    if baseline.size == 0:
        raise ParameterError("empty pairing")
    offset = 0.0
    if baseline.min() <= 1e-6:
        offset = 1.0 + abs(baseline.min())
    b = baseline + offset
    c = conditioned + offset
    keep = np.abs(b) >= 1e-6
    if not keep.any():
        raise ParameterError("all pairs excluded by the near-zero baseline rule")
    pct = float(((c[keep] - b[keep]) / b[keep]).mean() * 100.0)
    return RelGainResult(
        percent=pct,
        offset=offset,
        n_pairs=int(keep.sum()),
        n_excluded=int((~keep).sum()),
    )


@dataclass
class SeedConsistency:
    mean_gain: float
    positive_share: float
    p_value: float
    gains: np.ndarray


def seed_consistency(baseline: np.ndarray, conditioned: np.ndarray) -> SeedConsistency:
    """Distribution of per-seed gains plus a two-sided sign test."""
    baseline = np.asarray(baseline, dtype=np.float64)
    conditioned = np.asarray(conditioned, dtype=np.float64)
    gains = conditioned - baseline
    nonzero = gains[gains != 0]
    if len(nonzero) == 0:
        p = 1.0
    else:
        wins = int((nonzero > 0).sum())
        p = float(stats.binomtest(wins, len(nonzero), 0.5).pvalue)
    return SeedConsistency(
        mean_gain=float(gains.mean()),
        positive_share=float((gains > 0).mean()),
        p_value=p,
        gains=gains,
    )


# -- SSIM --------------------------------------------------------------------

_C1 = 0.01**2
_C2 = 0.03**2


def ssim(a: np.ndarray, b: np.ndarray) -> float:
    """Mean SSIM over sliding 8x8 windows of the luminance channel."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise DimensionError(f"ssim shape mismatch: {a.shape} vs {b.shape}")
    la = _luminance(a) if a.ndim == 3 else a
    lb = _luminance(b) if b.ndim == 3 else b
    size = 8
    mu_a = ndimage.uniform_filter(la, size)
    mu_b = ndimage.uniform_filter(lb, size)
    var_a = ndimage.uniform_filter(la * la, size) - mu_a**2
    var_b = ndimage.uniform_filter(lb * lb, size) - mu_b**2
    cov = ndimage.uniform_filter(la * lb, size) - mu_a * mu_b
    num = (2 * mu_a * mu_b + _C1) * (2 * cov + _C2)
    den = (mu_a**2 + mu_b**2 + _C1) * (var_a + var_b + _C2)
    return float((num / den).mean())


# -- content classifier ------------------------------------------------------


class ContentClassifier:
    """Small conv net assigning one of the 8 scene classes."""

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
        p.add("head.w", linear_init(rng, 64, sd.N_CLASSES))
        p.add("head.b", np.zeros(sd.N_CLASSES, dtype=np.float32))

    def logits_tensor(self, x: Tensor) -> Tensor:
        p = self.store
        h = (x - 0.5) * 2.0
        for i in range(len(self.CHANNELS)):
            h = T.conv2d(h, p[f"conv{i}.w"], padding=1)
            h = h + p[f"conv{i}.b"].reshape(1, -1, 1, 1)
            h = T.group_norm(h, p[f"norm{i}.g"], p[f"norm{i}.b"], groups=4)
            h = T.silu(h)
            h = T.downsample2x(h)
        return linear(h.mean(axis=(2, 3)), p["head.w"], p["head.b"])

    def predict(self, images: np.ndarray) -> np.ndarray:
        with T.no_grad():
            return self.logits_tensor(Tensor(images)).data.argmax(axis=1)


def train_content_classifier(
    n: int = 4000,
    epochs: int = 16,
    lr: float = 3e-3,
    rng: np.random.Generator | None = None,
    batch_size: int = 64,
) -> tuple[ContentClassifier, float]:
    """Fit on clean renders; returns (classifier, holdout accuracy)."""
    rng = rng if rng is not None else np.random.default_rng(0)
    images = np.empty((n, 3, 32, 32), dtype=np.float32)
    labels = np.empty(n, dtype=np.int64)
    for i in range(n):
        cid = int(rng.integers(0, sd.N_CLASSES))
        images[i] = sd.render_scene(sd.SceneSpec(cid, int(rng.integers(0, 2**63 - 1))))
        labels[i] = cid
    n_hold = max(1, n // 10)
    model = ContentClassifier(rng)
    opt = AdamW(model.store.tensors(), lr=lr, weight_decay=1e-2)
    total = epochs * int(np.ceil((n - n_hold) / batch_size))
    step = 0
    for _ in range(epochs):
        order = n_hold + rng.permutation(n - n_hold)
        for s0 in range(0, len(order), batch_size):
            opt.lr = lr * 0.5 * (1.0 + np.cos(np.pi * step / total))
            idx = order[s0 : s0 + batch_size]
            batch = images[idx]
            if rng.random() < 0.5:
                batch = np.ascontiguousarray(batch[:, :, :, ::-1])
            if rng.random() < 0.5:
                batch = np.ascontiguousarray(batch[:, :, ::-1, :])
            logits = model.logits_tensor(Tensor(batch))
            logp = T.log_softmax_lastdim(logits)
            loss = -logp[np.arange(len(idx)), labels[idx]].mean()
            opt.zero_grad()
            loss.backward()
            opt.step()
            step += 1
    acc = float((model.predict(images[:n_hold]) == labels[:n_hold]).mean())
    return model, acc


def content_probe(
    classifier: ContentClassifier, images: np.ndarray, true_classes: np.ndarray
) -> float:
    """Fraction of images assigned their conditioning class."""
    if len(images) != len(true_classes):
        raise DimensionError(
            f"{len(images)} images but {len(true_classes)} labels"
        )
    return float((classifier.predict(images) == np.asarray(true_classes)).mean())


def save_classifier(path, model: ContentClassifier):
    from .checkpoint import save_tensors

    save_tensors(path, {f"clf.{k}": v for k, v in model.store.state_dict().items()})


def load_classifier(path) -> ContentClassifier:
    from .checkpoint import load_tensors

    state = load_tensors(path)
    model = ContentClassifier()
    model.store.load_state_dict(
        {k.removeprefix("clf."): v for k, v in state.items() if k.startswith("clf.")}
    )
    return model


# -- sweeps ------------------------------------------------------------------


@dataclass
class SweepPoint:
    x: float
    label: str
    mean_score: float
    scores: np.ndarray


@dataclass
class SweepResult:
    points: list[SweepPoint]
    srocc: float | None = None

    def to_rows(self) -> list[dict]:
        return [
            {"x": p.x, "label": p.label, "mean_score": p.mean_score, "n": len(p.scores)}
            for p in self.points
        ]


def percentile_sweep(
    generate,
    score_fn,
    percentiles=(1.0, 25.0, 50.0, 75.0, 99.0),
) -> SweepResult:
    """SROCC between target percentile and mean measured score.

    `generate(percentile)` returns a batch of images; `score_fn(images)`
    returns per-image scores.
    """
    points = []
    for p in percentiles:
        scores = np.asarray(score_fn(generate(p)), dtype=np.float64)
        points.append(SweepPoint(x=float(p), label="percentile", mean_score=float(scores.mean()), scores=scores))
    srocc = float(
        stats.spearmanr([p.x for p in points], [p.mean_score for p in points]).statistic
    )
    return SweepResult(points=points, srocc=srocc)


def lambda_sweep(
    generate,
    score_fn,
    lambdas=(0.05, 0.25, 0.5, 0.75, 1.0),
    conditions=("low", "high"),
) -> dict[str, SweepResult]:
    """Mean score vs lambda for each named condition.

    `generate(lam, condition_name)` returns a batch of images.
    """
    out = {}
    for cond in conditions:
        points = []
        for lam in lambdas:
            scores = np.asarray(score_fn(generate(lam, cond)), dtype=np.float64)
            points.append(
                SweepPoint(x=float(lam), label=cond, mean_score=float(scores.mean()), scores=scores)
            )
        out[cond] = SweepResult(points=points)
    return out


def write_sweep_csv(path, results: dict[str, SweepResult] | SweepResult):
    """One row per (x, label) with the mean score; stable field order."""
    if isinstance(results, SweepResult):
        results = {"sweep": results}
    rows = []
    for res in results.values():
        rows.extend(res.to_rows())
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as f:
        writer = csv.DictWriter(f, fieldnames=["x", "label", "mean_score", "n"])
        writer.writeheader()
        writer.writerows(rows)
