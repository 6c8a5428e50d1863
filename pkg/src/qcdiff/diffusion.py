"""DDPM backbone: schedule, forward noising, training loops, and sampling.

The model works in [-1, 1] pixel space (images are mapped from [0, 1] on the
way in and clamped back on the way out).  Sampling follows the ancestral
DDPM update evaluated on a strided subsequence of the training schedule,
with classifier-free guidance and optional quality conditioning through an
attached adapter.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import rng as qrng
from . import tensor as T
from .adapter import AdapterAttachment, AdapterWeights, INPUT_REFERENCE
from .errors import ConfigurationError, ParameterError
from .iqa import QualityCondition
from .nn import ParamStore
from .optim import AdamW
from .synthdata import TrainingRecord
from .tensor import Tensor
from .unet import NULL_CLASS, DenoiserModel

DEFAULT_T = 200
DEFAULT_BETA_START = 1e-4
# endpoint chosen so alpha_bar_T ~ 0.018 < 0.05 (fully-noised terminal state)
DEFAULT_BETA_END = 0.04


@dataclass(frozen=True)
class DiffusionSchedule:
    T: int
    betas: np.ndarray
    alphas: np.ndarray
    alpha_bars: np.ndarray  # index 0..T with alpha_bars[0] = 1

    @classmethod
    def linear(
        cls,
        T: int = DEFAULT_T,
        beta_start: float = DEFAULT_BETA_START,
        beta_end: float = DEFAULT_BETA_END,
    ) -> "DiffusionSchedule":
        if T < 1:
            raise ParameterError(f"schedule length must be >= 1, got {T}")
        if not 0 < beta_start <= beta_end < 1:
            raise ParameterError(
                f"betas must satisfy 0 < start <= end < 1, got ({beta_start}, {beta_end})"
            )
        betas = np.linspace(beta_start, beta_end, T, dtype=np.float64)
        alphas = 1.0 - betas
        alpha_bars = np.concatenate([[1.0], np.cumprod(alphas)])
        return cls(T=T, betas=betas, alphas=alphas, alpha_bars=alpha_bars)

    def alpha_bar(self, t) -> np.ndarray:
        return self.alpha_bars[np.asarray(t)]


def forward_noise(x0: np.ndarray, t, eps: np.ndarray, schedule: DiffusionSchedule) -> np.ndarray:
    """x_t = sqrt(a_bar_t) x0 + sqrt(1 - a_bar_t) eps; t=0 returns x0 exactly."""
    t = np.asarray(t)
    if t.min() < 0 or t.max() > schedule.T:
        raise ParameterError(f"timestep out of range [0, {schedule.T}]: {t}")
    ab = schedule.alpha_bar(t).reshape((-1,) + (1,) * (x0.ndim - 1)) if t.ndim else schedule.alpha_bar(t)
    return (np.sqrt(ab) * x0 + np.sqrt(1.0 - ab) * eps).astype(np.float32)


def strided_timesteps(T: int, steps: int) -> np.ndarray:
    """Descending subsequence of {1..T} containing both endpoints."""
    if not 1 <= steps <= T:
        raise ParameterError(f"sampling steps must be in [1, {T}], got {steps}")
    ts = np.unique(np.round(np.linspace(1, T, steps)).astype(np.int64))
    return ts[::-1].copy()


# -- training ----------------------------------------------------------------


def _blend_quality_tokens(tokens: Tensor, null_tokens: Tensor, drop_mask: np.ndarray) -> Tensor:
    m = Tensor(drop_mask.astype(np.float32).reshape(-1, 1, 1))
    return tokens * (1.0 - m) + null_tokens * m


def train_step(
    model: DenoiserModel,
    batch: list[TrainingRecord],
    schedule: DiffusionSchedule,
    dropout_prob: float,
    rng: np.random.Generator,
    adapter: AdapterAttachment | None = None,
    quality_inputs: np.ndarray | None = None,
) -> Tensor:
    """One noise-prediction objective evaluation; returns the loss tensor.

    Content and quality conditions are independently replaced by their
    learned null tokens with probability `dropout_prob` per sample.
    """
    if not batch:
        raise ParameterError("empty training batch")
    if not 0.0 <= dropout_prob < 1.0:
        raise ParameterError(f"dropout_prob must be in [0,1), got {dropout_prob}")
    if adapter is not None and quality_inputs is None:
        raise ConfigurationError("adapter training requires quality inputs")
    n = len(batch)
    x0 = 2.0 * np.stack([r.image for r in batch]) - 1.0
    t = rng.integers(1, schedule.T + 1, size=n)
    eps = rng.standard_normal(x0.shape).astype(np.float32)
    xt = forward_noise(x0, t, eps, schedule)

    class_ids = np.array([r.class_id for r in batch], dtype=np.int64)
    class_ids = np.where(rng.random(n) < dropout_prob, NULL_CLASS, class_ids)

    q_tokens = None
    if adapter is not None:
        if model.adapter is not adapter:
            raise ConfigurationError("adapter must be attached to the model it trains with")
        tokens = adapter.weights.project(quality_inputs)
        nulls = adapter.weights.null_quality_tokens(n)
        q_tokens = _blend_quality_tokens(tokens, nulls, rng.random(n) < dropout_prob)

    pred = model.forward(Tensor(xt), t, class_ids, q_tokens)
    diff = pred - Tensor(eps)
    return (diff * diff).mean()


def train_diffusion(
    records: list[TrainingRecord],
    schedule: DiffusionSchedule | None = None,
    steps: int = 12000,
    batch_size: int = 32,
    lr: float = 2e-3,
    dropout_prob: float = 0.1,
    rng: np.random.Generator | None = None,
    log_every: int = 0,
) -> tuple[DenoiserModel, list[float]]:
    """Train the base denoiser; returns (model, per-step losses)."""
    schedule = schedule if schedule is not None else DiffusionSchedule.linear()
    rng = rng if rng is not None else np.random.default_rng(0)
    model = DenoiserModel(rng)
    opt = AdamW(model.store.tensors(), lr=lr, weight_decay=1e-4, grad_clip_norm=1.0)
    losses = []
    n = len(records)
    for step in range(steps):
        # linear warmup then cosine decay
        warm = min(1.0, (step + 1) / 200.0)
        opt.lr = lr * warm * (0.5 * (1.0 + np.cos(np.pi * step / steps)))
        idx = rng.integers(0, n, size=batch_size)
        loss = train_step(model, [records[i] for i in idx], schedule, dropout_prob, rng)
        opt.zero_grad()
        loss.backward()
        opt.step()
        losses.append(loss.item())
        if log_every and (step + 1) % log_every == 0:
            recent = float(np.median(losses[-log_every:]))
            print(f"step {step + 1}/{steps} median loss {recent:.4f}", flush=True)
    return model, losses


def train_adapter(
    model: DenoiserModel,
    records: list[TrainingRecord],
    quality_inputs: np.ndarray,
    schedule: DiffusionSchedule | None = None,
    steps: int = 6000,
    batch_size: int = 32,
    lr: float = 1e-4,
    dropout_prob: float = 0.1,
    rng: np.random.Generator | None = None,
    attachment_kwargs: dict | None = None,
    alt_quality_inputs: np.ndarray | None = None,
    alt_prob: float = 0.1,
    log_every: int = 0,
) -> tuple[AdapterAttachment, list[float]]:
    """Train adapter weights on a frozen base model.

    `quality_inputs` is the per-record condition matrix (standardized scores
    or reference embeddings).  When `alt_quality_inputs` is given (reference
    mode), each draw uses the alternative row with probability `alt_prob` —
    the degraded-reference augmentation.
    """
    schedule = schedule if schedule is not None else DiffusionSchedule.linear()
    rng = rng if rng is not None else np.random.default_rng(0)
    if len(records) != len(quality_inputs):
        raise ConfigurationError(
            f"{len(records)} records but {len(quality_inputs)} quality rows"
        )
    kwargs = dict(attachment_kwargs or {})
    kwargs.setdefault("lam", 1.0)  # train at full strength; scale at inference
    weights = AdapterWeights(
        n_sites=len(model.sites), input_dim=quality_inputs.shape[1], rng=rng
    )
    attachment = AdapterAttachment(weights=weights, **kwargs)

    base_checksum = model.store.checksum()
    model.store.freeze()
    model.attach(attachment)
    opt = AdamW(weights.store.tensors(), lr=lr, weight_decay=1e-4, grad_clip_norm=1.0)
    losses = []
    n = len(records)
    try:
        for step in range(steps):
            opt.lr = lr * (0.5 * (1.0 + np.cos(np.pi * step / steps)))
            idx = rng.integers(0, n, size=batch_size)
            q = quality_inputs[idx].copy()
            if alt_quality_inputs is not None:
                swap = rng.random(batch_size) < alt_prob
                q[swap] = alt_quality_inputs[idx[swap]]
            loss = train_step(
                model,
                [records[i] for i in idx],
                schedule,
                dropout_prob,
                rng,
                adapter=attachment,
                quality_inputs=q,
            )
            opt.zero_grad()
            loss.backward()
            opt.step()
            losses.append(loss.item())
            if log_every and (step + 1) % log_every == 0:
                recent = float(np.median(losses[-log_every:]))
                print(f"adapter step {step + 1}/{steps} median loss {recent:.4f}", flush=True)
    finally:
        model.detach()
        model.store.unfreeze()
    if model.store.checksum() != base_checksum:
        raise ConfigurationError("base weights changed during adapter training")
    return attachment, losses


# -- inference ---------------------------------------------------------------


@dataclass
class NegativeGuidanceConfig:
    delta: float = 0.3
    negative_content: int | None = None

    def __post_init__(self):
        if self.delta < 0:
            raise ParameterError(f"delta must be >= 0, got {self.delta}")


@dataclass
class SamplerConfig:
    g: float = 7.5
    steps: int = 35
    rng_seed: int = 0
    negative: NegativeGuidanceConfig | None = None
    guidance: "object | None" = None  # GradientGuidanceConfig, resolved lazily

    def __post_init__(self):
        if self.g < 0:
            raise ParameterError(f"cfg scale must be >= 0, got {self.g}")


def _quality_tokens_for(
    model: DenoiserModel, conditions: list[QualityCondition] | None
) -> tuple[Tensor | None, Tensor | None]:
    """(conditional tokens, null tokens) for the current batch, or Nones."""
    if conditions is None:
        return None, None
    if model.adapter is None:
        raise ConfigurationError("quality conditions given but no adapter attached")
    att = model.adapter
    tokens = att.tokens_for_conditions(conditions)
    nulls = att.weights.null_quality_tokens(len(conditions))
    return tokens, nulls


def cfg_predict(
    model: DenoiserModel,
    xt: np.ndarray,
    t: np.ndarray,
    class_ids: np.ndarray,
    g: float,
    cond_tokens: Tensor | None = None,
    uncond_tokens: Tensor | None = None,
    uncond_class_ids: np.ndarray | None = None,
) -> np.ndarray:
    """uncond + g (cond - uncond); g=1 and g=0 reuse a single forward pass."""
    n = len(class_ids)
    null_ids = (
        uncond_class_ids
        if uncond_class_ids is not None
        else np.full(n, NULL_CLASS, dtype=np.int64)
    )
    if g == 1.0:
        return model.predict(xt, t, class_ids, cond_tokens)
    if g == 0.0:
        return model.predict(xt, t, null_ids, uncond_tokens)
    cond = model.predict(xt, t, class_ids, cond_tokens)
    uncond = model.predict(xt, t, null_ids, uncond_tokens)
    return uncond + g * (cond - uncond)


def sample(
    model: DenoiserModel,
    schedule: DiffusionSchedule,
    config: SamplerConfig,
    class_ids: np.ndarray,
    conditions: list[QualityCondition] | None = None,
) -> np.ndarray:
    """Generate a batch of images in [0,1]; deterministic in config.rng_seed.

    Ancestral DDPM update over a strided timestep subsequence: at each step
    the x0 estimate is formed from the (guided) noise prediction and the
    posterior with variance beta_tilde advances to the previous step.
    """
    from . import guidance as guidance_mod

    class_ids = np.asarray(class_ids, dtype=np.int64)
    n = len(class_ids)
    if conditions is not None and len(conditions) != n:
        raise ConfigurationError(f"{n} class ids but {len(conditions)} conditions")
    cond_tokens, null_tokens = _quality_tokens_for(model, conditions)

    neg_tokens = null_tokens
    neg_ids = None
    if config.negative is not None:
        if conditions is None or model.adapter is None:
            raise ConfigurationError("negative guidance requires an attached adapter")
        neg_conditions = [
            QualityCondition(
                scores=-config.negative.delta * np.asarray(c.scores, dtype=np.float32),
                provenance="negative",
            )
            for c in conditions
        ]
        neg_tokens = model.adapter.tokens_for_conditions(neg_conditions)
        if config.negative.negative_content is not None:
            neg_ids = np.full(n, config.negative.negative_content, dtype=np.int64)

    rng = qrng.stream(config.rng_seed, "sample")
    x = rng.standard_normal((n, 3, 32, 32)).astype(np.float32)
    ts = strided_timesteps(schedule.T, config.steps)
    prevs = np.concatenate([ts[1:], [0]])
    for t_cur, t_prev in zip(ts, prevs):
        t_arr = np.full(n, t_cur, dtype=np.int64)
        eps = cfg_predict(
            model,
            x,
            t_arr,
            class_ids,
            config.g,
            cond_tokens,
            neg_tokens,
            uncond_class_ids=neg_ids,
        )
        if config.guidance is not None:
            eps = guidance_mod.apply_gradient_guidance(
                eps, x, t_cur, schedule, config.guidance
            )
        ab_t = schedule.alpha_bars[t_cur]
        ab_prev = schedule.alpha_bars[t_prev]
        x0_hat = (x - np.sqrt(1.0 - ab_t) * eps) / np.sqrt(ab_t)
        x0_hat = np.clip(x0_hat, -1.0, 1.0)
        if t_prev == 0:
            x = x0_hat.astype(np.float32)
            break
        var = (1.0 - ab_prev) / (1.0 - ab_t) * (1.0 - ab_t / ab_prev)
        dir_coef = np.sqrt(max(1.0 - ab_prev - var, 0.0))
        noise = rng.standard_normal(x.shape).astype(np.float32)
        x = (
            np.sqrt(ab_prev) * x0_hat + dir_coef * eps + np.sqrt(var) * noise
        ).astype(np.float32)
    return np.clip((x + 1.0) / 2.0, 0.0, 1.0).astype(np.float32)
