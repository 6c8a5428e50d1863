"""Inference-time steering baselines.

Gradient guidance pushes each denoising step along the score gradient of a
differentiable quality model evaluated on the current x0 estimate, with a
linear ramp that silences it at high noise.  Negative guidance is expressed
through the sampler's unconditional branch (see diffusion.sample), which
receives the quality condition scaled by -delta.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .errors import GuidanceError, ParameterError
from .iqa import IqaModel
from .tensor import Tensor


@dataclass
class GradientGuidanceConfig:
    alpha: float
    target_metric: IqaModel
    fallback_count: int = 0  # steps where a non-finite gradient forced a fallback

    def __post_init__(self):
        if self.alpha < 0:
            raise ParameterError(f"alpha must be >= 0, got {self.alpha}")


def ramp(t: int, T: int) -> float:
    """omega(t): 0 at t=T rising linearly to 1 at t=1."""
    if T < 2:
        return 1.0
    return float((T - t) / (T - 1))


def score_log_gradient(model: IqaModel, x0_unit: np.ndarray) -> np.ndarray:
    """d/dx log sigmoid(score(x)) for a batch of [0,1] images."""
    x = Tensor(x0_unit.astype(np.float32), requires_grad=True)
    s = model.score_tensor(x)
    obj = T.log(T.sigmoid(s)).sum()
    obj.backward()
    return x.grad.copy()


def apply_gradient_guidance(
    eps: np.ndarray,
    xt: np.ndarray,
    t: int,
    schedule,
    config: GradientGuidanceConfig,
) -> np.ndarray:
    """Shift the noise prediction against the quality-score gradient.

    eps_guided = eps - alpha * omega(t) * sqrt(1 - a_bar_t) * grad, where
    grad is d log sigmoid(f(x0_hat)) / d x_t with the noise prediction held
    fixed (so d x0_hat / d x_t = 1/sqrt(a_bar_t)).  alpha=0 returns eps
    unchanged, as does the first step (omega(T) = 0).
    """
    if config.alpha == 0.0:
        return eps
    w = ramp(t, schedule.T)
    if w == 0.0:
        return eps
    ab = schedule.alpha_bars[t]
    x0_hat = np.clip((xt - np.sqrt(1.0 - ab) * eps) / np.sqrt(ab), -1.0, 1.0)
    grad_unit = score_log_gradient(config.target_metric, (x0_hat + 1.0) / 2.0)
    # chain through x0_hat -> [0,1] mapping (1/2) and x_t (1/sqrt(a_bar))
    grad_xt = grad_unit * (0.5 / np.sqrt(ab))
    if not np.all(np.isfinite(grad_xt)):
        config.fallback_count += 1
        return eps
    return (eps - config.alpha * w * np.sqrt(1.0 - ab) * grad_xt).astype(np.float32)


def negative_guided_predict(
    model,
    xt: np.ndarray,
    t: int,
    class_ids: np.ndarray,
    conditions,
    g: float,
    config,
) -> np.ndarray:
    """eps(z|c_neg, -delta q) + g (eps(z|c, q) - eps(z|c_neg, -delta q)).

    The negative branch replaces the unconditional CFG branch; at g=1 it
    reduces to the positive-condition prediction exactly.
    """
    from .diffusion import cfg_predict, _quality_tokens_for
    from .errors import ConfigurationError
    from .iqa import QualityCondition

    if model.adapter is None:
        raise ConfigurationError("negative guidance requires an attached adapter")
    cond_tokens, _ = _quality_tokens_for(model, conditions)
    neg_conditions = [
        QualityCondition(
            scores=-config.delta * np.asarray(c.scores, dtype=np.float32),
            provenance="negative",
        )
        for c in conditions
    ]
    neg_tokens = model.adapter.tokens_for_conditions(neg_conditions)
    neg_ids = None
    if config.negative_content is not None:
        neg_ids = np.full(len(class_ids), config.negative_content, dtype=np.int64)
    t_arr = np.full(len(class_ids), t, dtype=np.int64)
    return cfg_predict(
        model, xt, t_arr, np.asarray(class_ids), g, cond_tokens, neg_tokens, neg_ids
    )


def gradient_guided_predict(
    model,
    schedule,
    xt: np.ndarray,
    t: int,
    class_ids: np.ndarray,
    config: GradientGuidanceConfig,
    quality_tokens=None,
) -> np.ndarray:
    """Base conditional prediction plus the gradient-guidance correction."""
    t_arr = np.full(len(class_ids), t, dtype=np.int64)
    eps = model.predict(xt, t_arr, class_ids, quality_tokens)
    return apply_gradient_guidance(eps, xt, t, schedule, config)
