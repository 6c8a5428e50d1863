"""Quality-conditioning attention adapter.

Projects a standardized score vector (or a reference embedding) into two
64-d quality tokens and injects them next to every content cross-attention
site of the denoiser: either through a separate quality attention that
shares the site's query projection and is scaled by `lam` (the default),
or through the ablated variant that concatenates quality tokens to the
content tokens inside the single base attention.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .errors import ConfigurationError, DimensionError, ParameterError
from .iqa import EMBEDDING_DIM, IqaModel, QualityCondition
from .nn import ParamStore, linear, linear_init
from .tensor import Tensor

N_QUALITY_TOKENS = 2
TOKEN_DIM = 64

VARIANT_SEPARATE = "separate_attention"
VARIANT_CONCAT = "concat_ablation"

INPUT_RAW = "raw_scores"
INPUT_POSENC = "positional_encoding"
INPUT_REFERENCE = "reference_embedding"


def positional_encode(x: float, L: int) -> np.ndarray:
    """NeRF-style encoding (x, sin(2^0 pi x), cos(2^0 pi x), ..., 2^{L-1})."""
    if L < 1:
        raise ParameterError(f"positional encoding order L must be >= 1, got {L}")
    out = [float(x)]
    for k in range(L):
        arg = (2.0**k) * np.pi * x
        out.extend([np.sin(arg), np.cos(arg)])
    return np.asarray(out, dtype=np.float32)


def encode_vector(values: np.ndarray, L: int) -> np.ndarray:
    """Apply positional_encode to each entry and concatenate."""
    return np.concatenate([positional_encode(v, L) for v in np.asarray(values).ravel()])


def scaled_dot_attention(q: Tensor, k: Tensor, v: Tensor, d: int) -> Tensor:
    return T.matmul(T.softmax_lastdim(T.matmul(q, k.swap_last()) * (1.0 / np.sqrt(d))), v)


def decoupled_attention(
    z: Tensor,
    c_t: Tensor,
    c_q_tokens: Tensor | None,
    w_q: Tensor,
    w_k: Tensor,
    w_v: Tensor,
    w_k_q: Tensor | None,
    w_v_q: Tensor | None,
    lam: float,
    q_counter: list | None = None,
) -> Tensor:
    """Content attention plus `lam` x quality attention with a shared query.

    z: (..., n_z, C) image features; c_t: (..., n_t, d) content tokens;
    c_q_tokens: (..., n_q, d) quality tokens or None. Returns (..., n_z, d).
    """
    d = w_q.shape[-1]
    if c_t.shape[-1] != w_k.shape[0]:
        raise DimensionError(
            f"content token dim {c_t.shape[-1]} does not match W_k input {w_k.shape[0]}"
        )
    q = T.matmul(z, w_q)
    if q_counter is not None:
        q_counter.append(1)
    out = scaled_dot_attention(q, T.matmul(c_t, w_k), T.matmul(c_t, w_v), d)
    if c_q_tokens is not None and lam != 0.0:
        if w_k_q is None or w_v_q is None:
            raise ConfigurationError("quality tokens supplied without adapter weights")
        extra = scaled_dot_attention(
            q, T.matmul(c_q_tokens, w_k_q), T.matmul(c_q_tokens, w_v_q), d
        )
        out = out + extra * lam
    return out


def concat_ablation_attention(
    z: Tensor,
    c_t: Tensor,
    c_q_tokens: Tensor | None,
    w_q: Tensor,
    w_k: Tensor,
    w_v: Tensor,
    q_counter: list | None = None,
) -> Tensor:
    """Single attention over [content ; quality] tokens (no lam control)."""
    d = w_q.shape[-1]
    tokens = c_t if c_q_tokens is None else T.concat([c_t, c_q_tokens], axis=-2)
    q = T.matmul(z, w_q)
    if q_counter is not None:
        q_counter.append(1)
    return scaled_dot_attention(q, T.matmul(tokens, w_k), T.matmul(tokens, w_v), d)


class AdapterWeights:
    """Trainable adapter parameters: projection plus per-site K'/V' maps."""

    def __init__(
        self,
        n_sites: int,
        input_dim: int,
        rng: np.random.Generator | None = None,
    ):
        rng = rng if rng is not None else np.random.default_rng(0)
        self.n_sites = n_sites
        self.input_dim = input_dim
        self.store = ParamStore()
        p = self.store
        p.add("proj.w", linear_init(rng, input_dim, N_QUALITY_TOKENS * TOKEN_DIM))
        p.add("proj.b", np.zeros(N_QUALITY_TOKENS * TOKEN_DIM, dtype=np.float32))
        p.add("proj.ln.g", np.ones(TOKEN_DIM, dtype=np.float32))
        p.add("proj.ln.b", np.zeros(TOKEN_DIM, dtype=np.float32))
        p.add(
            "null_tokens",
            (0.02 * rng.standard_normal((N_QUALITY_TOKENS, TOKEN_DIM))).astype(np.float32),
        )
        for i in range(n_sites):
            p.add(f"site{i}.wk", linear_init(rng, TOKEN_DIM, TOKEN_DIM))
            # zero value map keeps the attached model at base behavior initially
            p.add(f"site{i}.wv", np.zeros((TOKEN_DIM, TOKEN_DIM), dtype=np.float32))

    def project(self, condition_vectors: np.ndarray | Tensor) -> Tensor:
        """Map (N, input_dim) condition vectors to (N, 2, 64) quality tokens."""
        x = condition_vectors if isinstance(condition_vectors, Tensor) else Tensor(condition_vectors)
        if x.shape[-1] != self.input_dim:
            raise ConfigurationError(
                f"condition dim {x.shape[-1]} does not match adapter input {self.input_dim}"
            )
        p = self.store
        h = linear(x, p["proj.w"], p["proj.b"])
        h = h.reshape(x.shape[0], N_QUALITY_TOKENS, TOKEN_DIM)
        return T.layernorm(h, p["proj.ln.g"], p["proj.ln.b"], eps=1e-5)

    def null_quality_tokens(self, n: int) -> Tensor:
        return self.store["null_tokens"].reshape(1, N_QUALITY_TOKENS, TOKEN_DIM) * Tensor(
            np.ones((n, 1, 1), dtype=np.float32)
        )

    def site_weights(self, i: int) -> tuple[Tensor, Tensor]:
        return self.store[f"site{i}.wk"], self.store[f"site{i}.wv"]


@dataclass
class AdapterAttachment:
    """Inference/training-time binding of adapter weights to a denoiser."""

    weights: AdapterWeights
    lam: float = 0.5
    input_mode: str = INPUT_RAW
    variant: str = VARIANT_SEPARATE
    posenc_L: int = 1

    def __post_init__(self):
        if not np.isfinite(self.lam) or self.lam < 0:
            raise ConfigurationError(f"adapter scale must be finite and >= 0, got {self.lam}")
        if self.variant not in (VARIANT_SEPARATE, VARIANT_CONCAT):
            raise ConfigurationError(f"unknown adapter variant '{self.variant}'")
        if self.variant == VARIANT_CONCAT and self.lam != 1.0:
            raise ConfigurationError(
                "the concat ablation has no conditioning-strength control; "
                "lam must be 1.0"
            )
        if self.input_mode not in (INPUT_RAW, INPUT_POSENC, INPUT_REFERENCE):
            raise ConfigurationError(f"unknown adapter input mode '{self.input_mode}'")
        if self.input_mode == INPUT_POSENC and self.posenc_L < 1:
            raise ConfigurationError("positional encoding requires L >= 1")

    def condition_to_vector(self, condition: QualityCondition) -> np.ndarray:
        """Encode one QualityCondition as the adapter projection's input."""
        if condition.provenance == "reference":
            if self.input_mode != INPUT_REFERENCE:
                raise ConfigurationError(
                    "reference condition fed to a scalar-input adapter"
                )
            return np.asarray(condition.embedding, dtype=np.float32)
        if self.input_mode == INPUT_REFERENCE:
            raise ConfigurationError("reference-mode adapter needs a reference condition")
        scores = np.asarray(condition.scores, dtype=np.float32)
        if self.input_mode == INPUT_POSENC:
            return encode_vector(scores, self.posenc_L)
        return scores

    def tokens_for_conditions(self, conditions: list[QualityCondition]) -> Tensor:
        vecs = np.stack([self.condition_to_vector(c) for c in conditions])
        return self.weights.project(vecs)


def expected_input_dim(input_mode: str, n_metrics: int, posenc_L: int = 1) -> int:
    if input_mode == INPUT_RAW:
        return n_metrics
    if input_mode == INPUT_POSENC:
        return n_metrics * (1 + 2 * posenc_L)
    if input_mode == INPUT_REFERENCE:
        return EMBEDDING_DIM
    raise ConfigurationError(f"unknown adapter input mode '{input_mode}'")


def reference_condition(iqa_model: IqaModel, reference_image: np.ndarray) -> QualityCondition:
    """Quality condition carrying the pooled activations of a reference image."""
    emb = iqa_model.embed(reference_image)
    return QualityCondition(scores=None, provenance="reference", embedding=emb.vector)


# -- checkpoints -------------------------------------------------------------

_VARIANTS = (VARIANT_SEPARATE, VARIANT_CONCAT)
_MODES = (INPUT_RAW, INPUT_POSENC, INPUT_REFERENCE)


def save_adapter(path, attachment: AdapterAttachment):
    """Write weights plus attachment settings under the 'adapter.' prefix."""
    from .checkpoint import save_tensors

    w = attachment.weights
    meta = np.array(
        [
            w.n_sites,
            w.input_dim,
            _VARIANTS.index(attachment.variant),
            _MODES.index(attachment.input_mode),
            attachment.posenc_L,
            attachment.lam,
        ],
        dtype=np.float32,
    )
    tensors = {"adapter._meta": meta}
    tensors.update({f"adapter.{k}": v for k, v in w.store.state_dict().items()})
    save_tensors(path, tensors)


def load_adapter(path) -> AdapterAttachment:
    from .checkpoint import load_tensors

    state = load_tensors(path)
    if "adapter._meta" not in state:
        raise ConfigurationError(f"{path}: not an adapter checkpoint")
    meta = state.pop("adapter._meta")
    n_sites, input_dim, variant_i, mode_i, posenc_L = (int(v) for v in meta[:5])
    weights = AdapterWeights(n_sites=n_sites, input_dim=input_dim)
    weights.store.load_state_dict(
        {k.removeprefix("adapter."): v for k, v in state.items() if k.startswith("adapter.")}
    )
    return AdapterAttachment(
        weights=weights,
        lam=float(meta[5]),
        input_mode=_MODES[mode_i],
        variant=_VARIANTS[variant_i],
        posenc_L=posenc_L,
    )
