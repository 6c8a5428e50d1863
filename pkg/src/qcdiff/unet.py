"""Small conditional U-Net noise predictor.

32x32 RGB inputs, channel widths 32/64/128 over resolutions 32/16/8, one
residual block per stage, sinusoidal timestep embeddings, and three content
cross-attention sites (encoder 16x16, mid 8x8, decoder 16x16).  Content
conditioning is a learned 4-token entry per scene class plus a learned null
row used for classifier-free dropout.  A quality adapter can be attached;
it contributes a second attention term at every site but never mutates the
base parameters.
"""

from __future__ import annotations

import numpy as np

from . import tensor as T
from .adapter import (
    VARIANT_CONCAT,
    AdapterAttachment,
    concat_ablation_attention,
    decoupled_attention,
)
from .errors import ConfigurationError, DimensionError
from .nn import ParamStore, he_init, linear, linear_init, sinusoidal_embedding
from .tensor import Tensor

TOKEN_DIM = 64
N_CONTENT_TOKENS = 4
N_CLASSES = 8
NULL_CLASS = N_CLASSES  # row index of the learned null-content tokens
TEMB_DIM = 64
STAGE_CHANNELS = (32, 64, 128)
N_ATTENTION_SITES = 3


class AttentionSite:
    """One cross-attention block: normalized feature tokens attend to context.

    `q_projection_count` counts how many times the query projection ran,
    so tests can assert the decoupled variant still projects Q exactly once.
    """

    def __init__(self, store: ParamStore, prefix: str, channels: int, rng):
        self.store = store
        self.prefix = prefix
        self.channels = channels
        self.q_projection_count = 0
        store.add(f"{prefix}.norm.g", np.ones(channels, dtype=np.float32))
        store.add(f"{prefix}.norm.b", np.zeros(channels, dtype=np.float32))
        store.add(f"{prefix}.wq", linear_init(rng, channels, TOKEN_DIM))
        store.add(f"{prefix}.wk", linear_init(rng, TOKEN_DIM, TOKEN_DIM))
        store.add(f"{prefix}.wv", linear_init(rng, TOKEN_DIM, TOKEN_DIM))
        # zero out-projection: attention starts as an identity residual
        store.add(f"{prefix}.wo", np.zeros((TOKEN_DIM, channels), dtype=np.float32))

    def __call__(
        self,
        h: Tensor,
        content_tokens: Tensor,
        quality_tokens: Tensor | None,
        adapter: AdapterAttachment | None,
        site_index: int,
    ) -> Tensor:
        p = self.store
        n, c, hh, ww = h.shape
        if c != self.channels:
            raise DimensionError(
                f"site {self.prefix} expects {self.channels} channels, got {c}"
            )
        z = T.group_norm(h, p[f"{self.prefix}.norm.g"], p[f"{self.prefix}.norm.b"], groups=8)
        z = z.reshape(n, c, hh * ww).swap_last()  # (N, HW, C)
        counter: list = []
        if quality_tokens is not None and adapter is not None and adapter.variant == VARIANT_CONCAT:
            out = concat_ablation_attention(
                z,
                content_tokens,
                quality_tokens,
                p[f"{self.prefix}.wq"],
                p[f"{self.prefix}.wk"],
                p[f"{self.prefix}.wv"],
                q_counter=counter,
            )
        else:
            wkq = wvq = None
            lam = 0.0
            if quality_tokens is not None and adapter is not None:
                wkq, wvq = adapter.weights.site_weights(site_index)
                lam = adapter.lam
            out = decoupled_attention(
                z,
                content_tokens,
                quality_tokens,
                p[f"{self.prefix}.wq"],
                p[f"{self.prefix}.wk"],
                p[f"{self.prefix}.wv"],
                wkq,
                wvq,
                lam,
                q_counter=counter,
            )
        self.q_projection_count += len(counter)
        out = linear(out, p[f"{self.prefix}.wo"])  # (N, HW, C)
        return h + out.swap_last().reshape(n, c, hh, ww)


class DenoiserModel:
    """Noise-prediction U-Net epsilon_theta(x_t, t, content, [quality])."""

    def __init__(self, rng: np.random.Generator | None = None):
        rng = rng if rng is not None else np.random.default_rng(0)
        self.store = ParamStore()
        p = self.store
        c32, c16, c8 = STAGE_CHANNELS

        p.add("temb.l1.w", linear_init(rng, TEMB_DIM, TEMB_DIM))
        p.add("temb.l1.b", np.zeros(TEMB_DIM, dtype=np.float32))
        p.add("temb.l2.w", linear_init(rng, TEMB_DIM, TEMB_DIM))
        p.add("temb.l2.b", np.zeros(TEMB_DIM, dtype=np.float32))

        # 8 class rows + 1 learned null row for classifier-free dropout
        p.add(
            "content_tokens",
            (0.2 * rng.standard_normal((N_CLASSES + 1, N_CONTENT_TOKENS, TOKEN_DIM))).astype(
                np.float32
            ),
        )

        p.add("conv_in.w", he_init(rng, (c32, 3, 3, 3), 27))
        p.add("conv_in.b", np.zeros(c32, dtype=np.float32))

        self._res_specs = {
            "enc32": c32,
            "enc16": c16,
            "enc8": c8,
            "mid8": c8,
            "dec16": c16,
            "dec32": c32,
        }
        for name, ch in self._res_specs.items():
            self._add_res_block(rng, name, ch)

        p.add("down1.w", he_init(rng, (c16, c32, 3, 3), c32 * 9))
        p.add("down1.b", np.zeros(c16, dtype=np.float32))
        p.add("down2.w", he_init(rng, (c8, c16, 3, 3), c16 * 9))
        p.add("down2.b", np.zeros(c8, dtype=np.float32))

        p.add("up2.w", he_init(rng, (c16, c8, 3, 3), c8 * 9))
        p.add("up2.b", np.zeros(c16, dtype=np.float32))
        p.add("cat16.w", he_init(rng, (c16, 2 * c16, 3, 3), 2 * c16 * 9))
        p.add("cat16.b", np.zeros(c16, dtype=np.float32))
        p.add("up1.w", he_init(rng, (c32, c16, 3, 3), c16 * 9))
        p.add("up1.b", np.zeros(c32, dtype=np.float32))
        p.add("cat32.w", he_init(rng, (c32, 2 * c32, 3, 3), 2 * c32 * 9))
        p.add("cat32.b", np.zeros(c32, dtype=np.float32))

        p.add("out.norm.g", np.ones(c32, dtype=np.float32))
        p.add("out.norm.b", np.zeros(c32, dtype=np.float32))
        p.add("out.w", np.zeros((3, c32, 3, 3), dtype=np.float32))
        p.add("out.b", np.zeros(3, dtype=np.float32))

        self.sites = [
            AttentionSite(p, "site_e16", c16, rng),
            AttentionSite(p, "site_m8", c8, rng),
            AttentionSite(p, "site_d16", c16, rng),
        ]
        self.adapter: AdapterAttachment | None = None

    # -- adapter binding -----------------------------------------------------

    def attach(self, adapter: AdapterAttachment):
        if adapter.weights.n_sites != len(self.sites):
            raise ConfigurationError(
                f"adapter has {adapter.weights.n_sites} sites, model has {len(self.sites)}"
            )
        self.adapter = adapter

    def detach(self) -> AdapterAttachment | None:
        adapter, self.adapter = self.adapter, None
        return adapter

    # -- building blocks -----------------------------------------------------

    def _add_res_block(self, rng, name: str, ch: int):
        p = self.store
        p.add(f"{name}.n1.g", np.ones(ch, dtype=np.float32))
        p.add(f"{name}.n1.b", np.zeros(ch, dtype=np.float32))
        p.add(f"{name}.c1.w", he_init(rng, (ch, ch, 3, 3), ch * 9))
        p.add(f"{name}.c1.b", np.zeros(ch, dtype=np.float32))
        p.add(f"{name}.t.w", linear_init(rng, TEMB_DIM, ch))
        p.add(f"{name}.t.b", np.zeros(ch, dtype=np.float32))
        p.add(f"{name}.n2.g", np.ones(ch, dtype=np.float32))
        p.add(f"{name}.n2.b", np.zeros(ch, dtype=np.float32))
        # second conv zero-initialized: the block starts as identity
        p.add(f"{name}.c2.w", np.zeros((ch, ch, 3, 3), dtype=np.float32))
        p.add(f"{name}.c2.b", np.zeros(ch, dtype=np.float32))

    def _res(self, name: str, h: Tensor, temb: Tensor) -> Tensor:
        p = self.store
        x = T.group_norm(h, p[f"{name}.n1.g"], p[f"{name}.n1.b"], groups=8)
        x = T.silu(x)
        x = T.conv2d(x, p[f"{name}.c1.w"], padding=1) + p[f"{name}.c1.b"].reshape(1, -1, 1, 1)
        tproj = linear(temb, p[f"{name}.t.w"], p[f"{name}.t.b"])
        x = x + tproj.reshape(tproj.shape[0], tproj.shape[1], 1, 1)
        x = T.group_norm(x, p[f"{name}.n2.g"], p[f"{name}.n2.b"], groups=8)
        x = T.silu(x)
        x = T.conv2d(x, p[f"{name}.c2.w"], padding=1) + p[f"{name}.c2.b"].reshape(1, -1, 1, 1)
        return h + x

    def _conv(self, name: str, h: Tensor) -> Tensor:
        p = self.store
        return T.conv2d(h, p[f"{name}.w"], padding=1) + p[f"{name}.b"].reshape(1, -1, 1, 1)

    def content_tokens(self, class_ids: np.ndarray) -> Tensor:
        """Token rows per sample; id NULL_CLASS (=8) selects the null row."""
        ids = np.asarray(class_ids, dtype=np.int64)
        if ids.min() < 0 or ids.max() > NULL_CLASS:
            raise ConfigurationError(
                f"class ids must be in [0, {NULL_CLASS}], got range "
                f"[{ids.min()}, {ids.max()}]"
            )
        return self.store["content_tokens"][ids]

    def reset_q_counts(self):
        for s in self.sites:
            s.q_projection_count = 0

    def q_counts(self) -> list[int]:
        return [s.q_projection_count for s in self.sites]

    # -- forward -------------------------------------------------------------

    def forward(
        self,
        x: Tensor,
        t: np.ndarray,
        class_ids: np.ndarray,
        quality_tokens: Tensor | None = None,
    ) -> Tensor:
        """Predict noise for x_t; x is (N,3,32,32), t integer timesteps (N,)."""
        if x.shape[1:] != (3, 32, 32):
            raise DimensionError(f"denoiser expects (N,3,32,32), got {x.shape}")
        if quality_tokens is not None and self.adapter is None:
            raise ConfigurationError("quality tokens supplied but no adapter attached")
        p = self.store
        temb = Tensor(sinusoidal_embedding(np.asarray(t, dtype=np.float64), TEMB_DIM))
        temb = linear(T.silu(linear(temb, p["temb.l1.w"], p["temb.l1.b"])),
                      p["temb.l2.w"], p["temb.l2.b"])
        ctx = self.content_tokens(class_ids)

        def attend(i, h):
            return self.sites[i](h, ctx, quality_tokens, self.adapter, i)

        h32 = self._res("enc32", self._conv("conv_in", x), temb)
        h16 = self._res("enc16", T.downsample2x(self._conv("down1", h32)), temb)
        h16 = attend(0, h16)
        h8 = self._res("enc8", T.downsample2x(self._conv("down2", h16)), temb)
        h8 = attend(1, h8)
        h8 = self._res("mid8", h8, temb)

        u16 = self._conv("up2", T.upsample_nearest2x(h8))
        u16 = self._conv("cat16", T.concat([u16, h16], axis=1))
        u16 = attend(2, self._res("dec16", u16, temb))
        u32 = self._conv("up1", T.upsample_nearest2x(u16))
        u32 = self._conv("cat32", T.concat([u32, h32], axis=1))
        u32 = self._res("dec32", u32, temb)

        out = T.silu(T.group_norm(u32, p["out.norm.g"], p["out.norm.b"], groups=8))
        return self._conv("out", out)

    def predict(
        self,
        x: np.ndarray,
        t: np.ndarray,
        class_ids: np.ndarray,
        quality_tokens: Tensor | None = None,
    ) -> np.ndarray:
        with T.no_grad():
            return self.forward(Tensor(x), t, class_ids, quality_tokens).data.copy()


def save_denoiser(path, model: DenoiserModel):
    from .checkpoint import save_tensors

    save_tensors(path, {f"unet.{k}": v for k, v in model.store.state_dict().items()})


def load_denoiser(path) -> DenoiserModel:
    from .checkpoint import load_tensors

    state = load_tensors(path)
    model = DenoiserModel()
    model.store.load_state_dict(
        {k.removeprefix("unet."): v for k, v in state.items() if k.startswith("unet.")}
    )
    return model
