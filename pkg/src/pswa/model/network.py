"""The entropy model: context, spatial modules, hyperprior, accumulator, channel
transformer, prediction heads and latent residual prediction.

Token grids are laid out (H, W, d). Every spatial stage is written against a
``Box`` so that the same code evaluates either the whole frame (encoder,
wavefront decoder) or the small cone of positions one query depends on (serial
decoder). Per-row arithmetic is identical in both cases, which is what makes
the two decoders agree bit for bit.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ..attention import AttentionConfig, AttentionWeights, Box, cross_windowed, project_kv, swa2d, swa3d_timecausal
from ..tensor import F32, conv2d, leaky_relu, linear, rmsnorm, silu, softplus, swiglu_ffn, tanh32, upsample2x
from ..wavefront import MaskKind, channel_mask
from .config import PRIOR_FRAME_SLOTS, SIGMA_MIN, ModelConfig
from .weights import ModelWeights

CONTEXT_FRAMES = 4


@dataclass(frozen=True)
class FrameState:
    """Temporal context carried from frame to frame inside one GOP."""

    frame_index: int = 0
    latents: tuple = ()      # embedded pre-LRP latents of up to 4 past frames, oldest first
    lrp_tokens: tuple = ()   # LRP input tokens of up to 4 past frames

    def __post_init__(self):
        if len(self.latents) != min(self.frame_index, CONTEXT_FRAMES):
            raise ValueError("buffer length must equal min(frame_index, 4)")

    def advance(self, embedded: np.ndarray, lrp_token: np.ndarray | None) -> "FrameState":
        lat = (self.latents + (embedded,))[-CONTEXT_FRAMES:]
        lrp = self.lrp_tokens if lrp_token is None else (self.lrp_tokens + (lrp_token,))[-CONTEXT_FRAMES:]
        return FrameState(self.frame_index + 1, lat, lrp)


@dataclass
class FrameInputs:
    """Per-frame constants shared by every position: context K/V and decoded hyperprior features."""

    ctx: np.ndarray
    hq: np.ndarray
    ctx_kv: dict = field(default_factory=dict)


@dataclass(frozen=True)
class GaussianParams:
    mu: np.ndarray
    sigma: np.ndarray


def select_prior(rate_idx: int, frame_idx_in_gop: int) -> tuple[int, int]:
    if frame_idx_in_gop < 0:
        raise ValueError("frame index must be non-negative")
    return rate_idx, min(frame_idx_in_gop, PRIOR_FRAME_SLOTS - 1)


def _attn(w: ModelWeights, prefix: str) -> AttentionWeights:
    return AttentionWeights(w[f"{prefix}.wq"], w[f"{prefix}.wk"], w[f"{prefix}.wv"],
                            w[f"{prefix}.wo"], w[f"{prefix}.bias"])


def _mlp(w, prefix, x, workers=1):
    h = silu(linear(x, w[f"{prefix}.w1"], w[f"{prefix}.b1"], workers=workers))
    return linear(h, w[f"{prefix}.w2"], w[f"{prefix}.b2"], workers=workers)


class EntropyModel:
    """Stateless evaluator for one (config, weights) pair."""

    def __init__(self, cfg: ModelConfig, weights: ModelWeights, *, kernel: str = "tiled", workers: int = 1):
        weights.validate(cfg)
        self.cfg = cfg
        self.w = weights
        self.kernel = kernel
        self.workers = max(1, int(workers))
        d, nh = cfg.d_spatial, cfg.heads
        self.temporal_cfg = AttentionConfig(d, nh, cfg.temporal_window)
        self.self_cfg = AttentionConfig(d, nh, cfg.spatial_window, MaskKind.SPATIAL_SELF)
        self.cross_cfg = AttentionConfig(d, nh, cfg.cross_window)
        self.acc_cfg = AttentionConfig(d, nh, cfg.spatial_window, MaskKind.ACCUMULATOR)
        self._attn = {}
        self._masked_mix = {}
        if cfg.channel_mode == "transformer":
            m = channel_mask(cfg.groups, cfg.d_group).T
            for i in range(cfg.channel_blocks):
                self._masked_mix[i] = np.where(m, weights[f"chan.{i}.mix.w"], F32(0.0)).astype(F32)

    def with_kernel(self, kernel: str, workers: int | None = None) -> "EntropyModel":
        return EntropyModel(self.cfg, self.w, kernel=kernel, workers=self.workers if workers is None else workers)

    def attn(self, prefix: str) -> AttentionWeights:
        if prefix not in self._attn:
            self._attn[prefix] = _attn(self.w, prefix)
        return self._attn[prefix]

    # --- embedding and temporal context ------------------------------------------

    def embed(self, y_hat: np.ndarray, rate_idx: int) -> np.ndarray:
        """(H, W, C) latent -> (H, W, d) tokens, rate-scaled."""
        self._check_rate(rate_idx)
        if y_hat.shape[-1] != self.cfg.latent_channels:
            raise ValueError(f"latent has {y_hat.shape[-1]} channels, model expects {self.cfg.latent_channels}")
        e = linear(np.asarray(y_hat, F32), self.w["embed.w"], self.w["embed.b"], workers=self.workers)
        return e * self.w["rate_scale_in"][rate_idx]

    def _temporal_block(self, prefix, x, last_only):
        h = rmsnorm(x, self.w[f"{prefix}.attn_norm"])
        out = swa3d_timecausal(h, self.attn(f"{prefix}.attn"), self.temporal_cfg,
                               kernel=self.kernel, workers=self.workers, last_only=last_only)
        x = (x[-1:] if last_only else x) + out
        h = rmsnorm(x, self.w[f"{prefix}.ffn_norm"])
        return x + self._ffn(f"{prefix}.ffn", h)

    def _ffn(self, prefix, h):
        return swiglu_ffn(h, self.w[f"{prefix}.w_gate"], self.w[f"{prefix}.w_up"], self.w[f"{prefix}.w_down"],
                          workers=self.workers)

    def _temporal_stack(self, prefix, n_blocks, seq):
        x = seq
        for i in range(n_blocks):
            x = self._temporal_block(f"{prefix}.{i}", x, last_only=(i == n_blocks - 1))
        return x[-1]

    def context_forward(self, state: FrameState, grid: tuple[int, int]) -> np.ndarray:
        """Features aligned with the current frame, from up to four past latents."""
        h, w = grid
        d = self.cfg.d_spatial
        pad = np.broadcast_to(self.w["learned_pad"], (h, w, d))
        slots = [pad] * (CONTEXT_FRAMES - len(state.latents)) + list(state.latents)
        seq = np.stack(slots).astype(F32)
        if seq.shape[1:] != (h, w, d):
            raise ValueError("context buffer does not match the latent grid")
        if self.cfg.context_blocks == 0:
            x = seq[-1]
        else:
            x = self._temporal_stack("context", self.cfg.context_blocks, seq)
        return rmsnorm(x, self.w["context.out_norm"])

    def frame_inputs(self, ctx: np.ndarray, hq: np.ndarray) -> FrameInputs:
        """Project the context once per frame for every temporal cross-attention layer."""
        fin = FrameInputs(ctx=ctx, hq=hq)
        for which, n in (("spatial1", self.cfg.spatial1_blocks), ("spatial2", self.cfg.spatial2_blocks)):
            for i in range(n):
                c = rmsnorm(ctx, self.w[f"{which}.{i}.ctx_norm"])
                fin.ctx_kv[(which, i)] = project_kv(c, self.attn(f"{which}.{i}.cross"), self.cross_cfg,
                                                    workers=self.workers)
        return fin

    # --- spatial modules ---------------------------------------------------------

    def _spatial_block(self, which, i, x, box, frame_hw, fin):
        prefix = f"{which}.{i}"
        h = rmsnorm(x, self.w[f"{prefix}.attn_norm"])
        out, qbox = swa2d(h, self.attn(f"{prefix}.attn"), self.self_cfg, box=box, frame_hw=frame_hw,
                          s=self.cfg.s, kernel=self.kernel, workers=self.workers)
        x = box.crop(x, qbox) + out
        h = rmsnorm(x, self.w[f"{prefix}.cross_norm"])
        x = x + cross_windowed(h, None, self.attn(f"{prefix}.cross"), self.cross_cfg, q_box=qbox,
                               kv_box=Box.frame(*frame_hw), frame_hw=frame_hw, kernel=self.kernel,
                               workers=self.workers, kv_projected=fin.ctx_kv[(which, i)])
        h = rmsnorm(x, self.w[f"{prefix}.ffn_norm"])
        return x + self._ffn(f"{prefix}.ffn", h), qbox

    def spatial_forward(self, which: str, x: np.ndarray, box: Box, frame_hw, fin: FrameInputs):
        n = self.cfg.spatial1_blocks if which == "spatial1" else self.cfg.spatial2_blocks
        for i in range(n):
            x, box = self._spatial_block(which, i, x, box, frame_hw, fin)
        return x, box

    def accumulate(self, s1: np.ndarray, box: Box, frame_hw, hq: np.ndarray):
        """A = Hq + cross(Hq -> S1) under the strictly-past accumulator mask."""
        wh, ww = self.cfg.spatial_window
        qbox = box.shrink(wh // 2, ww // 2, frame_hw)
        hq_q = Box.frame(*frame_hw).crop(hq, qbox)
        q_in = rmsnorm(hq_q, self.w["acc.q_norm"])
        kv_in = rmsnorm(s1, self.w["acc.kv_norm"])
        out = cross_windowed(q_in, kv_in, self.attn("acc.attn"), self.acc_cfg, q_box=qbox, kv_box=box,
                             frame_hw=frame_hw, mask=MaskKind.ACCUMULATOR, s=self.cfg.s,
                             kernel=self.kernel, workers=self.workers)
        return hq_q + out, qbox

    def cone_radius(self) -> tuple[int, int]:
        """How far S2 at one position reaches into the embedded latent grid."""
        wh, ww = self.cfg.spatial_window
        layers = self.cfg.spatial1_blocks + 1 + self.cfg.spatial2_blocks
        return layers * (wh // 2), layers * (ww // 2)

    def s2_forward(self, emb: np.ndarray, box: Box, frame_hw, fin: FrameInputs):
        """Embedded latents over ``box`` -> normalised S2 over the box that remains valid."""
        s1, b1 = self.spatial_forward("spatial1", emb, box, frame_hw, fin)
        a, b2 = self.accumulate(s1, b1, frame_hw, fin.hq)
        s2, b3 = self.spatial_forward("spatial2", a, b2, frame_hw, fin)
        return rmsnorm(s2, self.w["spatial2.out_norm"]), b3

    def s1_full(self, emb: np.ndarray, fin: FrameInputs) -> np.ndarray:
        frame_hw = emb.shape[:2]
        s1, _ = self.spatial_forward("spatial1", emb, Box.frame(*frame_hw), frame_hw, fin)
        return s1

    def s2_from_s1(self, s1: np.ndarray, fin: FrameInputs) -> np.ndarray:
        frame_hw = s1.shape[:2]
        frame = Box.frame(*frame_hw)
        a, _ = self.accumulate(s1, frame, frame_hw, fin.hq)
        s2, _ = self.spatial_forward("spatial2", a, frame, frame_hw, fin)
        return rmsnorm(s2, self.w["spatial2.out_norm"])

    # --- hyperprior --------------------------------------------------------------

    @property
    def use_hyperprior(self) -> bool:
        return self.cfg.use_hyperprior

    def _rb_down(self, prefix, x):
        w = self.w
        h = leaky_relu(conv2d(x, w[f"{prefix}.conv1"], w[f"{prefix}.b1"], stride=2))
        h = conv2d(h, w[f"{prefix}.conv2"], w[f"{prefix}.b2"])
        return h + conv2d(x, w[f"{prefix}.skip"], w[f"{prefix}.bskip"], stride=2)

    def _rb_up(self, prefix, x):
        w = self.w
        u = upsample2x(x)
        h = leaky_relu(conv2d(u, w[f"{prefix}.conv1"], w[f"{prefix}.b1"]))
        h = conv2d(h, w[f"{prefix}.conv2"], w[f"{prefix}.b2"])
        return h + conv2d(u, w[f"{prefix}.skip"], w[f"{prefix}.bskip"])

    def hyper_encode(self, s1: np.ndarray) -> np.ndarray:
        """S1 (H, W, d) -> integer-valued z of shape (hyper_ch, ceil(H/4), ceil(W/4)).

        The grid is zero-padded to multiples of four first.
        """
        if not self.use_hyperprior:
            raise ValueError("hyperprior disabled in this configuration")
        h, w, d = s1.shape
        hp, wp = -(-h // 4) * 4, -(-w // 4) * 4
        x = np.zeros((d, hp, wp), F32)
        x[:, :h, :w] = np.moveaxis(s1, -1, 0)
        z = self._rb_down("hyper.enc1", self._rb_down("hyper.enc0", x))
        return np.rint(z).astype(F32)

    def hyper_decode(self, z_hat: np.ndarray, rate_idx: int, grid: tuple[int, int]) -> np.ndarray:
        """z_hat (hyper_ch, h4, w4) -> Hq (H, W, d) aligned with the latent grid."""
        self._check_rate(rate_idx)
        h, w = grid
        if not self.use_hyperprior:
            return np.broadcast_to(self.w["hyper_const"], (h, w, self.cfg.d_spatial)).astype(F32)
        if z_hat.shape != self.hyper_shape(grid):
            raise ValueError(f"z_hat shape {z_hat.shape} != expected {self.hyper_shape(grid)}")
        x = self._rb_up("hyper.dec1", self._rb_up("hyper.dec0", np.asarray(z_hat, F32)))
        hq = np.moveaxis(x[:, :h, :w], 0, -1)
        return np.ascontiguousarray(hq * self.w["rate_scale_hyper"][rate_idx])

    def hyper_shape(self, grid: tuple[int, int]) -> tuple[int, int, int]:
        h, w = grid
        return self.cfg.hyper_ch, -(-h // 4), -(-w // 4)

    def prior_params(self, rate_idx: int, frame_idx_in_gop: int) -> tuple[np.ndarray, np.ndarray]:
        """Per-channel (loc, scale) of the hyperprior bank entry."""
        r, slot = select_prior(rate_idx, frame_idx_in_gop)
        self._check_rate(r)
        return self.w["filterbank.loc"][r, slot], self.w["filterbank.scale"][r, slot]

    # --- channel transformer and heads ---------------------------------------

    def channel_forward(self, s2: np.ndarray, y_hat: np.ndarray) -> np.ndarray:
        """Per-position group features (n, N, d_g) from S2 rows (n, d) and latent rows (n, C).

        Slot g only sees latent groups < g, whatever the remaining entries hold.
        """
        cfg = self.cfg
        if cfg.channel_mode != "transformer":
            raise ValueError("channel transformer disabled in this configuration")
        n_rows = s2.shape[0]
        ng, dg, cg = cfg.groups, cfg.d_group, cfg.group_channels
        slots = []
        for g in range(ng):
            slot = linear(s2, self.w[f"chan.proj.{g}.w"], self.w[f"chan.proj.{g}.b"], workers=self.workers)
            if g > 0:
                prev = np.asarray(y_hat[:, (g - 1) * cg:g * cg], F32)
                slot = slot + linear(prev, self.w[f"chan.emb.{g}.w"], workers=self.workers)
            slots.append(slot)
        x = np.stack(slots, axis=1)  # (n, N, dg)
        for i in range(cfg.channel_blocks):
            h = rmsnorm(x, self.w[f"chan.{i}.mix_norm"].reshape(ng, dg))
            mixed = linear(h.reshape(n_rows, ng * dg), self._masked_mix[i], workers=self.workers)
            x = x + mixed.reshape(n_rows, ng, dg)
            h = rmsnorm(x, self.w[f"chan.{i}.ffn_norm"].reshape(ng, dg))
            x = x + np.stack([self._ffn(f"chan.{i}.ffn.{g}", h[:, g]) for g in range(ng)], axis=1)
        return rmsnorm(x, self.w["chan.out_norm"].reshape(ng, dg))

    def head_input(self, g: int, s2: np.ndarray, y_hat: np.ndarray, feats: np.ndarray | None) -> np.ndarray:
        mode = self.cfg.channel_mode
        if mode == "transformer":
            return feats[:, g]
        if mode == "simple":
            cg = self.cfg.group_channels
            past = np.zeros_like(np.asarray(y_hat, F32))
            past[:, :g * cg] = y_hat[:, :g * cg]
            return np.concatenate([s2, past], axis=1)
        return s2

    def predict_params(self, head_in: np.ndarray, g: int, rate_idx: int) -> GaussianParams:
        if not 0 <= g < self.cfg.groups:
            raise ValueError(f"group {g} outside [0, {self.cfg.groups})")
        self._check_rate(rate_idx)
        cg = self.cfg.group_channels
        mu = _mlp(self.w, f"head.mu.{g}", head_in, self.workers)
        mu = mu * self.w["rate_scale_out"][rate_idx, g * cg:(g + 1) * cg]
        sigma = F32(SIGMA_MIN) + softplus(_mlp(self.w, f"head.sigma.{g}", head_in, self.workers))
        return GaussianParams(mu.astype(F32), sigma.astype(F32))

    def group_params(self, g: int, s2: np.ndarray, y_hat: np.ndarray, rate_idx: int,
                     feats: np.ndarray | None = None) -> GaussianParams:
        """(mu, sigma) of group g at the rows of ``s2`` given the latent rows decoded so far."""
        if feats is None and self.cfg.channel_mode == "transformer":
            feats = self.channel_forward(s2, y_hat)
        return self.predict_params(self.head_input(g, s2, y_hat, feats), g, rate_idx)

    def final_representation(self, s2: np.ndarray, y_hat: np.ndarray) -> np.ndarray:
        """Full-frame (H, W, F) features handed to the LRP."""
        h, w, _ = s2.shape
        if self.cfg.channel_mode != "transformer":
            return s2
        feats = self.channel_forward(s2.reshape(h * w, -1), y_hat.reshape(h * w, -1))
        return feats.reshape(h, w, -1)

    # --- latent residual prediction ------------------------------------------

    def lrp_forward(self, final_rep: np.ndarray, y_hat: np.ndarray, state: FrameState):
        """Returns (epsilon, token); ``token`` joins the LRP history of later frames."""
        x = np.concatenate([np.asarray(final_rep, F32), np.asarray(y_hat, F32)], axis=-1)
        if self.cfg.lrp_mode == "simple":
            return F32(0.5) * tanh32(_mlp(self.w, "lrp.mlp", x, self.workers)), None
        tok = linear(x, self.w["lrp.in.w"], self.w["lrp.in.b"], workers=self.workers)
        seq = np.stack(list(state.lrp_tokens) + [tok]).astype(F32)
        h = self._temporal_stack("lrp", self.cfg.lrp_blocks, seq) if self.cfg.lrp_blocks else tok
        h = rmsnorm(h, self.w["lrp.out_norm"])
        return F32(0.5) * tanh32(linear(h, self.w["lrp.head.w"], self.w["lrp.head.b"], workers=self.workers)), tok

    def _check_rate(self, rate_idx):
        if not 0 <= rate_idx < self.cfg.rate_points:
            raise ValueError(f"rate index {rate_idx} outside [0, {self.cfg.rate_points})")
