"""Model configuration and the parameter catalogue it implies."""

from __future__ import annotations

from dataclasses import asdict, dataclass, fields, replace
import hashlib

from ..tensor import ffn_hidden

CHANNEL_MODES = ("transformer", "simple", "none")
LRP_MODES = ("transformer", "simple")
SIGMA_MIN = 0.11
PRIOR_FRAME_SLOTS = 5  # dedicated slots for frames 0-3, one shared slot for the rest of the GOP


@dataclass(frozen=True)
class ModelConfig:
    latent_channels: int = 192
    d_spatial: int = 64
    heads: int = 16
    context_blocks: int = 2
    spatial1_blocks: int = 2
    spatial2_blocks: int = 2
    lrp_blocks: int = 1
    d_channel: int = 128
    channel_blocks: int = 2
    hyper_ch: int = 32
    s: int = 4
    groups: int = 4
    temporal_window: tuple[int, int, int] = (5, 7, 7)
    spatial_window: tuple[int, int] = (7, 7)
    rate_points: int = 4
    use_hyperprior: bool = True
    channel_mode: str = "transformer"
    lrp_mode: str = "transformer"

    def __post_init__(self):
        if self.latent_channels % self.groups:
            raise ValueError(f"latent_channels {self.latent_channels} not divisible by N={self.groups}")
        if self.d_channel % self.groups:
            raise ValueError(f"d_channel {self.d_channel} not divisible by N={self.groups}")
        if self.d_spatial % self.heads:
            raise ValueError(f"d_spatial {self.d_spatial} not divisible by {self.heads} heads")
        for name in ("temporal_window", "spatial_window"):
            win = getattr(self, name)
            if any(e < 1 or e % 2 == 0 for e in win):
                raise ValueError(f"{name} extents must be odd, got {win}")
        if len(self.temporal_window) != 3 or len(self.spatial_window) != 2:
            raise ValueError("temporal_window is (wt, wh, ww) and spatial_window is (wh, ww)")
        if self.channel_mode not in CHANNEL_MODES:
            raise ValueError(f"channel_mode must be one of {CHANNEL_MODES}")
        if self.lrp_mode not in LRP_MODES:
            raise ValueError(f"lrp_mode must be one of {LRP_MODES}")
        for name in ("s", "groups", "rate_points", "latent_channels", "d_spatial", "heads"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")

    @classmethod
    def full_scale(cls, **overrides) -> "ModelConfig":
        """Widths and depths of the full-size model (a little under 120 M parameters)."""
        base = dict(d_spatial=512, heads=16, context_blocks=8, spatial1_blocks=8,
                    spatial2_blocks=8, lrp_blocks=4, d_channel=1024, channel_blocks=2,
                    hyper_ch=128)
        base.update(overrides)
        return cls(**base)

    def with_(self, **changes) -> "ModelConfig":
        return replace(self, **changes)

    @property
    def group_channels(self) -> int:
        return self.latent_channels // self.groups

    @property
    def d_group(self) -> int:
        return self.d_channel // self.groups

    @property
    def cross_window(self) -> tuple[int, int]:
        return tuple(self.temporal_window[1:])

    @property
    def lrp_feature_width(self) -> int:
        return self.d_channel if self.channel_mode == "transformer" else self.d_spatial

    def canonical_text(self) -> str:
        lines = []
        for f in fields(self):
            lines.append(f"{f.name} = {format_value(getattr(self, f.name))}")
        return "\n".join(lines) + "\n"

    def digest(self) -> bytes:
        return hashlib.sha256(self.canonical_text().encode()).digest()[:8]

    def as_dict(self) -> dict:
        return asdict(self)


def format_value(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, tuple):
        return "x".join(str(v) for v in value)
    return str(value)


@dataclass(frozen=True)
class ParamSpec:
    name: str
    shape: tuple[int, ...]
    scheme: str
    fan_in: int | None = None
    fill: float = 1.0  # multiplier applied to the "ones" scheme

    @property
    def size(self) -> int:
        n = 1
        for e in self.shape:
            n *= e
        return n


def _attention(prefix, d, heads, n_off):
    return [ParamSpec(f"{prefix}.wq", (d, d), "scaled-normal", d),
            ParamSpec(f"{prefix}.wk", (d, d), "scaled-normal", d),
            ParamSpec(f"{prefix}.wv", (d, d), "scaled-normal", d),
            ParamSpec(f"{prefix}.wo", (d, d), "scaled-normal", d),
            ParamSpec(f"{prefix}.bias", (heads, n_off), "scaled-normal", n_off)]


def _ffn(prefix, d):
    f = ffn_hidden(d)
    return [ParamSpec(f"{prefix}.w_gate", (d, f), "scaled-normal", d),
            ParamSpec(f"{prefix}.w_up", (d, f), "scaled-normal", d),
            ParamSpec(f"{prefix}.w_down", (f, d), "scaled-normal", f)]


def _norm(name, d):
    return [ParamSpec(name, (d,), "ones")]


def _temporal_block(prefix, cfg):
    d = cfg.d_spatial
    n_off = cfg.temporal_window[0] * cfg.temporal_window[1] * cfg.temporal_window[2]
    return (_norm(f"{prefix}.attn_norm", d) + _attention(f"{prefix}.attn", d, cfg.heads, n_off)
            + _norm(f"{prefix}.ffn_norm", d) + _ffn(f"{prefix}.ffn", d))


def _spatial_block(prefix, cfg):
    d = cfg.d_spatial
    n_self = cfg.spatial_window[0] * cfg.spatial_window[1]
    n_cross = cfg.cross_window[0] * cfg.cross_window[1]
    return (_norm(f"{prefix}.attn_norm", d) + _attention(f"{prefix}.attn", d, cfg.heads, n_self)
            + _norm(f"{prefix}.cross_norm", d) + _norm(f"{prefix}.ctx_norm", d)
            + _attention(f"{prefix}.cross", d, cfg.heads, n_cross)
            + _norm(f"{prefix}.ffn_norm", d) + _ffn(f"{prefix}.ffn", d))


def _resblock(prefix, cin, cout):
    return [ParamSpec(f"{prefix}.conv1", (cout, cin, 3, 3), "scaled-normal", cin * 9),
            ParamSpec(f"{prefix}.b1", (cout,), "zeros"),
            ParamSpec(f"{prefix}.conv2", (cout, cout, 3, 3), "scaled-normal", cout * 9),
            ParamSpec(f"{prefix}.b2", (cout,), "zeros"),
            ParamSpec(f"{prefix}.skip", (cout, cin, 1, 1), "scaled-normal", cin),
            ParamSpec(f"{prefix}.bskip", (cout,), "zeros")]


def _mlp(prefix, din, hidden, dout):
    return [ParamSpec(f"{prefix}.w1", (din, hidden), "scaled-normal", din),
            ParamSpec(f"{prefix}.b1", (hidden,), "zeros"),
            ParamSpec(f"{prefix}.w2", (hidden, dout), "scaled-normal", hidden),
            ParamSpec(f"{prefix}.b2", (dout,), "zeros")]


def parameter_specs(cfg: ModelConfig) -> list[ParamSpec]:
    """Every tensor the model needs, in declaration order."""
    d, c, r = cfg.d_spatial, cfg.latent_channels, cfg.rate_points
    n, cg = cfg.groups, cfg.group_channels
    specs = [ParamSpec("embed.w", (c, d), "scaled-normal", c),
             ParamSpec("embed.b", (d,), "zeros"),
             ParamSpec("rate_scale_in", (r, d), "ones"),
             ParamSpec("rate_scale_out", (r, c), "ones"),
             ParamSpec("learned_pad", (d,), "scaled-normal", d)]
    for i in range(cfg.context_blocks):
        specs += _temporal_block(f"context.{i}", cfg)
    specs += _norm("context.out_norm", d)
    for i in range(cfg.spatial1_blocks):
        specs += _spatial_block(f"spatial1.{i}", cfg)
    if cfg.use_hyperprior:
        hc = cfg.hyper_ch
        specs += _resblock("hyper.enc0", d, hc) + _resblock("hyper.enc1", hc, hc)
        specs += _resblock("hyper.dec0", hc, hc) + _resblock("hyper.dec1", hc, d)
        specs += [ParamSpec("rate_scale_hyper", (r, d), "ones"),
                  ParamSpec("filterbank.loc", (r, PRIOR_FRAME_SLOTS, hc), "zeros"),
                  ParamSpec("filterbank.scale", (r, PRIOR_FRAME_SLOTS, hc), "ones", fill=2.0)]
    else:
        specs += [ParamSpec("hyper_const", (d,), "scaled-normal", d)]
    n_acc = cfg.spatial_window[0] * cfg.spatial_window[1]
    specs += (_norm("acc.q_norm", d) + _norm("acc.kv_norm", d)
              + _attention("acc.attn", d, cfg.heads, n_acc))
    for i in range(cfg.spatial2_blocks):
        specs += _spatial_block(f"spatial2.{i}", cfg)
    specs += _norm("spatial2.out_norm", d)

    if cfg.channel_mode == "transformer":
        dc, dg = cfg.d_channel, cfg.d_group
        for g in range(n):
            specs += [ParamSpec(f"chan.proj.{g}.w", (d, dg), "scaled-normal", d),
                      ParamSpec(f"chan.proj.{g}.b", (dg,), "zeros")]
        for g in range(1, n):
            specs += [ParamSpec(f"chan.emb.{g}.w", (cg, dg), "scaled-normal", cg)]
        for i in range(cfg.channel_blocks):
            specs += _norm(f"chan.{i}.mix_norm", dc)
            specs += [ParamSpec(f"chan.{i}.mix.w", (dc, dc), "scaled-normal", dc)]
            specs += _norm(f"chan.{i}.ffn_norm", dc)
            for g in range(n):
                specs += _ffn(f"chan.{i}.ffn.{g}", dg)
        specs += _norm("chan.out_norm", dc)
        head_in = dg
    elif cfg.channel_mode == "simple":
        head_in = d + c
    else:
        head_in = d
    hidden = cfg.d_group if cfg.channel_mode == "transformer" else d
    for g in range(n):
        specs += _mlp(f"head.mu.{g}", head_in, hidden, cg)
        specs += _mlp(f"head.sigma.{g}", head_in, hidden, cg)

    lrp_in = cfg.lrp_feature_width + c
    if cfg.lrp_mode == "transformer":
        specs += [ParamSpec("lrp.in.w", (lrp_in, d), "scaled-normal", lrp_in),
                  ParamSpec("lrp.in.b", (d,), "zeros")]
        for i in range(cfg.lrp_blocks):
            specs += _temporal_block(f"lrp.{i}", cfg)
        specs += _norm("lrp.out_norm", d)
        specs += [ParamSpec("lrp.head.w", (d, c), "scaled-normal", d),
                  ParamSpec("lrp.head.b", (c,), "zeros")]
    else:
        specs += _mlp("lrp.mlp", lrp_in, d, c)
    return specs


def parameter_count(cfg: ModelConfig) -> int:
    return sum(p.size for p in parameter_specs(cfg))
