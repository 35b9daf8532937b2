"""Float64 dense reference of the entropy model, written position by position.

Shares no code with the package beyond reading weight tensors by name. It is
slow and meant for grids of a few positions.
"""

from __future__ import annotations

import math

import numpy as np


def rms(x, g, eps=1e-5):
    x = np.asarray(x, np.float64)
    return x / np.sqrt(np.mean(x * x, axis=-1, keepdims=True) + eps) * g


def silu(x):
    return x / (1 + np.exp(-x))


def softplus(x):
    return np.logaddexp(0, x)


def ffn(w, p, x):
    return (silu(x @ w[p + ".w_gate"]) * (x @ w[p + ".w_up"])) @ w[p + ".w_down"]


def mlp(w, p, x):
    return silu(x @ w[p + ".w1"] + w[p + ".b1"]) @ w[p + ".w2"] + w[p + ".b2"]


def step(y, x, s):
    return (y + x) % s


def attention(w, p, q_seq, kv_seq, window, heads, mask=None, s=1, q_frames=None):
    """Dense windowed attention. ``q_seq``: (Tq, H, W, d); ``kv_seq``: (Tk, H, W, d).

    Query frame j sits at key time Tk - Tq + j. Window is (wt, wh, ww).
    """
    wt, wh, ww = window
    tq, h, wd, d = q_seq.shape
    tk = kv_seq.shape[0]
    hd = d // heads
    q = q_seq @ w[p + ".wq"]
    k = kv_seq @ w[p + ".wk"]
    v = kv_seq @ w[p + ".wv"]
    bias = w[p + ".bias"]
    out = np.zeros((tq, h, wd, d))
    for j in range(tq):
        t = tk - tq + j
        for y in range(h):
            for x in range(wd):
                keys, offs = [], []
                o = 0
                for dt in range(-(wt - 1), 1):
                    for dy in range(-(wh // 2), wh // 2 + 1):
                        for dx in range(-(ww // 2), ww // 2 + 1):
                            kt, ky, kx = t + dt, y + dy, x + dx
                            ok = kt >= 0 and 0 <= ky < h and 0 <= kx < wd
                            if ok and mask == "spatial_self":
                                ok = step(ky, kx, s) <= step(y, x, s)
                            if ok and mask == "accumulator":
                                ok = step(ky, kx, s) < step(y, x, s)
                            if ok:
                                keys.append((kt, ky, kx))
                                offs.append(o)
                            o += 1
                if not keys:
                    continue
                for hh in range(heads):
                    sl = slice(hh * hd, (hh + 1) * hd)
                    sc = np.array([q[j, y, x, sl] @ k[kt, ky, kx, sl] / math.sqrt(hd) + bias[hh, oi]
                                   for (kt, ky, kx), oi in zip(keys, offs)])
                    e = np.exp(sc - sc.max())
                    a = e / e.sum()
                    out[j, y, x, sl] = sum(ai * v[kt, ky, kx, sl] for ai, (kt, ky, kx) in zip(a, keys))
    return out @ w[p + ".wo"]


def temporal_stack(w, prefix, n, seq, cfg):
    x = seq
    for i in range(n):
        p = f"{prefix}.{i}"
        x = x + attention(w, p + ".attn", rms(x, w[p + ".attn_norm"]), rms(x, w[p + ".attn_norm"]),
                          cfg.temporal_window, cfg.heads)
        x = x + ffn(w, p + ".ffn", rms(x, w[p + ".ffn_norm"]))
    return x[-1]


def context(w, cfg, past_emb, grid):
    h, wd = grid
    pad = np.broadcast_to(w["learned_pad"], (h, wd, cfg.d_spatial))
    seq = np.stack([pad] * (4 - len(past_emb)) + list(past_emb))
    x = temporal_stack(w, "context", cfg.context_blocks, seq, cfg) if cfg.context_blocks else seq[-1]
    return rms(x, w["context.out_norm"])


def embed(w, y_hwc, rate):
    return (y_hwc @ w["embed.w"] + w["embed.b"]) * w["rate_scale_in"][rate]


def spatial(w, which, n, x, ctx, cfg):
    win = (1,) + tuple(cfg.spatial_window)
    cwin = (1,) + tuple(cfg.temporal_window[1:])
    for i in range(n):
        p = f"{which}.{i}"
        h = rms(x, w[p + ".attn_norm"])
        x = x + attention(w, p + ".attn", h[None], h[None], win, cfg.heads, "spatial_self", cfg.s)[0]
        h = rms(x, w[p + ".cross_norm"])
        c = rms(ctx, w[p + ".ctx_norm"])
        x = x + attention(w, p + ".cross", h[None], c[None], cwin, cfg.heads)[0]
        x = x + ffn(w, p + ".ffn", rms(x, w[p + ".ffn_norm"]))
    return x


def conv(x, k, b, stride=1):
    o, c, kh, kw = k.shape
    _, h, wd = x.shape
    ph, pw = kh // 2, kw // 2
    ho, wo = (h + 2 * ph - kh) // stride + 1, (wd + 2 * pw - kw) // stride + 1
    xp = np.zeros((c, h + 2 * ph, wd + 2 * pw))
    xp[:, ph:ph + h, pw:pw + wd] = x
    out = np.zeros((o, ho, wo))
    for oc in range(o):
        for i in range(ho):
            for j in range(wo):
                out[oc, i, j] = np.sum(xp[:, i * stride:i * stride + kh, j * stride:j * stride + kw] * k[oc]) + b[oc]
    return out


def leaky(x):
    return np.where(x >= 0, x, 0.1 * x)


def hyper_pre_round(w, s1):
    h, wd, d = s1.shape
    hp, wp = -(-h // 4) * 4, -(-wd // 4) * 4
    x = np.zeros((d, hp, wp))
    x[:, :h, :wd] = np.moveaxis(s1, -1, 0)
    for p in ("hyper.enc0", "hyper.enc1"):
        y = conv(leaky(conv(x, w[p + ".conv1"], w[p + ".b1"], 2)), w[p + ".conv2"], w[p + ".b2"])
        x = y + conv(x, w[p + ".skip"], w[p + ".bskip"], 2)
    return x


def hyper_decode(w, z, rate, grid):
    x = np.asarray(z, np.float64)
    for p in ("hyper.dec0", "hyper.dec1"):
        u = np.repeat(np.repeat(x, 2, axis=1), 2, axis=2)
        y = conv(leaky(conv(u, w[p + ".conv1"], w[p + ".b1"])), w[p + ".conv2"], w[p + ".b2"])
        x = y + conv(u, w[p + ".skip"], w[p + ".bskip"])
    return np.moveaxis(x[:, :grid[0], :grid[1]], 0, -1) * w["rate_scale_hyper"][rate]


def accumulate(w, hq, s1, cfg):
    win = (1,) + tuple(cfg.spatial_window)
    return hq + attention(w, "acc.attn", rms(hq, w["acc.q_norm"])[None], rms(s1, w["acc.kv_norm"])[None],
                          win, cfg.heads, "accumulator", cfg.s)[0]


def channel(w, cfg, s2_row, y_row):
    ng, dg, cg = cfg.groups, cfg.d_group, cfg.group_channels
    slots = []
    for g in range(ng):
        v = s2_row @ w[f"chan.proj.{g}.w"] + w[f"chan.proj.{g}.b"]
        if g:
            v = v + y_row[(g - 1) * cg:g * cg] @ w[f"chan.emb.{g}.w"]
        slots.append(v)
    x = np.stack(slots)
    blocks = np.arange(ng * dg) // dg
    m = (blocks[None, :] >= blocks[:, None])     # [in, out]
    for i in range(cfg.channel_blocks):
        h = rms(x, w[f"chan.{i}.mix_norm"].reshape(ng, dg))
        x = x + (h.reshape(-1) @ (w[f"chan.{i}.mix.w"] * m)).reshape(ng, dg)
        h = rms(x, w[f"chan.{i}.ffn_norm"].reshape(ng, dg))
        x = x + np.stack([ffn(w, f"chan.{i}.ffn.{g}", h[g]) for g in range(ng)])
    return rms(x, w["chan.out_norm"].reshape(ng, dg))


def params(w, cfg, s2_row, y_row, g, rate):
    """(mu, sigma) of group g at one position."""
    cg = cfg.group_channels
    if cfg.channel_mode == "transformer":
        f = channel(w, cfg, s2_row, y_row)[g]
    elif cfg.channel_mode == "simple":
        past = np.zeros_like(y_row)
        past[:g * cg] = y_row[:g * cg]
        f = np.concatenate([s2_row, past])
    else:
        f = s2_row
    mu = mlp(w, f"head.mu.{g}", f) * w["rate_scale_out"][rate, g * cg:(g + 1) * cg]
    sigma = 0.11 + softplus(mlp(w, f"head.sigma.{g}", f))
    return mu, sigma


def forward(w, cfg, y_hwc, rate, past_emb=(), z_hat=None):
    """Teacher-forced S2, (mu, sigma) per group and the pre-rounding hyper latent."""
    w = {k: np.asarray(v, np.float64) for k, v in w.items()}
    y = np.asarray(y_hwc, np.float64)
    grid = y.shape[:2]
    ctx = context(w, cfg, [np.asarray(e, np.float64) for e in past_emb], grid)
    emb = embed(w, y, rate)
    s1 = spatial(w, "spatial1", cfg.spatial1_blocks, emb, ctx, cfg)
    z_pre = None
    if cfg.use_hyperprior:
        z_pre = hyper_pre_round(w, s1)
        hq = hyper_decode(w, z_hat if z_hat is not None else np.rint(z_pre), rate, grid)
    else:
        hq = np.broadcast_to(w["hyper_const"], s1.shape)
    a = accumulate(w, hq, s1, cfg)
    s2 = rms(spatial(w, "spatial2", cfg.spatial2_blocks, a, ctx, cfg), w["spatial2.out_norm"])
    mus, sigmas = [], []
    for g in range(cfg.groups):
        mg, sg = zip(*[params(w, cfg, s2[i, j], y[i, j], g, rate)
                       for i in range(grid[0]) for j in range(grid[1])])
        mus.append(np.array(mg).reshape(*grid, -1))
        sigmas.append(np.array(sg).reshape(*grid, -1))
    return {"ctx": ctx, "s1": s1, "z_pre": z_pre, "hq": hq, "a": a, "s2": s2,
            "mu": np.concatenate(mus, -1), "sigma": np.concatenate(sigmas, -1), "emb": emb}


def lrp(w, cfg, final_rep, y_hwc, past_tokens=()):
    w = {k: np.asarray(v, np.float64) for k, v in w.items()}
    x = np.concatenate([np.asarray(final_rep, np.float64), np.asarray(y_hwc, np.float64)], -1)
    if cfg.lrp_mode == "simple":
        return 0.5 * np.tanh(mlp(w, "lrp.mlp", x))
    tok = x @ w["lrp.in.w"] + w["lrp.in.b"]
    seq = np.stack([np.asarray(t, np.float64) for t in past_tokens] + [tok])
    h = temporal_stack(w, "lrp", cfg.lrp_blocks, seq, cfg) if cfg.lrp_blocks else tok
    return 0.5 * np.tanh(rms(h, w["lrp.out_norm"]) @ w["lrp.head.w"] + w["lrp.head.b"])
