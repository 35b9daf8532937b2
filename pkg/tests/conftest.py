import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from pswa.model.config import ModelConfig  # noqa: E402
from pswa.model.network import EntropyModel, FrameState  # noqa: E402
from pswa.model.weights import generate_weights  # noqa: E402
from pswa.tensor import F32  # noqa: E402

ACCEPTANCE_LINES = []


def tiny_config(**kw) -> ModelConfig:
    base = dict(latent_channels=8, d_spatial=8, heads=2, context_blocks=1, spatial1_blocks=1,
                spatial2_blocks=1, lrp_blocks=1, d_channel=8, channel_blocks=1, hyper_ch=4,
                s=4, groups=4)
    base.update(kw)
    return ModelConfig(**base)


_MODELS = {}


def tiny_model(seed=0, **kw) -> EntropyModel:
    key = (seed, tuple(sorted(kw.items())))
    if key not in _MODELS:
        cfg = tiny_config(**kw)
        _MODELS[key] = EntropyModel(cfg, generate_weights(cfg, seed))
    return _MODELS[key]


def teacher_forced(model, y_hwc, rate, state=FrameState(), z_hat=None):
    """Every intermediate of one frame evaluated in a single pass over known symbols.

    ``z_hat`` pins the side information, as a decoder receives it before any main symbol.
    """
    grid = y_hwc.shape[:2]
    ctx = model.context_forward(state, grid)
    emb = model.embed(y_hwc, rate)
    fin = model.frame_inputs(ctx, None)
    s1 = model.s1_full(emb, fin)
    z = model.hyper_encode(s1) if model.use_hyperprior and z_hat is None else z_hat
    fin.hq = model.hyper_decode(z, rate, grid)
    s2 = model.s2_from_s1(s1, fin)
    rows = s2.reshape(-1, s2.shape[-1])
    yr = y_hwc.reshape(-1, y_hwc.shape[-1])
    mus, sigmas = [], []
    for g in range(model.cfg.groups):
        p = model.group_params(g, rows, yr, rate)
        mus.append(p.mu)
        sigmas.append(p.sigma)
    mu = np.concatenate(mus, -1).reshape(*grid, -1)
    sigma = np.concatenate(sigmas, -1).reshape(*grid, -1)
    return dict(ctx=ctx, emb=emb, s1=s1, z=z, hq=fin.hq, s2=s2, mu=mu, sigma=sigma)


def random_latent(rng, c, h, w, scale=3.0):
    return rng.normal(0.0, scale, (c, h, w)).astype(F32)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.write_sep("=", "acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
