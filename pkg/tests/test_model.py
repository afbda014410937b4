import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

from ssfn.model import (
    ConfigError,
    ModelConfig,
    bicubic_upsample,
    embed,
    forward,
    group_bands,
    init_hidden,
    init_params,
    loss,
    param_count,
    param_shapes,
    random_params,
    reconstruct,
    ssfb_step,
    zero_params,
)
from ssfn.nn_ops import ShapeError, grad_check


def to64(params):
    return {k: v.to(torch.float64) for k, v in params.items()}


# ---------------------------------------------------------------- numpy oracle of one feedback step

def np_conv(x, k, b):
    """Zero-padded correlation by summing shifted copies (no torch)."""
    n, c, h, w = x.shape
    p = k.shape[2] // 2
    xp = np.pad(x, ((0, 0), (0, 0), (p, p), (p, p)))
    out = np.zeros((n, k.shape[0], h, w)) + b[None, :, None, None]
    for u in range(k.shape[2]):
        for v in range(k.shape[3]):
            out += np.einsum("oc,nchw->nohw", k[:, :, u, v], xp[:, :, u:u + h, v:v + w])
    return out


def np_res(x, P, pre):
    y = np.maximum(np_conv(x, P[f"{pre}.conv1.weight"], P[f"{pre}.conv1.bias"]), 0)
    return x + np_conv(y, P[f"{pre}.conv2.weight"], P[f"{pre}.conv2.bias"])


def np_ssfb(feats, hidden, P, G):
    n, c, H, W = hidden.shape
    pooled = hidden.reshape(n, c, H // 2, 2, W // 2, 2).mean(axis=(3, 5))
    local = []
    for g in range(G):
        x = np_conv(np.concatenate([pooled, feats[g]], axis=1), P[f"compress.{g}.weight"], P[f"compress.{g}.bias"])
        for b in range(2):
            x = np_res(x, P, f"local.{g}.res{b}")
        local.append(x)
    x = np.concatenate(local, axis=1)
    k, bias = P["global.deconv.weight"], P["global.deconv.bias"]
    up = np.zeros((n, k.shape[1], 2 * x.shape[2], 2 * x.shape[3])) + bias[None, :, None, None]
    for a in range(2):
        for bb in range(2):
            up[:, :, a::2, bb::2] += np.einsum("io,nihw->nohw", k[:, :, a, bb], x)
    for b in range(2):
        up = np_res(up, P, f"global.res{b}")
    return up


# ---------------------------------------------------------------- grouping

@pytest.mark.parametrize("L,G,sizes", [(31, 8, [4, 4, 4, 4, 4, 4, 4, 3]), (31, 1, [31]), (33, 8, [5, 4, 4, 4, 4, 4, 4, 4])])
def test_group_sizes(L, G, sizes):
    assert [len(g) for g in group_bands(L, G)] == sizes


@pytest.mark.parametrize("L,G", [(4, 5), (4, 0)])
def test_group_errors(L, G):
    with pytest.raises(ConfigError):
        group_bands(L, G)


@settings(max_examples=60, deadline=None)
@given(st.integers(1, 64).flatmap(lambda L: st.tuples(st.just(L), st.integers(1, L))))
def test_grouping_is_partition(lg):
    L, G = lg
    groups = group_bands(L, G)
    assert [i for g in groups for i in g] == list(range(L))
    assert [len(g) for g in groups] == [len(a) for a in np.array_split(np.arange(L), G)]


# ---------------------------------------------------------------- config

def test_config_validation():
    with pytest.raises(ConfigError):
        ModelConfig(band_count=4, groups=5)
    with pytest.raises(ConfigError):
        ModelConfig(base_filters=250, groups=8)
    with pytest.raises(ConfigError):
        ModelConfig(scale=3)
    with pytest.raises(ConfigError):
        ModelConfig(base_filters=8, groups=2, scale=8)  # 8 % 16
    with pytest.raises(ConfigError):
        ModelConfig(iterations=0)


# ---------------------------------------------------------------- blocks

def test_embed_zero_params():
    cfg = ModelConfig(band_count=4, groups=2, iterations=1, scale=4, base_filters=8)
    feats = embed(torch.rand(1, 4, 6, 6), group_bands(4, 2), zero_params(cfg))
    assert len(feats) == 2 and all(not f.any() for f in feats)


def test_embed_shapes_full_width():
    cfg = ModelConfig(band_count=31, groups=8, iterations=1, scale=4, base_filters=256)
    params = init_params(cfg)
    feats = embed(torch.rand(1, 31, 4, 4), group_bands(31, 8), params)
    assert [tuple(f.shape) for f in feats] == [(1, 32, 4, 4)] * 8


def test_embed_delta_selects_bands():
    cfg = ModelConfig(band_count=3, groups=1, iterations=1, scale=2, base_filters=3)
    params = zero_params(cfg)
    for c in range(3):
        params["embed.0.weight"][c, c, 1, 1] = 1.0
    x = torch.rand(2, 3, 6, 6)
    (feat,) = embed(x, group_bands(3, 1), params)
    torch.testing.assert_close(feat, x)


def test_embed_band_mismatch():
    cfg = ModelConfig(band_count=4, groups=2, iterations=1, scale=4, base_filters=8)
    with pytest.raises(ShapeError):
        embed(torch.rand(1, 5, 4, 4), group_bands(4, 2), zero_params(cfg))


def test_init_hidden():
    cfg = ModelConfig(band_count=31, groups=8, iterations=1, scale=4, base_filters=256)
    h = init_hidden(1, cfg, (32, 32))
    assert h.shape == (1, 256, 64, 64) and h.sum() == 0


def test_zero_hidden_equals_feedforward_variant():
    cfg = ModelConfig(band_count=4, groups=2, iterations=1, scale=4, base_filters=8)
    P = random_params(cfg, seed=3)
    lr = torch.rand(1, 4, 6, 6)
    feats = embed(lr, group_bands(4, 2), P)
    got = ssfb_step(feats, init_hidden(1, cfg, (6, 6)), P)
    # variant: no hidden concat, compression kernels restricted to the feature channels
    Q = dict(P)
    for g in range(2):
        Q[f"compress.{g}.weight"] = P[f"compress.{g}.weight"][:, cfg.base_filters:]
    C = cfg.base_filters
    local = []
    from ssfn.model import _conv, residual_block

    for g, f in enumerate(feats):
        x = _conv(f, Q, f"compress.{g}")
        for b in range(2):
            x = residual_block(x, Q, f"local.{g}.res{b}")
        local.append(x)
    from ssfn.nn_ops import deconv2d_k2s2

    x = deconv2d_k2s2(torch.cat(local, 1), P["global.deconv.weight"], P["global.deconv.bias"])
    for b in range(2):
        x = residual_block(x, P, f"global.res{b}")
    assert x.shape == (1, C, 12, 12)
    torch.testing.assert_close(got, x, rtol=1e-6, atol=1e-6)


def test_ssfb_shape_full_width():
    cfg = ModelConfig(band_count=31, groups=8, iterations=1, scale=4, base_filters=256)
    params = init_params(cfg)
    feats = embed(torch.rand(1, 31, 32, 32), group_bands(31, 8), params)
    with torch.no_grad():
        assert ssfb_step(feats, init_hidden(1, cfg, (32, 32)), params).shape == (1, 256, 64, 64)


def test_ssfb_zero_params():
    cfg = ModelConfig(band_count=4, groups=2, iterations=1, scale=4, base_filters=8)
    P = zero_params(cfg)
    feats = [torch.rand(1, 4, 4, 4), torch.rand(1, 4, 4, 4)]
    assert not ssfb_step(feats, torch.rand(1, 8, 8, 8), P).any()


def test_ssfb_matches_numpy_composition(rng):
    cfg = ModelConfig(band_count=4, groups=2, iterations=1, scale=4, base_filters=8)
    P = to64(random_params(cfg, seed=11, std=0.3))
    feats = [torch.from_numpy(rng.random((2, 4, 4, 4))) for _ in range(2)]
    hidden = torch.from_numpy(rng.normal(size=(2, 8, 8, 8)))
    got = ssfb_step(feats, hidden, P).numpy()
    Pn = {k: v.numpy() for k, v in P.items()}
    np.testing.assert_allclose(got, np_ssfb([f.numpy() for f in feats], hidden.numpy(), Pn, 2), atol=1e-10)


@pytest.mark.parametrize("s,C,out", [(4, 256, 128), (2, 256, 64), (8, 256, 256)])
def test_reconstruct_shapes(s, C, out):
    cfg = ModelConfig(band_count=31, groups=8, iterations=1, scale=s, base_filters=C)
    P = zero_params(cfg)
    assert P["recon.conv2.weight"].shape[1] == C // (s // 2) ** 2
    with torch.no_grad():
        assert reconstruct(torch.zeros(1, C, 64, 64), cfg, P).shape == (1, 31, out, out)


# ---------------------------------------------------------------- forward

def test_zero_params_reproduce_bicubic():
    cfg = ModelConfig(band_count=4, groups=2, iterations=3, scale=4, base_filters=8)
    lr = torch.rand(2, 4, 6, 6)
    out = forward(lr, cfg, zero_params(cfg))
    up = bicubic_upsample(lr, 4)
    for sr in out.sr + [out.output]:
        assert torch.equal(sr, up)


def test_untrained_model_starts_at_bicubic():
    cfg = ModelConfig(band_count=4, groups=2, iterations=2, scale=4, base_filters=8)
    lr = torch.rand(1, 4, 4, 4)
    out = forward(lr, cfg, init_params(cfg, seed=1))
    assert torch.equal(out.output, out.upsampled)


def test_single_iteration_output_equals_first():
    cfg = ModelConfig(band_count=4, groups=2, iterations=1, scale=4, base_filters=8)
    out = forward(torch.rand(1, 4, 4, 4), cfg, random_params(cfg, 2))
    assert torch.equal(out.output, out.sr[0])


def test_average_identity():
    cfg = ModelConfig(band_count=4, groups=2, iterations=3, scale=4, base_filters=8)
    out = forward(torch.rand(1, 4, 4, 4), cfg, random_params(cfg, 5))
    torch.testing.assert_close(out.output, torch.stack(out.sr).mean(0), rtol=0, atol=1e-6)
    torch.testing.assert_close(out.output - out.upsampled, torch.stack(out.residuals).mean(0), rtol=0, atol=1e-6)


def test_forward_rejects_odd_and_wrong_bands():
    cfg = ModelConfig(band_count=4, groups=2, iterations=1, scale=4, base_filters=8)
    P = zero_params(cfg)
    with pytest.raises(ShapeError):
        forward(torch.rand(1, 4, 5, 4), cfg, P)
    with pytest.raises(ShapeError):
        forward(torch.rand(1, 3, 4, 4), cfg, P)


def test_forward_deterministic():
    cfg = ModelConfig(band_count=4, groups=2, iterations=2, scale=4, base_filters=8)
    P, lr = random_params(cfg, 9), torch.rand(1, 4, 6, 6)
    a, b = forward(lr, cfg, P), forward(lr, cfg, P)
    assert a.output.numpy().tobytes() == b.output.numpy().tobytes()


@settings(max_examples=20, deadline=None)
@given(st.sampled_from([2, 4, 8]), st.integers(1, 6), st.integers(1, 3), st.integers(1, 3), st.sampled_from([2, 4]))
def test_output_shape_property(s, L, G_pick, T, h):
    G = min(G_pick, L)
    cfg = ModelConfig(band_count=L, groups=G, iterations=T, scale=s, base_filters=16 * G)
    with torch.no_grad():
        out = forward(torch.rand(1, L, h, h), cfg, random_params(cfg, 0))
    assert out.output.shape == (1, L, s * h, s * h)
    assert len(out.residuals) == T


# ---------------------------------------------------------------- loss

def test_loss_cases(rng):
    cfg = ModelConfig(band_count=4, groups=2, iterations=2, scale=4, base_filters=8)
    lr = torch.rand(1, 4, 4, 4)
    out = forward(lr, cfg, zero_params(cfg))
    assert loss(out, out.output).item() == 0
    hr = torch.rand(1, 4, 16, 16)
    assert loss(out, hr).item() == pytest.approx((hr - bicubic_upsample(lr, 4)).abs().mean().item(), rel=1e-6)
    out = forward(lr, cfg, random_params(cfg, 1))
    expected = np.abs(out.output.detach().numpy() - hr.numpy()).mean()
    assert loss(out, hr).item() == pytest.approx(expected, rel=1e-6)
    per_it = np.mean([np.abs(s.detach().numpy() - hr.numpy()).mean() for s in out.sr])
    assert loss(out, hr, mode="per_iteration").item() == pytest.approx(per_it, rel=1e-6)


# ---------------------------------------------------------------- parameter count

def test_param_count_independent_of_T():
    a = ModelConfig(band_count=31, groups=8, iterations=1, scale=4, base_filters=256)
    b = ModelConfig(band_count=31, groups=8, iterations=6, scale=4, base_filters=256)
    assert param_count(a) == param_count(b)


def test_param_count_depends_on_G():
    a = ModelConfig(band_count=31, groups=1, iterations=6, scale=4, base_filters=256)
    b = ModelConfig(band_count=31, groups=8, iterations=6, scale=4, base_filters=256)
    assert param_count(a) != param_count(b)
    for cfg in (a, b):
        assert param_count(cfg) == sum(t.numel() for t in zero_params(cfg).values())


def test_param_count_hand_count():
    cfg = ModelConfig(band_count=2, groups=1, iterations=3, scale=2, base_filters=4)
    conv3 = 4 * 4 * 9 + 4
    expected = (
        (4 * 2 * 9 + 4)  # embed
        + (4 * 8 + 4)  # compress 1x1 over C + C_g
        + 4 * conv3  # local residual blocks
        + (4 * 4 * 4 + 4)  # deconv
        + 4 * conv3  # global residual blocks
        + conv3  # recon conv before shuffle
        + (2 * 4 * 9 + 2)  # recon conv to bands
    )
    assert expected == 1586
    assert param_count(cfg) == expected


def test_param_names_are_unique_and_ordered():
    cfg = ModelConfig(band_count=5, groups=2, iterations=1, scale=2, base_filters=4)
    names = list(param_shapes(cfg))
    assert len(names) == len(set(names)) and names[0] == "embed.0.weight" and names[-1] == "recon.conv2.bias"


# ---------------------------------------------------------------- gradients

def test_small_end_to_end_grad_check():
    cfg = ModelConfig(band_count=4, groups=2, iterations=2, scale=2, base_filters=4)
    P = random_params(cfg, 4, std=0.3)
    names = list(P)
    lr = torch.rand(1, 4, 4, 4, dtype=torch.float64, generator=torch.Generator().manual_seed(0))
    hr = torch.rand(1, 4, 8, 8, dtype=torch.float64, generator=torch.Generator().manual_seed(1))

    def fn(xs):
        return loss(forward(lr, cfg, dict(zip(names, xs))), hr)

    assert grad_check(fn, list(P.values()), samples=60, seed=1, skip_kinks=True) < 1e-3
