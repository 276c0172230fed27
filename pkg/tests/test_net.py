import math

import numpy as np
import pytest
import torch
from scipy import stats

from maskcodec.gmm import SIGMA_MIN, TAIL_EPS, GmmParams
from maskcodec.layout import layout_from_groups
from maskcodec.layout import build_layout
from maskcodec.net import (CheckpointError, KvCache, MixtureOutput, ModelConfig, grad_check, load_model, m2t_forward,
                           m2t_incremental, m2t_loss, model_from_bytes, model_to_bytes, mt_forward, mt_loss, nll_m2t,
                           nll_mt, random_mt_masks, sample_completion, save_model, train)
from maskcodec.sched import make_schedule
from maskcodec.synthetic import GaussMarkovSource

from conftest import make_model


def rel(a, b):
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    return np.abs(a - b).max() / max(np.abs(b).max(), 1e-12)


def stack(out: MixtureOutput):
    return torch.cat([t.detach() for t in out], dim=-1).numpy()


def tile_batch(rng, B, L, c, spread=4):
    return rng.integers(-spread, spread + 1, (B, L, c))


def test_all_ones_mask_equals_no_mask(tiny_model, rng):
    y = torch.as_tensor(tile_batch(rng, 2, 16, 2), dtype=torch.float32)
    is_mask = torch.as_tensor(rng.random((2, 16)) < 0.5)
    a = tiny_model(y, is_mask, torch.arange(16))
    b = tiny_model(y, is_mask, torch.arange(16), torch.ones(16, 16, dtype=torch.bool))
    np.testing.assert_array_equal(stack(a), stack(b))


def test_cached_two_step_equals_block_masked_pass(tiny_model, rng):
    y = torch.as_tensor(tile_batch(rng, 1, 16, 2), dtype=torch.float32)
    is_mask = torch.zeros(1, 16, dtype=torch.bool)
    pos = torch.as_tensor(rng.permutation(16))
    sizes = [5, 11]
    g = np.repeat([0, 1], sizes)
    full = stack(tiny_model(y, is_mask, pos, torch.as_tensor(g[None, :] <= g[:, None])))
    cache = tiny_model.new_cache()
    first = stack(tiny_model(y[:, :5], is_mask[:, :5], pos[:5], None, cache))
    second = stack(tiny_model(y[:, 5:], is_mask[:, 5:], pos[5:], None, cache))
    assert cache.length == 16
    assert rel(np.concatenate([first, second], axis=1), full) <= 1e-5


def test_incremental_matches_teacher_forced(tiny_model, rng):
    for seed in range(5):
        sch = make_schedule("random", 5, 2.2, 4, seed)
        lay = build_layout(sch)
        y = tile_batch(rng, 3, 16, 2)
        assert rel(stack(m2t_incremental(tiny_model, y, lay)), stack(m2t_forward(tiny_model, y, lay))) <= 1e-5


def test_cache_fork_is_independent(tiny_model, rng):
    y = torch.as_tensor(tile_batch(rng, 1, 16, 2), dtype=torch.float32)
    m = torch.zeros(1, 16, dtype=torch.bool)
    cache = tiny_model.new_cache()
    tiny_model(y[:, :4], m[:, :4], torch.arange(4), None, cache)
    fork = cache.fork()
    tiny_model(y[:, 4:8], m[:, 4:8], torch.arange(4, 8), None, fork)
    assert cache.length == 4 and fork.length == 8
    assert cache.keys[0].shape[2] == 4 and fork.keys[0].shape[2] == 8


def test_forward_errors(tiny_model):
    y = torch.zeros(1, 16, 2)
    m = torch.zeros(1, 16, dtype=torch.bool)
    with pytest.raises(ValueError, match="attention mask"):
        tiny_model(y, m, torch.arange(16), torch.ones(15, 16, dtype=torch.bool))
    with pytest.raises(ValueError, match="layers"):
        tiny_model(y, m, torch.arange(16), None, KvCache(5))
    with pytest.raises(ValueError):
        ModelConfig(width=10, heads=4)


def test_block_causality(tiny_model, rng):
    sch = make_schedule("qlds", 6, 2.2, 4)
    lay = build_layout(sch)
    y = tile_batch(rng, 1, 16, 2)
    base = stack(m2t_forward(tiny_model, y, lay))
    g_out = lay.group_of_slot
    for j in range(1, 6):
        # tokens fed in input group j are the cells of group j - 1
        y2 = y.copy()
        y2[0, sch.groups[j - 1]] += rng.integers(1, 20, (len(sch.groups[j - 1]), 2))
        out = stack(m2t_forward(tiny_model, y2, lay))
        early = g_out < j
        assert rel(out[0, early], base[0, early]) <= 1e-6
        assert rel(out[0, ~early], base[0, ~early]) > 1e-6


def test_mt_all_masked_equals_single_group_m2t(tiny_model, rng):
    sch = make_schedule("random", 1, 2.2, 4, seed=3)
    lay = build_layout(sch)
    y = tile_batch(rng, 2, 16, 2)
    mt = stack(mt_forward(tiny_model, y, np.ones((2, 16), dtype=bool)))
    m2 = stack(m2t_forward(tiny_model, y, lay))
    assert rel(m2, mt[:, lay.target_perm]) <= 1e-6


def test_full_ar_is_next_token_run(tiny_model, rng):
    n = 16
    lay = layout_from_groups([[i] for i in range(n)])
    y = tile_batch(rng, 1, n, 2)
    vals = np.concatenate([np.zeros((1, 1, 2)), y[:, :-1]], axis=1)
    is_mask = np.zeros((1, n), dtype=bool)
    is_mask[0, 0] = True
    pos = np.concatenate([[0], np.arange(n - 1)])
    ref = stack(tiny_model(vals, is_mask, pos, torch.tril(torch.ones(n, n, dtype=torch.bool))))
    assert rel(stack(m2t_forward(tiny_model, y, lay)), ref) <= 1e-6
    assert rel(stack(m2t_incremental(tiny_model, y, lay)), ref) <= 1e-5


def test_permutation_equivariance(tiny_model, rng):
    y = torch.as_tensor(tile_batch(rng, 1, 16, 2), dtype=torch.float32)
    m = torch.as_tensor(rng.random((1, 16)) < 0.4)
    perm = torch.as_tensor(rng.permutation(16))
    a = stack(tiny_model(y, m, torch.arange(16)))
    b = stack(tiny_model(y[:, perm], m[:, perm], perm))
    assert rel(b, a[:, perm.numpy()]) <= 1e-5


def test_embedding_identities(tiny_model):
    L, c = 16, 2
    delta = tiny_model.cfg.delta
    pos = torch.arange(L)
    with torch.no_grad():
        x = tiny_model.embed_tokens(torch.randn(1, L, c), torch.ones(1, L, dtype=torch.bool), pos)
        torch.testing.assert_close(x[0], tiny_model.mask_token + tiny_model.pos)
        x = tiny_model.embed_tokens(torch.zeros(1, L, c), torch.zeros(1, L, dtype=torch.bool), pos)
        torch.testing.assert_close(x[0], tiny_model.embed.bias + tiny_model.pos)
        v = torch.randn(1, L, c)
        direct = tiny_model.embed(v) + tiny_model.pos
        torch.testing.assert_close(tiny_model.embed_tokens(v * delta, torch.zeros(1, L, dtype=torch.bool), pos), direct)


def _params(means, scales, weights):
    return GmmParams(np.asarray(means, float), np.asarray(scales, float), np.asarray(weights, float))


def test_nll_deterministic_pmf():
    y = np.array([[3, -1], [0, 2]])
    p = _params(np.stack([y, y, y], -1), np.full((2, 2, 3), SIGMA_MIN), np.full((2, 2, 3), 1 / 3))
    lap0 = 1 - math.exp(-0.5)
    per = -math.log2(1 - TAIL_EPS * (1 - lap0))
    assert nll_mt(y, [True, True], p) == pytest.approx(4 * per, rel=1e-9)
    assert nll_mt(y, [True, True], p) < 0.01


def test_nll_two_symbol_uniform():
    # two spikes at 0 and 1 with equal weight: one bit per channel up to the tail blend
    y = np.array([[0], [1], [1]])
    p = _params(np.tile([0.0, 1.0, 0.0], (3, 1, 1)), np.full((3, 1, 3), SIGMA_MIN), np.tile([0.5, 0.5, 0.0], (3, 1, 1)))
    assert nll_mt(y, [True, True, False], p) == pytest.approx(2.0, abs=0.01)


def test_nll_random_params_loop_oracle(rng):
    L, c, K = 6, 2, 3
    m = rng.normal(0, 2, (L, c, K))
    s = rng.uniform(0.2, 3, (L, c, K))
    w = rng.dirichlet(np.ones(K), (L, c))
    y = rng.integers(-4, 5, (L, c))
    mask = rng.random(L) < 0.5
    mask[0] = True
    total = 0.0
    for i in range(L):
        if not mask[i]:
            continue
        for ch in range(c):
            g = sum(w[i, ch, k] * (stats.norm.cdf(y[i, ch] + 0.5, m[i, ch, k], s[i, ch, k])
                                   - stats.norm.cdf(y[i, ch] - 0.5, m[i, ch, k], s[i, ch, k])) for k in range(K))
            mu = float((w[i, ch] * m[i, ch]).sum())
            lap = stats.laplace.cdf(y[i, ch] + 0.5, mu) - stats.laplace.cdf(y[i, ch] - 0.5, mu)
            total += -math.log2((1 - TAIL_EPS) * g + TAIL_EPS * lap)
    assert nll_mt(y, mask, _params(m, s, w)) == pytest.approx(total, rel=1e-9)
    torch_val = nll_mt(torch.as_tensor(y, dtype=torch.float64), torch.as_tensor(mask),
                       MixtureOutput(*(torch.as_tensor(a) for a in (m, s, w))))
    assert float(torch_val) == pytest.approx(total, rel=1e-9)
    # same params read in target order by the M2T variant
    lay = layout_from_groups([[0, 1], [2, 3], [4, 5]])
    perm = lay.target_perm
    assert nll_m2t(y, lay, _params(m, s, w)) == pytest.approx(nll_mt(y[perm], np.ones(L, bool), _params(m, s, w)))


def _tiny(seed=0):
    return make_model(c=2, w_T=4, layers=1, width=8, heads=2, mlp_hidden=16, seed=seed)


def _losses(rng):
    y = torch.as_tensor(tile_batch(rng, 2, 16, 2), dtype=torch.float64)
    u = torch.rand(y.shape, dtype=torch.float64, generator=torch.Generator().manual_seed(1)) - 0.5
    mask = torch.as_tensor(random_mt_masks(2, 16, rng))
    lay = build_layout(make_schedule("qlds", 4, 2.2, 4))
    return (lambda m: mt_loss(m, y, mask, u) / mask.sum(), lambda m: m2t_loss(m, y, lay, u) / 32)


def test_grad_check_both_losses(rng):
    mt, m2 = _losses(rng)
    assert grad_check(_tiny(), mt, 1e-4, 50) < 1e-3
    assert grad_check(_tiny(), m2, 1e-4, 50) < 1e-3


def test_zero_loss_region_gradients_finite():
    model = _tiny().double()
    with torch.no_grad():
        model.head.weight.zero_()
        bias = model.head.bias.view(2, 3, 3)
        bias[:, 0] = 2.0
        bias[:, 1] = -40.0  # softplus underflows: sigma sits on its floor
    y = torch.full((1, 16, 2), 2.0, dtype=torch.float64)
    loss = mt_loss(model, y, torch.ones(1, 16, dtype=torch.bool))
    loss.backward()
    assert loss.item() < 0.05
    assert all(torch.isfinite(p.grad).all() for p in model.parameters())


def test_loss_scale_is_linear_in_gradients(rng):
    mt, _ = _losses(rng)
    model = _tiny().double()
    mt(model).backward()
    g1 = [p.grad.clone() for p in model.parameters()]
    model.zero_grad()
    (2 * mt(model)).backward()
    for a, b in zip(g1, (p.grad for p in model.parameters())):
        torch.testing.assert_close(b, 2 * a)


def test_training_reduces_loss():
    src = GaussMarkovSource(c=2, w_T=4)
    for mode in ("mt", "m2t"):
        model = _tiny()
        lay = build_layout(make_schedule("qlds", 4, 2.2, 4)) if mode == "m2t" else None
        rep = train(model, src, 150, 3e-3, mode, 16, lay, seed=0)
        assert rep.last < rep.first
        assert all(np.isfinite(rep.losses))


def test_training_divergence_is_reported():
    class Bad:
        def sample(self, n, rng):
            return np.full((n, 4, 4, 2), np.nan)

    with pytest.raises(FloatingPointError):
        train(_tiny(), Bad(), 3)
    with pytest.raises(ValueError):
        train(_tiny(), Bad(), 3, mode="m2t")


def test_mt_mask_ratio_range(rng):
    m = random_mt_masks(2000, 100, rng)
    frac = m.mean(1)
    assert frac.min() >= 0.05 - 1e-9 and frac.max() <= 0.99 + 1e-9
    assert abs(frac.mean() - 0.52) < 0.02


def test_sample_completion_keeps_known(tiny_model, rng):
    y = tile_batch(rng, 1, 16, 2)[0]
    known = rng.random(16) < 0.5
    out = sample_completion(tiny_model, y, known, rng, (-4, 4))
    np.testing.assert_array_equal(out[known], y[known])
    assert out.min() >= -4 and out.max() <= 4


def test_checkpoint_round_trip(tmp_path, tiny_model, rng):
    tiny_model.meta = {"path": "m2t", "S": 8}
    save_model(tiny_model, tmp_path / "m.ckpt")
    back = load_model(tmp_path / "m.ckpt")
    assert back.cfg == tiny_model.cfg and back.meta == tiny_model.meta
    y = tile_batch(rng, 1, 16, 2)
    m = np.ones((1, 16), dtype=bool)
    np.testing.assert_array_equal(stack(mt_forward(back, y, m)), stack(mt_forward(tiny_model, y, m)))


def test_checkpoint_errors(tiny_model):
    data = model_to_bytes(tiny_model)
    for bad in (b"XXXX" + data[4:], data[:-3], data + b"\0", data[:20]):
        with pytest.raises(CheckpointError):
            model_from_bytes(bad)
