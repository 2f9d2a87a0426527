import numpy as np
import pytest

from splitgrad import encoders, memtrace, trainer
from splitgrad import loss as loss_mod
from splitgrad.autodiff import flat_max_rel_err
from splitgrad.loss import Batch, direct_param_grads
from splitgrad.trainer import (
    CacheNotFilledError,
    TrainConfig,
    plan_subbatches,
    step1_graphless_forward,
    step2_build_cache,
    step3_accumulate,
    train_step_accumulation,
    train_step_cached,
    train_step_direct,
)


def _setup(seed=0, n_s=24, n_t=30, din=10, d=8):
    rng = np.random.default_rng(seed)
    batch = Batch(rng.normal(size=(n_s, din)), rng.normal(size=(n_t, din)),
                  rng.integers(0, n_t, size=n_s))
    pf = encoders.init_params(seed + 1, [din, 12, d])
    pg = encoders.init_params(seed + 2, [din, 12, d])
    return batch, pf, pg


def test_plan_covers_every_row_once():
    plan = plan_subbatches(10, 7, 4, 3)
    assert plan.anchor_chunks == [(0, 4), (4, 8), (8, 10)]
    assert plan.target_chunks == [(0, 3), (3, 6), (6, 7)]


def test_plan_rejects_nonpositive_sizes():
    with pytest.raises(ValueError):
        plan_subbatches(4, 4, 0, 2)
    with pytest.raises(ValueError):
        plan_subbatches(4, 4, 2, -1)


def test_step1_output_independent_of_chunking():
    batch, pf, pg = _setup()
    ref_F, ref_G = step1_graphless_forward(
        batch, pf, pg, plan_subbatches(24, 30, 24, 30))
    for bs in (1, 5, 8, 13):
        F, G = step1_graphless_forward(
            batch, pf, pg, plan_subbatches(24, 30, bs, bs))
        assert np.array_equal(F, ref_F)
        assert np.array_equal(G, ref_G)


def test_step2_loss_equals_reference_loss_bitwise():
    batch, pf, pg = _setup()
    plan = plan_subbatches(24, 30, 8, 8)
    F, G = step1_graphless_forward(batch, pf, pg, plan)
    for tau in (1.0, 0.25, 0.05):
        cache, loss_value = step2_build_cache(F, G, batch.r, tau)
        ref = loss_mod.contrastive_loss(F, G, batch.r, tau)
        assert loss_value == ref.loss
        assert cache.filled
        assert cache.float_count == (24 + 30) * 8


def test_step2_cache_matches_analytic_gradients():
    batch, pf, pg = _setup()
    plan = plan_subbatches(24, 30, 8, 8)
    F, G = step1_graphless_forward(batch, pf, pg, plan)
    cache, _ = step2_build_cache(F, G, batch.r, 0.5)
    got = loss_mod.analytic_rep_grads(F, G, batch.r, 0.5)
    assert flat_max_rel_err([cache.u_rows, cache.v_rows],
                            [got.u, got.v]) < 1e-12


def test_single_chunk_step3_reproduces_direct_bitwise():
    batch, pf, pg = _setup()
    gf, gg, _ = direct_param_grads(batch, pf, pg, 0.7)
    plan = plan_subbatches(24, 30, 24, 30)
    F, G = step1_graphless_forward(batch, pf, pg, plan)
    cache, _ = step2_build_cache(F, G, batch.r, 0.7)
    cgf, cgg = step3_accumulate(batch, pf, pg, plan, cache)
    for a, b in zip(gf + gg, cgf + cgg):
        assert np.array_equal(a, b)


def test_sub_batch_sweep_matches_direct():
    batch, pf, pg = _setup()
    gf, gg, _ = direct_param_grads(batch, pf, pg, 0.7)
    for bs_s, bs_t in [(1, 1), (3, 5), (7, 9), (8, 8), (24, 1), (1, 30)]:
        plan = plan_subbatches(24, 30, bs_s, bs_t)
        F, G = step1_graphless_forward(batch, pf, pg, plan)
        cache, _ = step2_build_cache(F, G, batch.r, 0.7)
        cgf, cgg = step3_accumulate(batch, pf, pg, plan, cache)
        assert flat_max_rel_err(gf + gg, cgf + cgg) < 1e-9


def test_chunk_order_does_not_change_gradients_materially():
    batch, pf, pg = _setup()
    plan = plan_subbatches(24, 30, 7, 9)
    F, G = step1_graphless_forward(batch, pf, pg, plan)
    cache, _ = step2_build_cache(F, G, batch.r, 1.0)
    fwd = step3_accumulate(batch, pf, pg, plan, cache)
    cache2, _ = step2_build_cache(F, G, batch.r, 1.0)
    rev = {"anchors": list(range(4))[::-1], "targets": list(range(4))[::-1]}
    bwd = step3_accumulate(batch, pf, pg, plan, cache2, order=rev)
    assert flat_max_rel_err(fwd[0] + fwd[1], bwd[0] + bwd[1]) < 1e-12


def test_cache_is_single_use():
    batch, pf, pg = _setup()
    plan = plan_subbatches(24, 30, 8, 8)
    F, G = step1_graphless_forward(batch, pf, pg, plan)
    cache, _ = step2_build_cache(F, G, batch.r, 1.0)
    step3_accumulate(batch, pf, pg, plan, cache)
    with pytest.raises(CacheNotFilledError, match="consumed"):
        step3_accumulate(batch, pf, pg, plan, cache)


def test_unfilled_cache_rejected():
    batch, pf, pg = _setup()
    plan = plan_subbatches(24, 30, 8, 8)
    empty = trainer.RepresentationGradientCache(
        u_rows=np.zeros((24, 8)), v_rows=np.zeros((30, 8))
    )
    with pytest.raises(CacheNotFilledError):
        step3_accumulate(batch, pf, pg, plan, empty)


# ---------------------------------------------------------------------------
# full steps
# ---------------------------------------------------------------------------

def test_cached_step_matches_direct_step():
    batch, pf, pg = _setup()
    opt = encoders.init_optimizer("sgd", 1e-3)
    ref = train_step_direct(batch, pf, pg, opt, 0.7)
    res = train_step_cached(batch, pf, pg, opt, TrainConfig(0.7, 8, 8))
    assert res.loss == ref.loss
    assert flat_max_rel_err(
        encoders.param_arrays(ref.params_f) + encoders.param_arrays(ref.params_g),
        encoders.param_arrays(res.params_f) + encoders.param_arrays(res.params_g),
    ) < 1e-9


def test_cached_step_with_tied_encoders():
    rng = np.random.default_rng(4)
    p = encoders.init_params(5, [6, 8, 4])
    batch = Batch(rng.normal(size=(10, 6)), rng.normal(size=(10, 6)),
                  np.arange(10))
    opt = encoders.init_optimizer("sgd", 1e-3)
    ref = train_step_direct(batch, p, p, opt, 1.0)
    res = train_step_cached(batch, p, p, opt, TrainConfig(1.0, 4, 4))
    assert res.params_f is res.params_g
    assert flat_max_rel_err(
        encoders.param_arrays(ref.params_f),
        encoders.param_arrays(res.params_f)) < 1e-9


def test_step_counters_cache_vs_direct():
    batch, pf, pg = _setup()
    opt = encoders.init_optimizer("sgd", 1e-3)
    n = batch.n_anchors + batch.n_targets
    res_c = train_step_cached(batch, pf, pg, opt, TrainConfig(1.0, 8, 8))
    assert res_c.stats.fwd_rows == 2 * n
    assert res_c.stats.bwd_rows == n
    res_d = train_step_direct(batch, pf, pg, opt, 1.0)
    assert res_d.stats.fwd_rows == n
    assert res_d.stats.bwd_rows == n


def test_cache_floats_reported_exactly():
    batch, pf, pg = _setup()
    opt = encoders.init_optimizer("sgd", 1e-3)
    meter = memtrace.MemCounter()
    with meter.activate():
        res = train_step_cached(batch, pf, pg, opt, TrainConfig(1.0, 8, 8))
    assert res.stats.cache_floats == (24 + 30) * 8


def test_activation_peak_independent_of_batch_size():
    """Same encoder and sub-batch size, growing batches: equal peaks."""
    peaks = []
    for n in (32, 64, 128):
        rng = np.random.default_rng(6)
        batch = Batch(rng.normal(size=(n, 10)), rng.normal(size=(n, 10)),
                      np.arange(n))
        pf = encoders.init_params(1, [10, 12, 8])
        pg = encoders.init_params(2, [10, 12, 8])
        opt = encoders.init_optimizer("sgd", 1e-3)
        meter = memtrace.MemCounter()
        with meter.activate():
            res = train_step_cached(batch, pf, pg, opt, TrainConfig(1.0, 8, 8))
        peaks.append(res.stats.act_peak)
        assert res.stats.loss_phase_peak > 0
    assert peaks[0] == peaks[1] == peaks[2]


# ---------------------------------------------------------------------------
# gradient accumulation baseline
# ---------------------------------------------------------------------------

def test_accumulation_differs_from_direct_on_random_batch():
    rng = np.random.default_rng(7)
    batch = Batch(rng.normal(size=(32, 10)), rng.normal(size=(32, 10)),
                  np.arange(32))
    pf = encoders.init_params(1, [10, 12, 8])
    pg = encoders.init_params(2, [10, 12, 8])
    gf, gg, _ = direct_param_grads(batch, pf, pg, 1.0)
    opt = encoders.init_optimizer("sgd", 1.0)
    res = train_step_accumulation(batch, pf, pg, opt, 8, 1.0)
    # recover summed chunk gradients from the unit-lr sgd update
    acc = [p - q for p, q in zip(
        encoders.param_arrays(pf) + encoders.param_arrays(pg),
        encoders.param_arrays(res.params_f) + encoders.param_arrays(res.params_g))]
    assert flat_max_rel_err(gf + gg, acc) > 1e-3


def test_accumulation_with_full_chunk_is_direct_bitwise():
    batch, pf, pg = _setup(n_s=16, n_t=16)
    batch = Batch(batch.anchors, batch.targets, np.arange(16))
    opt = encoders.init_optimizer("adam", 1e-3)
    a = train_step_accumulation(batch, pf, pg, opt, 16, 1.0)
    b = train_step_direct(batch, pf, pg, opt, 1.0)
    assert a.loss == b.loss
    for x, y in zip(encoders.param_arrays(a.params_f),
                    encoders.param_arrays(b.params_f)):
        assert np.array_equal(x, y)


def test_accumulation_loss_is_mean_of_chunk_losses():
    rng = np.random.default_rng(8)
    batch = Batch(rng.normal(size=(12, 6)), rng.normal(size=(12, 6)),
                  np.arange(12))
    pf = encoders.init_params(1, [6, 5, 4])
    pg = encoders.init_params(2, [6, 5, 4])
    opt = encoders.init_optimizer("sgd", 1e-3)
    res = train_step_accumulation(batch, pf, pg, opt, 4, 1.0)
    chunk_losses = []
    for lo in (0, 4, 8):
        sub = Batch(batch.anchors[lo:lo + 4], batch.targets[lo:lo + 4],
                    np.arange(4))
        chunk_losses.append(loss_mod.contrastive_loss(
            encoders.encode(pf, sub.anchors),
            encoders.encode(pg, sub.targets), sub.r, 1.0).loss)
    assert res.loss == float(np.mean(chunk_losses))


def test_accumulation_rejects_positive_outside_chunk():
    rng = np.random.default_rng(9)
    batch = Batch(rng.normal(size=(8, 4)), rng.normal(size=(8, 4)),
                  np.full(8, 7))
    pf = encoders.init_params(1, [4, 3])
    pg = encoders.init_params(2, [4, 3])
    opt = encoders.init_optimizer("sgd", 1e-3)
    with pytest.raises(ValueError, match="outside its target range"):
        train_step_accumulation(batch, pf, pg, opt, 4, 1.0)
