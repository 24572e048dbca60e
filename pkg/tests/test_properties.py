"""Property-based checks of the library's invariants."""

import json

import numpy as np
from hypothesis import assume, given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from skiplab import autograd as ag
from skiplab.autograd import GradTape, Rng, Tensor
from skiplab.fusion import FusionConfig, FusionNet, cls_attention_grid, select_skip_layers
from skiplab.glyphs import ALPHABET, DatasetSpec, downstream_task_batch, render_glyphs
from skiplab.pathwise import (decompose, moving_average, snr, transition_step, variance_trace)
from skiplab.probe import build_sequence, grid_coords, merge_patches, rotary_tables, steps_to_threshold
from skiplab.runlab.emit import dumps_record
from skiplab.theory import GaussianTriplet, bayes_gap_monte_carlo

from . import oracles

finite = st.floats(-100, 100, allow_nan=False, allow_infinity=False)
seeds = st.integers(0, 2**32 - 1)


def windows(max_k=10, max_d=5):
    return st.integers(1, max_k).flatmap(lambda k: st.integers(1, max_d).flatmap(
        lambda d: arrays(np.float64, (k, d), elements=finite)))


# --- autograd ------------------------------------------------------------

@given(arrays(np.float64, st.tuples(st.integers(1, 4), st.integers(1, 4)), elements=finite))
def test_stop_gradient_forward_identity_and_zero_backward(x):
    t = Tensor(x, requires_grad=True)
    with GradTape() as tape:
        y = ag.stop_gradient(t)
        loss = ag.tsum(y * y)
    assert y.data.tobytes() == x.tobytes()
    g = tape.backward(loss).get(t.uid)
    assert g is None or not np.any(g)


@given(seeds, st.integers(0, 50), st.integers(1, 20))
def test_rng_restore_replays_draws(seed, skip, n):
    rng = Rng(seed)
    rng.uniform((skip,))
    state = rng.save()
    a = rng.normal((n,))
    rng.restore(state)
    assert rng.normal((n,)).tobytes() == a.tobytes()


# --- fusion --------------------------------------------------------------

@st.composite
def stride_configs(draw):
    K = draw(st.integers(1, 30))
    S = draw(st.integers(1, K))
    D = draw(st.integers(0, K // S))
    return K, S, D


@given(stride_configs())
def test_skip_layer_partition(ksd):
    K, S, D = ksd
    detached, live = select_skip_layers(FusionConfig(total_blocks=K, stride=S, detach_count=D,
                                                     hidden_dim=8, num_heads=2))
    assert detached + live == list(range(S, K + 1, S))
    assert len(detached) == D and all(a < b for a in detached for b in live)


@given(seeds, st.integers(0, 3))
def test_forward_invariance_under_D(seed, d):
    cfg = FusionConfig(total_blocks=3, stride=1, hidden_dim=8, skip_scale=2.0)
    X, _ = downstream_task_batch(DatasetSpec(seed=seed % 1000), 1)
    a = FusionNet(cfg, 5, Rng(seed)).logits(X, training=False).data
    b = FusionNet(cfg.replace(detach_count=d), 5, Rng(seed)).logits(X, training=False).data
    assert a.tobytes() == b.tobytes()


@given(arrays(np.float64, (2, 5, 5), elements=st.floats(0, 1)))
def test_attention_grid_in_unit_interval(probs):
    grid = cls_attention_grid(probs, (2, 2))
    assert grid.min() >= 0.0 and grid.max() <= 1.0


# --- pathwise ------------------------------------------------------------

@given(seeds)
def test_decomposition_identity_and_rerun(seed):
    cfg = FusionConfig(total_blocks=2, stride=1, hidden_dim=8)
    m = FusionNet(cfg, 5, Rng(seed))
    batch = downstream_task_batch(DatasetSpec(seed=seed % 97), 2)
    batch = (batch[0], np.minimum(batch[1], 4))
    a = decompose(m, batch, "block1", None)
    b = decompose(m, batch, "block1", None)
    assert a.g_main.tobytes() == b.g_main.tobytes()
    scale = np.abs(a.g_full).max() + np.abs(a.g_main).max()
    assert np.all(np.abs(a.g_main + a.g_skip - a.g_full) <= 4 * np.finfo(float).eps * scale)


@given(windows())
def test_variance_trace_centered_form(w):
    assert abs(variance_trace(list(w)) - oracles.variance_trace_centered(w)) < 1e-9


@given(windows())
def test_snr_in_unit_interval(w):
    assert 0.0 <= snr(list(w)) <= 1.0


@given(arrays(np.float64, (4, 3), elements=finite), arrays(np.float64, (4, 3), elements=finite))
def test_detached_snr_dominates_under_zero_mean_uncorrelated_skip(m, v):
    # paired window {(m_j, +v_j), (m_j, -v_j)}: zero skip mean and zero cross-covariance
    assume(np.any(v))
    main = np.concatenate([m, m])
    skip = np.concatenate([v, -v])
    assert snr(list(main)) >= snr(list(main + skip)) - 1e-12


@given(st.lists(st.floats(0.01, 5.0), min_size=1, max_size=40), st.integers(1, 6),
       st.integers(1, 4))
def test_transition_matches_scan(series, window, c):
    assume(len(series) >= window)
    assert transition_step(series, window, c).t_trans == oracles.t_trans_scan(series, window, c)


@given(st.lists(finite, min_size=1, max_size=30), st.integers(1, 10))
def test_moving_average_of_constant(series, h):
    c = float(series[0])
    np.testing.assert_allclose(moving_average([c] * len(series), h), c, rtol=1e-12, atol=1e-12)


# --- theory --------------------------------------------------------------

@given(st.floats(-2, 2), st.floats(-2, 2), st.floats(-0.9, 0.9), st.integers(0, 1000))
def test_bayes_gap_nonnegative_within_noise(alpha, beta, corr, seed):
    est = bayes_gap_monte_carlo(GaussianTriplet(alpha, beta, 1.0, corr), 20_000, seed)
    assert est.risk_difference >= -3 * est.risk_difference_se - 1e-12


# --- probe ---------------------------------------------------------------

@given(st.integers(1, 4), st.integers(1, 4), st.integers(1, 6))
def test_merge_is_a_permutation_of_patch_features(r, c, d):
    rows, cols = 2 * r, 2 * c
    x = np.arange(rows * cols * d, dtype=np.float64).reshape(1, rows * cols, d)
    out = merge_patches(x, (rows, cols)).data
    assert sorted(out.reshape(-1)) == sorted(x.reshape(-1))


@given(st.integers(1, 20), st.integers(0, 8))
def test_target_phase_independent_of_sequence_position(nc, nl):
    tgt = grid_coords(2, 2, 0, 2)
    lay = build_sequence(np.zeros((nc, 4)), np.zeros(nl, int), np.zeros((4, 4)),
                         np.zeros((nc, 2)), tgt)
    s, e = lay.segments["target_img"]
    cos, sin = rotary_tables(lay.coords, 8)
    ref_cos, ref_sin = rotary_tables(tgt, 8)
    assert cos[s:e].tobytes() == ref_cos.tobytes() and sin[s:e].tobytes() == ref_sin.tobytes()


@given(st.lists(st.floats(0, 3), min_size=0, max_size=40), st.floats(0.01, 3))
def test_steps_to_threshold_matches_scan(series, tau):
    assert steps_to_threshold(series, tau) == oracles.steps_to_threshold_scan(series, tau)


# --- glyphs and emit -------------------------------------------------------

@given(st.text(alphabet=ALPHABET, max_size=8), seeds, st.floats(0, 1))
def test_render_deterministic_and_bounded(text, seed, noise):
    a = render_glyphs(text, seed=seed, noise=noise)
    assert a.pixels.tobytes() == render_glyphs(text, seed=seed, noise=noise).pixels.tobytes()
    assert a.pixels.min() >= 0.0 and a.pixels.max() <= 1.0


@given(st.floats(allow_nan=False, allow_infinity=False))
def test_float_serialisation_roundtrip(v):
    assert json.loads(dumps_record({"v": v}))["v"] == v
