import numpy as np
import pytest
from sklearn.exceptions import NotFittedError

from skiplab.autograd import Tensor
from skiplab.nn import AdamW
from skiplab.glyphs import DatasetSpec, ReconSample, probe_samples
from skiplab.nn import apply_rotary
from skiplab.probe import (ABLATION_SETTINGS, FreezeViolation, ProbeConfig, ReconProbeModel,
                           ReconstructionProbe, bottleneck_adapter, build_sequence, calibrate_tau,
                           final_loss, grid_coords, identity_adapter, merge_patches,
                           modality_ablation, parameter_checksum, probe_step, rotary_tables,
                           steps_to_threshold, train_probe)

from . import oracles

SMALL = ProbeConfig(steps=5, batch_size=4)


def _samples(n=8, seed=0):
    return probe_samples(DatasetSpec(seed=seed, count=n))


class TestMerge:
    def test_counts(self):
        assert merge_patches(np.zeros((1, 16, 5)), 4).shape == (1, 4, 20)
        assert merge_patches(np.zeros((2, 64, 8)), 8).shape == (2, 16, 32)

    def test_identical_patches_repeat(self):
        v = np.arange(3.0)
        out = merge_patches(np.tile(v, (1, 16, 1)), 4).data
        np.testing.assert_array_equal(out[0, 2], np.tile(v, 4))

    def test_block_order(self):
        ids = np.arange(16.0).reshape(1, 16, 1)
        out = merge_patches(ids, 4).data[0]
        np.testing.assert_array_equal(out, [[0, 1, 4, 5], [2, 3, 6, 7],
                                            [8, 9, 12, 13], [10, 11, 14, 15]])

    def test_errors(self):
        with pytest.raises(ValueError, match="odd"):
            merge_patches(np.zeros((1, 9, 2)), 3)
        with pytest.raises(ValueError, match="fill"):
            merge_patches(np.zeros((1, 15, 2)), 4)


class TestSequence:
    def test_counts_and_boundaries(self):
        lay = build_sequence(np.zeros((16, 4)), np.array([1, 2, 3]), np.zeros((4, 4)),
                             grid_coords(4, 4), grid_coords(2, 2, 0, 2))
        assert lay.length == 23 and lay.boundaries == (16, 19)
        assert np.isnan(lay.coords[16:19]).all() and not np.isnan(lay.coords[19:]).any()

    def test_empty_text(self):
        lay = build_sequence(np.zeros((16, 4)), np.zeros(0, int), np.zeros((4, 4)),
                             grid_coords(4, 4), grid_coords(2, 2))
        assert lay.segments["text"] == (16, 16) and lay.length == 20

    def test_errors(self):
        with pytest.raises(ValueError, match="empty"):
            build_sequence(np.zeros((4, 4)), [1], np.zeros((0, 4)), grid_coords(2, 2), [])
        with pytest.raises(ValueError, match="coordinates"):
            build_sequence(np.zeros((4, 4)), [1], np.zeros((1, 4)), grid_coords(2, 1),
                           grid_coords(1, 1))


class TestRotary:
    def test_scores_depend_on_offset_only(self):
        rng = np.random.default_rng(0)
        q, k = rng.standard_normal((1, 8)), rng.standard_normal((1, 8))

        def score(pq, pk):
            cq, sq = rotary_tables(np.array([pq]), 8)
            ck, sk = rotary_tables(np.array([pk]), 8)
            a = apply_rotary(Tensor(q), cq, sq).data
            b = apply_rotary(Tensor(k), ck, sk).data
            return float((a @ b.T)[0, 0])

        base = score((1.0, 2.0), (3.0, 0.0))
        assert score((4.0, 7.0), (6.0, 5.0)) == pytest.approx(base, abs=1e-12)
        assert score((1.0, 2.0), (3.0, 1.0)) != pytest.approx(base, abs=1e-6)

    def test_text_rows_zero_phase(self):
        cos, sin = rotary_tables(np.array([[np.nan, np.nan], [0.0, 0.0]]), 8)
        np.testing.assert_array_equal(cos, 1.0)
        np.testing.assert_array_equal(sin, 0.0)

    def test_head_dim(self):
        with pytest.raises(ValueError):
            rotary_tables(np.zeros((1, 2)), 6)


class TestThreshold:
    def test_examples(self):
        assert steps_to_threshold([0.5, 0.4], 0.75) == 0
        assert steps_to_threshold([1.0, 0.9, 0.74, 0.8], 0.75) == 2
        assert steps_to_threshold([1.0, 0.9, 0.8], 0.75) is None
        with pytest.raises(ValueError):
            steps_to_threshold([1.0], 0.0)

    @pytest.mark.parametrize("seed", range(100))
    def test_oracle(self, seed):
        rng = np.random.default_rng(seed)
        series = list(np.abs(rng.standard_normal(int(rng.integers(1, 30)))))
        tau = float(rng.uniform(0.05, 1.0))
        assert steps_to_threshold(series, tau) == oracles.steps_to_threshold_scan(series, tau)

    def test_final_loss_and_tau(self):
        assert final_loss(list(range(30)), 20) == np.mean(range(10, 30))
        assert np.isnan(final_loss([]))
        assert calibrate_tau([4.0] * 8) == 4.0
        assert calibrate_tau(np.arange(100.0, 0.0, -1.0), smooth=1, at=0.25) == 75.0


class TestAdapters:
    def test_ranks_and_nesting(self):
        wide, narrow = bottleneck_adapter(64, 16, seed=3), bottleneck_adapter(64, 4, seed=3)
        assert wide.rank == 16 and narrow.rank == 4 and identity_adapter(64).rank == 64
        w, n = wide.weight.data, narrow.weight.data
        np.testing.assert_allclose(w @ n, n, atol=1e-12)
        np.testing.assert_allclose(n @ n, n, atol=1e-12)

    def test_width_range(self):
        with pytest.raises(ValueError):
            bottleneck_adapter(64, 0)


class TestModel:
    def test_shapes_and_positive_loss(self):
        m = ReconProbeModel(SMALL, "identity", max_text=2)
        data = m.encode(_samples(4))
        assert data.layout.context.shape == (4, 16, 64)
        assert data.layout.target.shape == (4, 8, 64) and data.pixels.shape == (4, 8, 64)
        loss = float(m.loss(data.layout, data.pixels).data)
        assert np.isfinite(loss) and loss > 0

    def test_constant_head_zero_loss(self):
        m = ReconProbeModel(SMALL, "identity", max_text=2)
        base = _samples(2)
        samples = [ReconSample(s.context, np.full_like(s.target, 0.5), s.text_ids, s.target_rect)
                   for s in base]
        data = m.encode(samples)
        m.decoder.pixel_head.weight.data[...] = 0.0
        m.decoder.pixel_head.bias.data[...] = 0.5
        assert float(m.loss(data.layout, data.pixels).data) == 0.0

    def test_pixel_tokens_match_target(self):
        m = ReconProbeModel(SMALL, "identity", max_text=2)
        s = _samples(1)[0]
        data = m.encode([s])
        np.testing.assert_array_equal(data.pixels[0, 0], s.target[:8, :8].reshape(-1))
        np.testing.assert_array_equal(data.pixels[0, 1], s.target[:8, 8:].reshape(-1))

    def test_misaligned_target(self):
        s = _samples(1)[0]
        bad = ReconSample(s.context, s.context[0:12, 0:12], s.text_ids, (0, 0, 12, 12))
        with pytest.raises(ValueError, match="aligned"):
            ReconProbeModel(SMALL, "identity", 2).encode([bad])

    def test_frozen_checksum_unchanged(self):
        cfg = ProbeConfig(steps=100, batch_size=4)
        m = ReconProbeModel(cfg, 4, max_text=2)
        before = parameter_checksum(m.frozen_parameters())
        head = m.decoder.pixel_head.weight.data.copy()
        train_probe(m, m.encode(_samples(8)), cfg)
        assert parameter_checksum(m.frozen_parameters()) == before
        assert not np.array_equal(head, m.decoder.pixel_head.weight.data)

    def test_freeze_violation(self):
        m = ReconProbeModel(SMALL, "identity", 2)
        data = m.encode(_samples(2))
        m.front.encoder.embed.weight.requires_grad = True
        opt = AdamW(m.trainable_parameters(), lr=1e-3)
        with pytest.raises(FreezeViolation):
            probe_step(m, data.layout, data.pixels, SMALL, opt)

    def test_identical_adapters_identical_curves(self):
        samples = _samples(8)
        curves = []
        for _ in range(2):
            m = ReconProbeModel(SMALL, bottleneck_adapter(64, 4, seed=1), 2, decoder_seed=2)
            curves.append(train_probe(m, m.encode(samples), SMALL, seed=3))
        assert curves[0] == curves[1]


class TestEstimator:
    def test_fit_predict_score(self):
        samples = _samples(8)
        est = ReconstructionProbe(adapter=4, steps=5, batch_size=4).fit(samples)
        assert len(est.loss_curve_) == 5 and np.isfinite(est.final_loss_)
        assert est.predict(samples[:3]).shape == (3, 32, 16)
        assert est.score(samples) <= 0.0
        assert est.get_params()["adapter"] == 4

    def test_not_fitted_and_bad_input(self):
        with pytest.raises(NotFittedError):
            ReconstructionProbe().predict(_samples(1))
        with pytest.raises(ValueError):
            ReconstructionProbe(steps=1).fit([np.zeros((32, 32))])


def test_constant_zero_target_all_settings_reach_zero():
    base = _samples(8)
    samples = [ReconSample(s.context, np.zeros_like(s.target), s.text_ids, s.target_rect)
               for s in base]
    rep = modality_ablation(samples, ProbeConfig(steps=120, batch_size=4, lr=1e-2))
    assert [(r["mask_image"], r["text"]) for r in rep["rows"]] == list(ABLATION_SETTINGS)
    for r in rep["rows"]:
        assert r["final_loss"] < 1e-3
