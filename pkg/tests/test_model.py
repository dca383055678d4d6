import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from rastervec import diffnum as dn
from rastervec.geometry import circle_path
from rastervec.model import (
    ComplexityCurve,
    ModelConfig,
    VectorVAE,
    discard_degenerate,
    select_segment_count,
)
from rastervec.raster import RasterConfig, VectorGraphic, pyramid_loss, render_graphic

from helpers import model_fd_check, scan_segment_count


def tiny_config(**kw):
    base = dict(
        resolution=16,
        latent=6,
        path_latent=5,
        encoder_filters=(4, 6),
        decoder_chain=(8, 10, 2),
        deformation_chain=(8, 6, 1),
        auxiliary_chain=(5, 8, 8, 8, 3),
        lstm_hidden=7,
        max_paths=2,
        k_min=2,
        k_max=6,
        color_mode="learned",
    )
    base.update(kw)
    return ModelConfig(**base)


def zeroed(model):
    for p in model.params.values():
        p.values[...] = 0.0
    return model


class TestConfig:
    def test_full_size_defaults_are_consistent(self):
        cfg = ModelConfig()
        assert cfg.encoder_spatial == 2
        assert cfg.decoder_chain[0] == cfg.path_latent + 3 == 170

    def test_rejects_inconsistent_chains(self):
        with pytest.raises(ValueError):
            tiny_config(decoder_chain=(9, 10, 2))
        with pytest.raises(ValueError):
            tiny_config(auxiliary_chain=(5, 8, 4))
        with pytest.raises(ValueError):
            tiny_config(color_mode="rainbow")

    def test_rejects_too_deep_encoder(self):
        with pytest.raises(ValueError):
            tiny_config(resolution=8, encoder_filters=(4, 4, 4, 4))


class TestEncode:
    def test_paper_scale_shapes(self):
        cfg = ModelConfig()
        model = VectorVAE(cfg, seed=0)
        code = model.encode(np.random.default_rng(0).uniform(size=(64, 64, 3)))
        assert code.mu.shape == (128,)
        assert code.logvar.shape == (128,)
        # flatten width after the 32->16->8->4->2 chain
        assert model.params["enc.mu.w"].shape == (512 * 4, 128)

    def test_zero_params_give_biases(self):
        model = zeroed(VectorVAE(tiny_config(), seed=1))
        model.params["enc.mu.b"].values[...] = 0.25
        model.params["enc.logvar.b"].values[...] = -1.5
        code = model.encode(np.random.default_rng(1).uniform(size=(16, 16, 3)))
        assert np.allclose(np.asarray(code.mu), 0.25)
        assert np.allclose(np.asarray(code.logvar), -1.5)

    def test_rejects_wrong_resolution(self):
        model = VectorVAE(tiny_config(), seed=0)
        with pytest.raises(ValueError):
            model.encode(np.zeros((8, 8, 3)))

    def test_gradients_match_finite_differences(self):
        model = VectorVAE(tiny_config(), seed=2)
        image = np.random.default_rng(3).uniform(size=(16, 16, 3))
        w = np.random.default_rng(4).normal(size=12)

        def loss_fn():
            code = model.encode(image)
            both = dn.concat([code.mu, code.logvar], axis=0)
            return dn.sum_all(both * dn.constant(w))

        names = [n for n in model.params if n.startswith("enc.")]
        model_fd_check(model, loss_fn, names, sample=6, rng=np.random.default_rng(5))


class TestReparameterize:
    def test_zero_noise_returns_mu(self):
        mu = dn.constant(np.array([0.3, -1.2]))
        logvar = dn.constant(np.array([0.7, 0.1]))
        z = VectorVAE.reparameterize(
            type("C", (), {"mu": mu, "logvar": logvar})(), np.zeros(2)
        )
        assert np.allclose(np.asarray(z), [0.3, -1.2])

    def test_unit_variance_shifts_by_noise(self):
        mu = dn.constant(np.array([1.0, 2.0]))
        logvar = dn.constant(np.zeros(2))
        code = type("C", (), {"mu": mu, "logvar": logvar})()
        z = VectorVAE.reparameterize(code, np.array([0.5, -0.5]))
        assert np.allclose(np.asarray(z), [1.5, 1.5])

    def test_monte_carlo_statistics(self):
        mu = np.array([0.5, -1.0, 2.0, 0.25])
        logvar = np.array([0.0, 0.6, -0.8, 0.2])
        code = type("C", (), {"mu": dn.constant(mu), "logvar": dn.constant(logvar)})()
        rng = np.random.default_rng(6)
        draws = np.stack(
            [
                np.asarray(VectorVAE.reparameterize(code, rng.standard_normal(4)))
                for _ in range(100_000)
            ]
        )
        assert np.max(np.abs(draws.mean(axis=0) - mu)) < 0.02
        assert np.max(np.abs(draws.var(axis=0) / np.exp(logvar) - 1.0)) < 0.02


class TestUnrollPaths:
    def test_single_step_shapes(self):
        model = VectorVAE(tiny_config(), seed=3)
        (pl,) = model.unroll_paths(np.zeros(6), 1)
        assert pl.z_t.shape == (5,)
        assert pl.depth.shape == ()
        assert pl.color.shape == (3,)

    def test_zero_params_give_head_bias(self):
        model = zeroed(VectorVAE(tiny_config(), seed=4))
        model.params["rnn.head.b"].values[...] = 0.125
        paths = model.unroll_paths(np.ones(6), 2)
        for pl in paths:
            assert np.allclose(np.asarray(pl.z_t), 0.125)
            assert float(np.asarray(pl.depth)) == pytest.approx(0.125)

    def test_default_depths_distinct(self):
        model = VectorVAE(tiny_config(), seed=5)
        depths = [float(np.asarray(pl.depth)) for pl in model.unroll_paths(np.zeros(6), 2)]
        assert abs(depths[0] - depths[1]) > 0.01

    def test_gradients_t3(self):
        model = VectorVAE(tiny_config(max_paths=3), seed=6)
        z = np.random.default_rng(7).normal(size=6)
        w = np.random.default_rng(8).normal(size=(3, 5))

        def loss_fn():
            paths = model.unroll_paths(dn.constant(z), 3)
            total = None
            for i, pl in enumerate(paths):
                term = dn.sum_all(pl.z_t * dn.constant(w[i])) + pl.depth * float(i - 1)
                total = term if total is None else total + term
            return total

        names = [n for n in model.params if n.startswith("rnn.")]
        model_fd_check(
            model, loss_fn, names, sample=5, rng=np.random.default_rng(9), rtol=1e-5, atol=1e-8
        )


class TestDeformSamples:
    def test_zero_final_layer_gives_uniform(self):
        model = VectorVAE(tiny_config(), seed=10)
        last = len(model.cfg.deformation_chain) - 2
        model.params[f"deform.conv{last}.w"].values[...] = 0.0
        model.params[f"deform.conv{last}.b"].values[...] = 0.0
        offsets = model.deform_samples(dn.constant(np.ones(5)), 4)
        assert np.allclose(np.asarray(offsets), 0.0)

    @given(st.integers(min_value=0, max_value=50))
    @settings(max_examples=20, deadline=None)
    def test_bound_and_order_preserved(self, seed):
        model = VectorVAE(tiny_config(), seed=seed)
        k = 2 + seed % 5
        z_t = np.random.default_rng(seed).normal(size=5)
        offsets = np.asarray(model.deform_samples(dn.constant(z_t), k))
        assert np.max(np.abs(offsets)) < 2 * np.pi / (3 * k)
        theta = 2 * np.pi * np.arange(3 * k) / (3 * k) + offsets
        assert np.all(np.diff(theta) > 0)
        assert theta[-1] - theta[0] < 2 * np.pi

    def test_gradients(self):
        model = VectorVAE(tiny_config(), seed=11)
        z = np.random.default_rng(12).normal(size=5)
        w = np.random.default_rng(13).normal(size=9)

        def loss_fn():
            return dn.sum_all(model.deform_samples(dn.constant(z), 3) * dn.constant(w))

        names = [n for n in model.params if n.startswith("deform.")]
        model_fd_check(model, loss_fn, names, sample=8, rng=np.random.default_rng(14), rtol=1e-5)


class TestDecodePath:
    def test_outputs_inside_unit_canvas(self):
        for seed in range(5):
            model = VectorVAE(tiny_config(), seed=seed)
            controls = np.asarray(model.decode_path(dn.constant(np.ones(5) * seed), 4))
            assert controls.shape == (12, 2)
            assert controls.min() > 0.0 and controls.max() < 1.0

    def test_zero_params_collapse_to_center(self):
        model = zeroed(VectorVAE(tiny_config(), seed=15))
        controls = np.asarray(model.decode_path(dn.constant(np.zeros(5)), 3))
        assert np.allclose(controls, 0.5)

    def test_cyclic_shift_equivariance(self):
        model = VectorVAE(tiny_config(), seed=16)
        rng = np.random.default_rng(17)
        k = 5
        buffer = model._fused_buffer(dn.constant(rng.normal(size=5)), k,
                                     dn.constant(rng.uniform(-0.1, 0.1, size=3 * k)))
        base = np.asarray(model.decode_buffer(buffer))
        for r in (1, 4, 7):
            rolled = dn.constant(np.roll(np.asarray(buffer), r, axis=1))
            out = np.asarray(model.decode_buffer(rolled))
            assert np.array_equal(out, np.roll(base, r, axis=0))

    def test_rejects_out_of_range_k(self):
        model = VectorVAE(tiny_config(), seed=18)
        with pytest.raises(ValueError):
            model.decode_path(dn.constant(np.zeros(5)), 7)


class TestDecodeGraphic:
    def test_at_most_t_paths(self):
        model = VectorVAE(tiny_config(), seed=19)
        g = model.decode_graphic(np.zeros(6), k=4, count=2)
        assert len(g) <= 2

    def test_zero_params_all_degenerate(self):
        model = zeroed(VectorVAE(tiny_config(), seed=20))
        g = model.decode_graphic(np.zeros(6), k=4, count=2)
        assert len(g) == 0

    def test_end_to_end_gradients_through_pyramid_loss(self):
        cfg = tiny_config(max_paths=1)
        model = VectorVAE(cfg, seed=21)
        rng = np.random.default_rng(22)
        image = np.asarray(
            render_graphic(
                VectorGraphic([circle_path((0.5, 0.5), 0.3, 4)], [0.0], [np.zeros(3)]),
                RasterConfig(resolution=16, subdivisions=4),
                0,
            )
        )
        rcfg = RasterConfig(resolution=16, subdivisions=4)
        noise = rng.standard_normal(cfg.latent)

        def loss_fn():
            code = model.encode(image)
            z = model.reparameterize(code, noise)
            graphic = model.decode_graphic(z, k=3, count=1)
            return pyramid_loss(graphic, image, 2, rcfg)

        names = [n for n in model.params if not n.startswith("aux.")]
        picked = list(np.random.default_rng(23).choice(len(names), size=8, replace=False))
        model_fd_check(
            model,
            loss_fn,
            [names[i] for i in picked],
            sample=3,
            rng=np.random.default_rng(24),
            h=1e-4,
            rtol=1e-3,
            atol=1e-8,
        )

    def test_network_only_composition_gradients(self):
        # encoder -> unroll -> decode, no rasterizer in the loop
        cfg = tiny_config(max_paths=1)
        model = VectorVAE(cfg, seed=25)
        image = np.random.default_rng(26).uniform(size=(16, 16, 3))
        w = np.random.default_rng(27).normal(size=(9, 2))

        def loss_fn():
            code = model.encode(image)
            z = model.reparameterize(code, np.zeros(cfg.latent))
            (pl,) = model.unroll_paths(z, 1)
            controls = model.decode_path(pl.z_t, 3, model.deform_samples(pl.z_t, 3))
            return dn.sum_all(controls * dn.constant(w)) + dn.kl_standard_normal(
                code.mu, code.logvar
            )

        names = [n for n in model.params if not n.startswith("aux.")]
        picked = list(np.random.default_rng(28).choice(len(names), size=10, replace=False))
        model_fd_check(
            model,
            loss_fn,
            [names[i] for i in picked],
            sample=2,
            rng=np.random.default_rng(29),
            rtol=1e-4,
            atol=1e-9,
        )

    def test_deterministic_given_zero_noise(self):
        model = VectorVAE(tiny_config(), seed=30)
        image = np.random.default_rng(31).uniform(size=(16, 16, 3))
        a = model.reconstruct(image, k=4)
        b = model.reconstruct(image, k=4)
        for pa, pb in zip(a.paths, b.paths):
            assert np.array_equal(pa.control_values, pb.control_values)


class TestDiscardDegenerate:
    def test_point_path_removed(self):
        g = VectorGraphic([np.full((6, 2), 0.4)], [0.0], [np.zeros(3)])
        assert len(discard_degenerate(g)) == 0

    def test_unit_square_retained(self):
        square = circle_path((0.5, 0.5), 0.4, 4)
        g = VectorGraphic([square], [0.0], [np.zeros(3)])
        assert len(discard_degenerate(g)) == 1

    def test_mixed_preserves_order(self):
        big1 = circle_path((0.3, 0.3), 0.2, 3)
        big2 = circle_path((0.7, 0.7), 0.1, 3)
        tiny = np.full((9, 2), 0.5) + 1e-5
        g = VectorGraphic([big1, tiny, big2], [1.0, 2.0, 3.0], [np.zeros(3)] * 3)
        out = discard_degenerate(g, eps=1e-3)
        assert len(out) == 2
        assert out.depths == [1.0, 3.0]


class TestComplexity:
    def test_positive_outputs(self):
        for seed in range(5):
            model = VectorVAE(tiny_config(), seed=seed)
            curve = model.predict_complexity(np.random.default_rng(seed).normal(size=5))
            assert curve.a > 0 and curve.c > 0

    def test_zero_params_closed_form(self):
        model = zeroed(VectorVAE(tiny_config(), seed=32))
        curve = model.predict_complexity(np.zeros(5))
        assert curve.a == pytest.approx(math.log(2.0))
        assert curve.b == 0.0
        assert curve.c == pytest.approx(math.log(2.0))

    def test_curve_validation(self):
        with pytest.raises(ValueError):
            ComplexityCurve(-0.1, 0.0, 0.0)
        with pytest.raises(ValueError):
            ComplexityCurve(1.0, 0.0, -0.5)


class TestSelectSegmentCount:
    def test_documented_operating_point(self):
        curve = ComplexityCurve(1.0, 3.0, 0.01)
        k_thr = math.exp(-4.0)
        assert select_segment_count(curve, k_thr) == 7
        assert curve.slope_magnitude_at(7) <= k_thr
        assert curve.slope_magnitude_at(6) > k_thr

    def test_clamping(self):
        assert select_segment_count(ComplexityCurve(0.05, 5.0, 0.0), 1e-4) == 25
        assert select_segment_count(ComplexityCurve(2.0, -10.0, 0.0), 0.5) == 7

    def test_rejects_bad_input(self):
        with pytest.raises(ValueError):
            select_segment_count(ComplexityCurve(1.0, 0.0, 0.0), 0.0)

    @given(
        st.floats(min_value=-3, max_value=1.2),
        st.floats(min_value=-2, max_value=4),
        st.floats(min_value=-9, max_value=-2),
        st.floats(min_value=0.01, max_value=2.0),
    )
    @settings(max_examples=200, deadline=None)
    def test_matches_integer_scan(self, log_a, b, log_k, ratio):
        a = math.exp(log_a)
        k_thr = math.exp(log_k)
        curve = ComplexityCurve(a, b, 0.01)
        assert select_segment_count(curve, k_thr) == scan_segment_count(a, b, k_thr)
        # non-increasing in the threshold
        assert select_segment_count(curve, k_thr * (1 + ratio)) <= select_segment_count(
            curve, k_thr
        )
