import math
import warnings

import numpy as np
import pytest

from motionenergy import network, rotation
from motionenergy.network import MotionNet, NetworkConfig
from motionenergy.tensor_core import ContractViolation, rot90_image

TINY = dict(frames=2, size=5, kernels=1, orientations=4, speeds=2, num_scales=1)


def _tiny(**kw):
    cfg = NetworkConfig(**{**TINY, **kw})
    return MotionNet.random(cfg, seed=3)


class TestConfig:
    @pytest.mark.parametrize("bad", [dict(size=4), dict(orientations=5), dict(frames=1), dict(kernels=0), dict(rectifier="tanh")])
    def test_validation(self, bad):
        with pytest.raises(ValueError):
            NetworkConfig(**bad)

    def test_round_trip(self):
        cfg = NetworkConfig(target_speeds=[0.5, 1.0, 1.5, 2, 2.5, 3, 3.5, 4])
        assert NetworkConfig.from_dict(cfg.to_dict()) == cfg

    def test_unknown_key(self):
        with pytest.raises(ValueError):
            NetworkConfig.from_dict({"bogus": 1})

    def test_centre_frame(self):
        assert [NetworkConfig(frames=f).center_index for f in (2, 3, 4, 5)] == [0, 1, 1, 2]

    def test_pool_window(self):
        assert NetworkConfig(size=11).pool_window == 3
        assert NetworkConfig(size=11, phase_pooling=False).pool_window == 1

    def test_layer_shapes(self):
        s = NetworkConfig().layer_specs()
        assert s["h1"].canonical_shape == (1, 3, 4, 11, 11)
        assert s["h2"].canonical_shape == (7, 4, 4, 11, 11)
        assert s["h3"].canonical_shape == (7, 40, 8, 1, 1)
        assert s["h4"].canonical_shape == (7, 8, 1, 1, 1)


class TestOutputLayer:
    def test_target_layout(self):
        t = network.target_vectors([1.0, 2.0], 4)
        np.testing.assert_allclose(t, [[1, 0], [2, 0], [0, 1], [0, 2], [-1, 0], [-2, 0], [0, -1], [0, -2]], atol=1e-15)

    def test_one_hot_decodes_to_target(self):
        cfg = NetworkConfig(speeds=3, target_speeds=[0.5, 1.0, 2.0])
        net = MotionNet.random(cfg)
        W4 = net.banks()["W4"]
        np.testing.assert_allclose(np.eye(cfg.n_targets) @ W4, net.targets, atol=1e-12, rtol=0)

    def test_uniform_decodes_to_zero(self):
        net = MotionNet.random(NetworkConfig(speeds=3, target_speeds=[0.5, 1.0, 2.0]))
        u = np.full(net.config.n_targets, 1.0 / net.config.n_targets)
        np.testing.assert_allclose(u @ net.banks()["W4"], 0.0, atol=1e-15)

    def test_init_respects_ties(self):
        cfg = NetworkConfig(speeds=3, target_speeds=[0.5, 1.0, 2.0])
        spec = cfg.layer_specs()["h4"]
        bank = rotation.expand(network.init_output_layer(cfg.target_speeds, cfg), spec)
        assert rotation.check_rotation_ties(bank, spec) > 0

    def test_targets_require_speeds(self):
        with pytest.raises(ContractViolation):
            MotionNet(NetworkConfig()).targets


class TestLayers:
    def test_centre_surround_kills_constants(self):
        x = np.full((1, 9, 9, 2), 0.7)
        np.testing.assert_allclose(network.center_surround(x, 5), 0.0, atol=1e-15)

    def test_local_norm_scale_invariance(self, rng):
        x = rng.standard_normal((1, 12, 12, 2))
        a = network.local_contrast_norm(x, 5)
        b = network.local_contrast_norm(3.0 * x, 5)
        mask = network.local_std(x, 5) > 0.01
        np.testing.assert_allclose(a[mask], b[mask], rtol=1e-12)

    def test_local_std_floor(self):
        x = np.zeros((1, 5, 5, 1))
        assert np.all(network.local_contrast_norm(x, 3) == 0)

    def test_orientation_norm_sums(self, rng):
        x = rng.random((1, 3, 3, 8))
        y = network.orientation_norm(x, 4, 0.01)
        s = x.reshape(1, 3, 3, 4, 2).sum(axis=3)
        np.testing.assert_allclose(y.reshape(1, 3, 3, 4, 2).sum(axis=3), s / (s + 0.01), rtol=1e-12)

    def test_orientation_norm_grad(self, rng):
        x = rng.random((1, 2, 2, 8)) + 0.1
        g = rng.standard_normal(x.shape)
        an = network._orientation_norm_grad(x, g, 4, 0.01)
        h = 1e-6
        fd = np.zeros_like(x)
        for idx in np.ndindex(x.shape):
            e = np.zeros_like(x)
            e[idx] = h
            fd[idx] = np.sum(g * (network.orientation_norm(x + e, 4, 0.01) - network.orientation_norm(x - e, 4, 0.01))) / (2 * h)
        np.testing.assert_allclose(an, fd, rtol=1e-6, atol=1e-9)

    def test_softmax(self, rng):
        z = rng.standard_normal((4, 5, 7)) * 50
        p = network.softmax(z)
        np.testing.assert_allclose(p.sum(-1), 1.0, atol=1e-12)
        assert np.all(p >= 0)

    def test_stack_input(self, rng):
        assert network.stack_input([rng.random((4, 5))] * 3).shape == (4, 5, 3)
        with pytest.raises(ContractViolation):
            network.stack_input([rng.random((4, 5)), rng.random((4, 6))])
        with pytest.raises(ContractViolation):
            network.stack_input([rng.random((4, 5))])


class TestPyramid:
    def test_scale_sizes_keep_parity(self):
        cfg = NetworkConfig(num_scales=6)
        for h, w in scale_pairs():
            for hs, ws in network.scale_sizes(h, w, cfg):
                assert hs % 2 == h % 2 and ws % 2 == w % 2

    def test_small_scales_skipped_with_warning(self, rng):
        net = _tiny(num_scales=4)
        frames = rng.random((12, 12, 2))
        with pytest.warns(RuntimeWarning, match="skipped"):
            _, _, trace = network.forward_multiscale(frames, net)
        assert trace.used_scales == [0, 1, 2] and len(trace.warnings) == 1  # sizes 12, 8, 6, 4

    def test_too_small_input(self, rng):
        with pytest.raises(ContractViolation), warnings.catch_warnings():
            warnings.simplefilter("ignore")
            network.forward_multiscale(rng.random((3, 3, 2)), _tiny())

    def test_wrong_frame_count(self, rng):
        with pytest.raises(ContractViolation):
            network.forward_multiscale(rng.random((8, 8, 3)), _tiny())


def scale_pairs():
    return [(64, 64), (45, 60), (31, 32), (100, 77)]


class TestForward:
    def test_shapes(self, rng):
        net = _tiny(num_scales=2)
        dist, flow, trace = network.forward_multiscale(rng.random((15, 14, 2)), net)
        assert dist.shape == (8, 7, 8) and flow.shape == (8, 7, 2)
        np.testing.assert_allclose(dist.sum(-1), 1.0, atol=1e-12)

    def test_batch_matches_single(self, rng):
        net = _tiny()
        x = rng.random((2, 10, 10, 2))
        d, _, _ = network.forward_multiscale(x, net)
        d0, _, _ = network.forward_multiscale(x[0], net)
        np.testing.assert_allclose(d[0], d0, atol=1e-14)

    def test_single_iteration_equals_plain_forward(self, rng):
        net = _tiny()
        x = rng.random((10, 10, 2))
        flow, traces = network.forward_recurrent(x, net, iters=1)
        np.testing.assert_array_equal(flow, network.forward_multiscale(x, net)[1])
        assert len(traces) == 1

    def test_recurrent_accumulates(self, rng):
        net = _tiny()
        x = rng.random((10, 10, 2))
        flow, traces = network.forward_recurrent(x, net, iters=3)
        np.testing.assert_allclose(flow, sum(t.flow[0] for t in traces), atol=1e-14)
        np.testing.assert_allclose(traces[2].accumulated[0], traces[0].flow[0] + traces[1].flow[0], atol=1e-14)

    def test_warp_keeps_centre_frame(self, rng):
        x = rng.random((1, 6, 6, 3))
        flow = rng.standard_normal((1, 6, 6, 2))
        w = network.warp_frames(x, flow, 1)
        np.testing.assert_array_equal(w[..., 1], x[..., 1])
        assert not np.allclose(w[..., 0], x[..., 0])

    def test_estimate_flow_full_resolution(self, rng):
        flow, dist = network.estimate_flow(rng.random((11, 13, 2)), _tiny())
        assert flow.shape == (11, 13, 2) and dist.shape == (6, 7, 8)

    @pytest.mark.parametrize(
        "switch",
        [
            dict(center_surround=False),
            dict(local_norm=False),
            dict(orientation_norm=False),
            dict(phase_pooling=False),
            dict(rectifier="relu"),
            dict(tied=False),
            dict(fixed_h1="gauss-deriv", kernels=2),
            dict(frames=5),
        ],
    )
    def test_ablation_switches_run_and_differentiate(self, rng, switch):
        net = _tiny(**switch)
        x = rng.random((12, 12, net.config.frames))
        _, traces = network.forward_recurrent(x, net)
        grads = network.backward(traces, net, d_flows=[np.ones_like(traces[0].flow)])
        assert set(grads) == set(net.params)
        for k, g in grads.items():
            assert g.shape == net.params[k].shape and np.all(np.isfinite(g))


class TestBackward:
    def test_finite_differences(self, rng):
        net = _tiny(speeds=2)
        x = rng.random((1, 12, 12, 2))
        gt = rng.standard_normal((1, 6, 6, 2))

        def loss(n):
            _, flow, tr = network.forward_multiscale(x, n)
            return 0.5 * np.sum((flow - gt) ** 2), tr, flow

        _, tr, flow = loss(net)
        grads = network.backward_trace(tr, net, d_flow=flow - gt)
        h = 1e-6
        worst = 0.0
        for name in ("h1", "h2", "h3", "b2", "h4"):
            p = net.params[name]
            for idx in list(np.ndindex(p.shape))[:6]:
                old = p[idx]
                p[idx] = old + h
                net.invalidate()
                lp = loss(net)[0]
                p[idx] = old - h
                net.invalidate()
                lm = loss(net)[0]
                p[idx] = old
                net.invalidate()
                fd = (lp - lm) / (2 * h)
                an = grads[name][idx]
                worst = max(worst, abs(fd - an) / max(abs(fd), abs(an), 1e-6))
        assert worst < 1e-5

    def test_missing_trace(self):
        with pytest.raises(ContractViolation):
            network.backward_trace(None, _tiny())
        with pytest.raises(ContractViolation):
            network.backward([], _tiny())


class TestEquivariance:
    def test_quarter_turn_o4(self, rng):
        # odd pool window (ceil(9/4) = 3) keeps pooling centred
        net = _tiny(num_scales=2, size=9)
        x = rng.random((25, 25, 2))
        f = network.estimate_flow(x, net, full_resolution=False)[0]
        fr = network.estimate_flow(rot90_image(x), net, full_resolution=False)[0]
        expected = rot90_image(np.stack([-f[..., 1], f[..., 0]], axis=-1))
        np.testing.assert_allclose(fr, expected, atol=1e-10)


def test_gauss_derivative_kernels():
    cfg = NetworkConfig(frames=3, size=9, kernels=4)
    h1 = network.gauss_derivative_h1(cfg)
    assert h1.shape == cfg.layer_specs()["h1"].canonical_shape
    np.testing.assert_allclose(np.abs(h1).sum(axis=(1, 3, 4)), 1.0)
    # first-derivative-in-time kernels are odd in time
    np.testing.assert_allclose(h1[0, 0, 0], -h1[0, 2, 0], atol=1e-15)
    assert math.isclose(h1[0, 1, 0].sum(), 0.0, abs_tol=1e-15)
