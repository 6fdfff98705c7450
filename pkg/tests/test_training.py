import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from motionenergy import data, network, training
from motionenergy.network import MotionNet, NetworkConfig
from motionenergy.training import TrainConfig, TrainingError


class TestTargets:
    def test_identical_magnitudes(self):
        flows = [np.tile([[3.0, 4.0]], (4, 4, 1))]
        speeds, targets = training.select_targets(flows, 3, 4)
        np.testing.assert_allclose(speeds, 5.0)
        np.testing.assert_allclose(np.hypot(targets[:, 0], targets[:, 1]), 5.0)

    def test_uniform_quantiles(self):
        rng = np.random.default_rng(0)
        mag = rng.uniform(0, 8, 200_000)
        ang = rng.uniform(0, 2 * np.pi, mag.size)
        flow = np.stack([mag * np.cos(ang), mag * np.sin(ang)], -1)[None]
        speeds, _ = training.select_targets([flow], 8, 12)
        np.testing.assert_allclose(speeds, np.arange(8) + 0.5, atol=0.05)

    def test_rotation_closed(self):
        _, t = training.select_targets([np.ones((3, 3, 2))], 2, 12)
        th = 2 * np.pi / 12
        r = np.array([[np.cos(th), -np.sin(th)], [np.sin(th), np.cos(th)]])
        rotated = t @ r.T
        d = np.min(np.linalg.norm(rotated[:, None] - t[None], axis=-1), axis=1)
        assert d.max() < 1e-12

    def test_mask_respected(self):
        flow = np.zeros((2, 2, 2))
        flow[0, 0] = [10.0, 0.0]
        mask = np.array([[False, True], [True, True]])
        speeds, _ = training.select_targets([flow], 1, 4, [mask])
        assert speeds[0] == 0.0

    def test_errors(self):
        with pytest.raises(TrainingError):
            training.select_targets([], 2, 4)
        with pytest.raises(TrainingError):
            training.select_targets([np.zeros((2, 2, 2))], 2, 4, [np.zeros((2, 2), bool)])


class TestLabels:
    @settings(max_examples=30, deadline=None)
    @given(seed=st.integers(0, 10_000))
    def test_nearest_matches_brute_force(self, seed):
        rng = np.random.default_rng(seed)
        targets = network.target_vectors(rng.uniform(0.2, 3, 3), 8)
        gt = rng.uniform(-4, 4, (5, 2))
        labels = training.nearest_labels(gt, targets)
        for g, lab in zip(gt, labels):
            d = [math.dist(g, t) for t in targets]
            best = min(d)
            assert lab == next(i for i, v in enumerate(d) if v == best)

    def test_ties_go_to_lowest_index(self):
        targets = np.array([[1.0, 0.0], [-1.0, 0.0]])
        assert training.nearest_labels(np.zeros((1, 2)), targets)[0] == 0


class TestLosses:
    def test_uniform_classification_is_log_k(self):
        targets = network.target_vectors([1.0, 2.0], 4)
        dist = np.full((3, 3, 8), 1 / 8)
        loss, _ = training.classification_loss(dist, np.zeros((3, 3, 2)), targets)
        assert math.isclose(loss, math.log(8), rel_tol=1e-14)

    def test_one_hot_classification_is_zero(self):
        targets = network.target_vectors([1.0], 4)
        gt = np.tile(targets[2], (2, 2, 1))
        dist = np.zeros((2, 2, 4))
        dist[..., 2] = 1.0
        assert training.classification_loss(dist, gt, targets)[0] == 0.0

    def test_classification_loop_oracle_and_gradient(self, rng):
        targets = network.target_vectors([0.5, 1.5], 4)
        dist = network.softmax(rng.standard_normal((3, 4, 8)))
        gt = rng.uniform(-2, 2, (3, 4, 2))
        mask = rng.random((3, 4)) > 0.3
        loss, d = training.classification_loss(dist, gt, targets, mask)
        tot, n = 0.0, 0
        for i in range(3):
            for j in range(4):
                if mask[i, j]:
                    lab = int(np.argmin([math.dist(gt[i, j], t) for t in targets]))
                    tot -= math.log(dist[i, j, lab])
                    n += 1
        assert math.isclose(loss, tot / n, rel_tol=1e-12)
        h = 1e-7
        e = np.zeros_like(dist)
        e[1, 1, 3] = h
        fd = (training.classification_loss(dist + e, gt, targets, mask)[0] - training.classification_loss(dist - e, gt, targets, mask)[0]) / (2 * h)
        assert math.isclose(fd, d[1, 1, 3], rel_tol=1e-5, abs_tol=1e-9)

    def test_regression_floor_and_offset(self):
        gt = np.zeros((4, 4, 2))
        assert math.isclose(training.regression_loss(gt, gt)[0], 1e-3, rel_tol=1e-12)
        off = gt.copy()
        off[..., 0] = 1.0
        assert math.isclose(training.regression_loss(off, gt)[0], math.sqrt(1 + 1e-6), rel_tol=1e-12)

    def test_regression_loop_oracle_and_gradient(self, rng):
        f = rng.standard_normal((3, 3, 2))
        g = rng.standard_normal((3, 3, 2))
        mask = np.ones((3, 3), bool)
        mask[0, 0] = False
        loss, d = training.regression_loss(f, g, mask)
        vals = [math.sqrt((f[i, j, 0] - g[i, j, 0]) ** 2 + (f[i, j, 1] - g[i, j, 1]) ** 2 + 1e-6) for i in range(3) for j in range(3) if mask[i, j]]
        assert math.isclose(loss, sum(vals) / len(vals), rel_tol=1e-12)
        assert np.all(d[0, 0] == 0)
        h = 1e-7
        e = np.zeros_like(f)
        e[2, 1, 1] = h
        fd = (training.regression_loss(f + e, g, mask)[0] - training.regression_loss(f - e, g, mask)[0]) / (2 * h)
        assert math.isclose(fd, d[2, 1, 1], rel_tol=1e-5)

    def test_all_masked(self):
        z = np.zeros((2, 2, 2))
        with pytest.raises(TrainingError):
            training.regression_loss(z, z, np.zeros((2, 2), bool))
        with pytest.raises(TrainingError):
            training.classification_loss(np.full((2, 2, 4), 0.25), z, network.target_vectors([1.0], 4), np.zeros((2, 2), bool))


def test_downsample_gt_even_pixels(rng):
    f = rng.standard_normal((2, 7, 6, 2))
    m = rng.random((2, 7, 6)) > 0.5
    g, mh = training.downsample_gt(f, m)
    assert g.shape == (2, 4, 3, 2)
    np.testing.assert_array_equal(g[:, 1, 2], f[:, 2, 4])
    np.testing.assert_array_equal(mh, m[:, ::2, ::2])


def test_phase_two_init_exactness(rng):
    cfg = NetworkConfig(frames=2, size=5, kernels=1, orientations=4, speeds=2, num_scales=1, target_speeds=[0.7, 1.9])
    net = MotionNet.random(cfg, seed=1)
    net.params["h4"] = network.init_output_layer(cfg.target_speeds, cfg)
    net.invalidate()
    dist, flow, _ = network.forward_multiscale(rng.random((10, 10, 2)), net)
    np.testing.assert_allclose(flow, dist @ net.targets, atol=1e-10, rtol=0)


class TestAdam:
    def test_first_step_size_is_lr(self):
        p = {"a": np.array([1.0, -2.0])}
        opt = training.Adam(p, lr=0.1)
        opt.step(p, {"a": np.array([3.0, -0.5])})
        np.testing.assert_allclose(p["a"], [0.9, -1.9], atol=1e-7)

    def test_frozen(self):
        p = {"a": np.ones(2), "b": np.ones(2)}
        opt = training.Adam(p, frozen=("a",))
        opt.step(p, {"a": np.ones(2), "b": np.ones(2)})
        assert np.all(p["a"] == 1) and np.all(p["b"] < 1)

    def test_minimises_quadratic(self):
        p = {"x": np.array([5.0])}
        opt = training.Adam(p, lr=0.1)
        for _ in range(500):
            opt.step(p, {"x": 2 * p["x"]})
        assert abs(p["x"][0]) < 1e-2


class TestSampler:
    def _data(self, n=2, size=40):
        return data.random_translation_set(n, size, size, 2.0, seed=4)

    def test_deterministic(self):
        a = training.PatchSampler(self._data(), 16, 4, seed=7).next_batch()
        b = training.PatchSampler(self._data(), 16, 4, seed=7).next_batch()
        for x, y in zip(a, b):
            np.testing.assert_array_equal(x, y)

    def test_shapes_and_even_corners(self):
        s = training.PatchSampler(self._data(), 16, 3, seed=0)
        frames, flow, mask = s.next_batch()
        assert frames.shape == (3, 16, 16, 3) and flow.shape == (3, 16, 16, 2) and mask.shape == (3, 16, 16)
        assert all(y % 2 == 0 and x % 2 == 0 for _, y, x in s.corners(50))

    def test_rejects_fully_masked_crops(self):
        ds = self._data(1, 32)
        ds[0].mask[:, :] = False
        ds[0].mask[30, 30] = True
        s = training.PatchSampler(ds, 16, 1, seed=0)
        for _ in range(20):
            assert s.draw()[2].any()

    def test_coverage(self):
        ds = self._data(1, 40)
        s = training.PatchSampler(ds, 16, 1, seed=3)
        hits = np.zeros((40, 40), int)
        for _, y, x in s.corners(10_000):
            hits[y : y + 16, x : x + 16] += 1
        assert hits.min() > 0

    def test_patch_too_large(self):
        with pytest.raises(TrainingError):
            training.PatchSampler(self._data(1, 20), 32, 1)

    def test_state_round_trip(self):
        s = training.PatchSampler(self._data(), 16, 2, seed=1)
        st_ = s.state
        a = s.next_batch()
        s.state = st_
        b = s.next_batch()
        np.testing.assert_array_equal(a[0], b[0])


TINY_NET = dict(frames=2, size=5, kernels=1, orientations=4, speeds=2, num_scales=1)
TINY_TRAIN = dict(patch=16, batch=2, steps_per_epoch=2, max_epochs_classification=3, max_epochs_regression=2, seed=5)


def _tiny_trainer(**kw):
    ds = data.random_translation_set(3, 24, 24, 2.0, frames=2, seed=2)
    held = data.random_translation_set(1, 24, 24, 2.0, frames=2, seed=3)
    return training.Trainer(NetworkConfig(**TINY_NET), TrainConfig(**{**TINY_TRAIN, **kw}), ds, held)


class TestTrainer:
    def test_two_phase_schedule(self):
        net, report = _tiny_trainer().train()
        phases = [r.phase for r in report.history]
        assert phases == ["classification"] * 3 + ["regression"] * 2
        assert report.status == "converged"
        assert all(math.isfinite(r.loss) for r in report.history)
        assert math.isfinite(report.history[-1].heldout_epe)

    def test_single_phase_modes(self):
        _, r = _tiny_trainer(phases="classification").train()
        assert {x.phase for x in r.history} == {"classification"}
        _, r = _tiny_trainer(phases="regression").train()
        assert {x.phase for x in r.history} == {"regression"}

    def test_bit_deterministic(self):
        a, ra = _tiny_trainer().train()
        b, rb = _tiny_trainer().train()
        assert ra.losses() == rb.losses()
        for k in a.params:
            np.testing.assert_array_equal(a.params[k], b.params[k])

    def test_resume_matches_uninterrupted(self, tmp_path):
        full, _ = _tiny_trainer().train()
        t = _tiny_trainer()
        for _ in range(2):
            t.run_epoch()
            t.step_schedule()
        t.save(tmp_path / "mid.ckpt")
        ds = data.random_translation_set(3, 24, 24, 2.0, frames=2, seed=2)
        held = data.random_translation_set(1, 24, 24, 2.0, frames=2, seed=3)
        resumed, _ = training.Trainer.resume(tmp_path / "mid.ckpt", ds, held).train()
        for k in full.params:
            np.testing.assert_array_equal(full.params[k], resumed.params[k])

    def test_nan_aborts_with_last_good(self):
        t = _tiny_trainer()
        t.run_epoch()
        good = {k: v.copy() for k, v in t.net.params.items()}
        t.net.params["h3"][...] = np.nan
        t.net.invalidate()
        with pytest.raises(training.DivergenceError) as err:
            t.run_epoch()
        assert t.report.status == "diverged"
        for k in good:
            np.testing.assert_array_equal(err.value.net.params[k], good[k])

    def test_no_progress_guard(self):
        t = _tiny_trainer(nc_epochs=2, max_epochs_classification=50, plateau_epochs=40)
        t.optimizer.lr = 0.0  # nothing can improve
        t.train()
        assert t.report.status == "N.C."
        assert t.epoch <= 4

    def test_fixed_h1_is_frozen(self):
        cfg = NetworkConfig(**{**TINY_NET, "fixed_h1": "gauss-deriv", "kernels": 2})
        ds = data.random_translation_set(2, 24, 24, 2.0, frames=2, seed=2)
        t = training.Trainer(cfg, TrainConfig(**TINY_TRAIN), ds)
        before = t.net.params["h1"].copy()
        t.run_epoch()
        np.testing.assert_array_equal(t.net.params["h1"], before)

    def test_csv_log(self, tmp_path):
        _, report = _tiny_trainer().train()
        report.write_csv(tmp_path / "log.csv")
        lines = (tmp_path / "log.csv").read_text().splitlines()
        assert lines[0].startswith("epoch,phase,loss") and len(lines) == 1 + len(report.history)

    def test_overfit_single_sample(self):
        # a single-speed sample would yield duplicate targets, so fix distinct speeds
        cfg = NetworkConfig(frames=2, size=5, kernels=2, orientations=4, speeds=2, num_scales=1, target_speeds=(0.3, 1.0))
        ds = [data.synth_sequence(data.SyntheticSpec(16, 16, [data.Layer((1.0, 0.0))], frames=2, seed=0))]
        tc = TrainConfig(patch=16, batch=1, steps_per_epoch=25, lr_classification=1e-2, seed=0)
        t = training.Trainer(cfg, tc, ds)
        for _ in range(4):
            t.run_epoch()
        assert t.report.history[-1].loss < 0.05


@pytest.mark.slow
def test_fine_tuning_does_not_hurt(trained_small):
    _, report, _, _ = trained_small
    phase1 = [r for r in report.history if r.phase == "classification"]
    phase2 = [r for r in report.history if r.phase == "regression"]
    assert phase1 and phase2
    assert phase2[-1].heldout_epe <= phase1[-1].heldout_epe
