"""Two-phase training: target classification, then end-point-error fine-tuning.

Every unfolded recurrent iteration contributes a loss term. Iteration ``r``
is supervised with the residual ``gt - acc_r`` where ``acc_r`` is the
(constant) flow accumulated by the previous iterations.
"""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import asdict, dataclass, field, fields

import numpy as np

from . import checkpoint, network
from .flow_io import aae, epe
from .network import MotionNet, init_output_layer, target_vectors

log = logging.getLogger(__name__)

EPE_DELTA = 1e-3


class TrainingError(Exception):
    pass


class DivergenceError(TrainingError):
    """Loss became non-finite; ``net`` holds the last good weights."""

    def __init__(self, msg, net=None, report=None):
        super().__init__(msg)
        self.net = net
        self.report = report


# ---------------------------------------------------------------------------
# targets and labels
# ---------------------------------------------------------------------------


def select_targets(flows, speeds, orientations, masks=None):
    """Speeds at the quantiles ``(t + 0.5) / T`` of the masked flow magnitudes.

    Returns ``(speeds, targets)`` with ``targets`` of shape ``(T * O, 2)``
    ordered ``o * T + t``.
    """
    flows = list(flows)
    if not flows:
        raise TrainingError("no training flows")
    masks = [None] * len(flows) if masks is None else list(masks)
    mags = []
    for f, m in zip(flows, masks):
        f = np.asarray(f, dtype=np.float64)
        mag = np.hypot(f[..., 0], f[..., 1])
        mags.append(mag[np.asarray(m, dtype=bool)] if m is not None else mag.ravel())
    mags = np.concatenate(mags)
    if mags.size == 0:
        raise TrainingError("every flow pixel is masked")
    q = (np.arange(speeds) + 0.5) / speeds
    s = np.quantile(mags, q)
    return s, target_vectors(s, orientations)


def downsample_gt(flow, mask=None):
    """Ground truth on the network's half-resolution grid (even pixels).

    Values stay in input-resolution px/frame, matching the network output.
    """
    flow = np.asarray(flow, dtype=np.float64)
    sl = (Ellipsis, slice(None, None, 2), slice(None, None, 2), slice(None))
    out = flow[sl]
    if mask is None:
        return out.copy(), None
    return out.copy(), np.asarray(mask, dtype=bool)[sl[:-1]].copy()


def nearest_labels(gt, targets):
    """Index of the closest target per pixel; ties go to the lowest index."""
    gt = np.asarray(gt, dtype=np.float64)
    t = np.asarray(targets, dtype=np.float64)
    d = (gt[..., 0, None] - t[:, 0]) ** 2 + (gt[..., 1, None] - t[:, 1]) ** 2
    return np.argmin(d, axis=-1)


def _mask(mask, shape):
    if mask is None:
        return np.ones(shape, dtype=bool)
    mask = np.asarray(mask, dtype=bool)
    if mask.shape != shape:
        raise TrainingError(f"mask {mask.shape} does not match {shape}")
    return mask


def classification_loss(dist, gt, targets, mask=None):
    """Mean ``-log p[label]`` over valid pixels. Returns ``(loss, d_dist)``."""
    dist = np.asarray(dist, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    if dist.shape[:-1] != gt.shape[:-1] or dist.shape[-1] != len(targets):
        raise TrainingError(f"dist {dist.shape} incompatible with gt {gt.shape} and {len(targets)} targets")
    mask = _mask(mask, gt.shape[:-1])
    n = int(np.count_nonzero(mask))
    if n == 0:
        raise TrainingError("every pixel is masked")
    labels = nearest_labels(gt, targets)
    p = np.take_along_axis(dist, labels[..., None], axis=-1)[..., 0]
    p = np.maximum(p, 1e-300)
    loss = float(-np.log(p[mask]).sum() / n)
    d = np.zeros_like(dist)
    vals = np.where(mask, -1.0 / (n * p), 0.0)
    np.put_along_axis(d, labels[..., None], vals[..., None], axis=-1)
    return loss, d


def regression_loss(flow, gt, mask=None, delta=EPE_DELTA):
    """Mean smoothed end-point error ``sqrt(du^2 + dv^2 + delta^2)``. Returns ``(loss, d_flow)``."""
    flow = np.asarray(flow, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    if flow.shape != gt.shape:
        raise TrainingError(f"flow {flow.shape} and gt {gt.shape} differ")
    mask = _mask(mask, gt.shape[:-1])
    n = int(np.count_nonzero(mask))
    if n == 0:
        raise TrainingError("every pixel is masked")
    r = flow - gt
    norm = np.sqrt(r[..., 0] ** 2 + r[..., 1] ** 2 + delta**2)
    loss = float(norm[mask].sum() / n)
    d = np.where(mask[..., None], r / (n * norm[..., None]), 0.0)
    return loss, d


def margin_mask(shape, margin):
    """Boolean mask that is False within ``margin`` pixels of the border."""
    m = np.zeros(shape, dtype=bool)
    h, w = shape[-2:]
    if 2 * margin >= min(h, w):
        raise TrainingError(f"margin {margin} leaves no pixels in {h}x{w}")
    m[..., margin : h - margin, margin : w - margin] = True
    return m


# ---------------------------------------------------------------------------
# optimiser
# ---------------------------------------------------------------------------


class Adam:
    """Adam over a dict of arrays. ``frozen`` names are never updated."""

    def __init__(self, params, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8, frozen=()):
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.frozen = set(frozen)
        self.step_count = 0
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}

    def step(self, params, grads):
        self.step_count += 1
        t = self.step_count
        c1 = 1.0 - self.beta1**t
        c2 = 1.0 - self.beta2**t
        for k, g in grads.items():
            if k in self.frozen:
                continue
            if self.m[k].shape != g.shape:
                raise TrainingError(f"gradient {k} has shape {g.shape}, state {self.m[k].shape}")
            self.m[k] = self.beta1 * self.m[k] + (1.0 - self.beta1) * g
            self.v[k] = self.beta2 * self.v[k] + (1.0 - self.beta2) * g * g
            params[k] -= self.lr * (self.m[k] / c1) / (np.sqrt(self.v[k] / c2) + self.eps)

    def reset(self, lr=None):
        if lr is not None:
            self.lr = lr
        self.step_count = 0
        for k in self.m:
            self.m[k][...] = 0.0
            self.v[k][...] = 0.0


# ---------------------------------------------------------------------------
# patches
# ---------------------------------------------------------------------------


class PatchSampler:
    """Seeded stream of random crops.

    A sample is drawn with probability proportional to its number of valid
    patch positions, then a top-left corner uniformly; crops without a valid
    pixel are redrawn. Patch corners are even so that the half-resolution
    ground truth grid stays aligned with the image's even pixels.
    """

    def __init__(self, dataset, patch, batch, seed=0, max_rejects=1000):
        self.dataset = [s for s in dataset if min(s.frames.shape[:2]) >= patch]
        if not dataset:
            raise TrainingError("empty dataset")
        if not self.dataset:
            raise TrainingError(f"patch {patch} is larger than every image")
        self.patch = patch
        self.batch = batch
        self.max_rejects = max_rejects
        self.rng = np.random.default_rng(seed)
        counts = np.array([self._positions(s) for s in self.dataset], dtype=np.float64)
        self.weights = counts / counts.sum()

    def _positions(self, s):
        h, w = s.frames.shape[:2]
        return ((h - self.patch) // 2 + 1) * ((w - self.patch) // 2 + 1)

    def draw(self):
        """One crop: ``(frames, flow, mask)``."""
        p = self.patch
        for _ in range(self.max_rejects):
            k = int(self.rng.choice(len(self.dataset), p=self.weights))
            s = self.dataset[k]
            h, w = s.frames.shape[:2]
            y = 2 * int(self.rng.integers((h - p) // 2 + 1))
            x = 2 * int(self.rng.integers((w - p) // 2 + 1))
            mask = s.mask[y : y + p, x : x + p]
            if mask.any():
                return s.frames[y : y + p, x : x + p], s.flow[y : y + p, x : x + p], mask
        raise TrainingError("could not find a crop with valid pixels")

    def corners(self, n):
        """Only for inspection: ``n`` draws as ``(sample, y, x)`` triples using a copy of the rng."""
        saved = self.rng.bit_generator.state
        out = []
        p = self.patch
        for _ in range(n):
            k = int(self.rng.choice(len(self.dataset), p=self.weights))
            h, w = self.dataset[k].frames.shape[:2]
            y = 2 * int(self.rng.integers((h - p) // 2 + 1))
            x = 2 * int(self.rng.integers((w - p) // 2 + 1))
            out.append((k, y, x))
        self.rng.bit_generator.state = saved
        return out

    def next_batch(self):
        crops = [self.draw() for _ in range(self.batch)]
        return tuple(np.stack(c) for c in zip(*crops))

    @property
    def state(self):
        return self.rng.bit_generator.state

    @state.setter
    def state(self, value):
        self.rng.bit_generator.state = value


# ---------------------------------------------------------------------------
# trainer
# ---------------------------------------------------------------------------


@dataclass
class TrainConfig:
    """Optimiser and schedule settings."""

    lr_classification: float = 1e-3
    lr_regression: float = 1e-4
    max_epochs_classification: int = 50
    max_epochs_regression: int = 5
    steps_per_epoch: int = 20
    patch: int = 96
    batch: int = 8
    seed: int = 0
    init_scale: float = 1.0
    plateau_epochs: int = 5
    plateau_tol: float = 0.005
    nc_epochs: int = 20
    nc_tol: float = 0.01
    loss_margin: int = 0  # half-res pixels ignored at the crop border
    eval_margin: int = 0  # full-res pixels ignored when scoring held-out flow
    phases: str = "both"  # "both", "classification" or "regression"
    scales: list | None = None

    def __post_init__(self):
        if self.phases not in ("both", "classification", "regression"):
            raise ValueError(f"phases must be both/classification/regression, got {self.phases!r}")
        for name in ("steps_per_epoch", "patch", "batch", "plateau_epochs", "nc_epochs"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown training keys: {sorted(unknown)}")
        return cls(**d)


@dataclass
class EpochRecord:
    epoch: int
    phase: str
    loss: float
    iteration_losses: list
    heldout_loss: float
    heldout_epe: float
    heldout_aae: float


@dataclass
class LossReport:
    history: list = field(default_factory=list)
    status: str = "running"  # running, converged, N.C., diverged

    def losses(self, phase=None):
        return [r.loss for r in self.history if phase is None or r.phase == phase]

    def write_csv(self, path):
        with open(path, "w", newline="") as fh:
            wr = csv.writer(fh)
            wr.writerow(["epoch", "phase", "loss", "iteration_losses", "heldout_loss", "heldout_epe", "heldout_aae"])
            for r in self.history:
                its = ";".join(f"{v:.6g}" for v in r.iteration_losses)
                wr.writerow(
                    [r.epoch, r.phase, f"{r.loss:.8g}", its, f"{r.heldout_loss:.8g}", f"{r.heldout_epe:.6f}", f"{r.heldout_aae:.6f}"]
                )


def unrolled_loss(frames, gt, mask, net, phase, targets, iters=None, scales=None, margin=0):
    """Forward all recurrent iterations and return ``(total, per_iteration, grads)``.

    ``frames`` ``(B, H, W, F)``, ``gt`` at full resolution ``(B, H, W, 2)``.
    """
    gt_half, mask_half = downsample_gt(gt, mask)
    if margin:
        mask_half = mask_half & margin_mask(mask_half.shape, margin)
    acc, traces = network.forward_recurrent(frames, net, iters=iters, scales=scales)
    per_iter, d_dists, d_flows = [], [], []
    for tr in traces:
        resid = gt_half - tr.accumulated
        if phase == "classification":
            loss, dd = classification_loss(tr.dist, resid, targets, mask_half)
            d_dists.append(dd)
            d_flows.append(None)
        else:
            loss, df = regression_loss(tr.flow, resid, mask_half)
            d_dists.append(None)
            d_flows.append(df)
        per_iter.append(loss)
    grads = network.backward(traces, net, d_dists, d_flows)
    return float(sum(per_iter)), per_iter, grads


def evaluate_flow(net, samples, iters=None, scales=None, margin=0):
    """Mean EPE/AAE of full-resolution estimates over ``samples``."""
    if not samples:
        return float("nan"), float("nan")
    e, a = [], []
    for s in samples:
        flow, _ = network.estimate_flow(s.frames, net, iters=iters, scales=scales)
        mask = s.mask
        if margin:
            mask = mask & margin_mask(mask.shape, margin)
        e.append(epe(flow, s.flow, mask))
        a.append(aae(flow, s.flow, mask))
    return float(np.mean(e)), float(np.mean(a))


def heldout_classification_loss(net, samples, targets, iters=None, scales=None, margin=0):
    vals = []
    for s in samples:
        gt_half, mask_half = downsample_gt(s.flow, s.mask)
        if margin:
            mask_half = mask_half & margin_mask(mask_half.shape, margin)
        _, traces = network.forward_recurrent(s.frames, net, iters=iters, scales=scales)
        total = 0.0
        for tr in traces:
            resid = gt_half - tr.accumulated[0]
            total += classification_loss(tr.dist[0], resid, targets, mask_half)[0]
        vals.append(total)
    return float(np.mean(vals)) if vals else float("nan")


def _improved(values, window, tol):
    """True unless the best of the last ``window`` values fails to beat the earlier best by ``tol``."""
    if len(values) <= window:
        return True
    before = min(values[:-window])
    recent = min(values[-window:])
    return recent < (1.0 - tol) * before


class Trainer:
    """Runs the schedule; all mutable state lives here so it can be checkpointed."""

    def __init__(self, net_config, train_config, train_set, heldout=(), targets_from=None):
        self.train_config = train_config
        self.train_set = list(train_set)
        self.heldout = list(heldout)
        if not self.train_set:
            raise TrainingError("empty training set")
        if net_config.target_speeds is None:
            src = self.train_set if targets_from is None else targets_from
            speeds, _ = select_targets([s.flow for s in src], net_config.speeds, net_config.orientations, [s.mask for s in src])
            net_config = net_config.replace(target_speeds=tuple(float(v) for v in speeds))
        self.net = MotionNet.random(net_config, seed=train_config.seed, scale=train_config.init_scale)
        self.targets = target_vectors(net_config.target_speeds, net_config.orientations)
        frozen = ("h1", "b1") if net_config.fixed_h1 else ()
        self.optimizer = Adam(self.net.params, lr=train_config.lr_classification, frozen=frozen)
        self.sampler = PatchSampler(self.train_set, train_config.patch, train_config.batch, seed=train_config.seed)
        self.report = LossReport()
        self.phase = "regression" if train_config.phases == "regression" else "classification"
        if self.phase == "regression":
            self.optimizer.lr = train_config.lr_regression
        self.epoch = 0
        self.phase_epoch = 0
        self.heldout_curve = []
        self.train_curve = []
        self.last_good = self.net.copy()

    @property
    def config(self):
        return self.net.config

    def _switch_to_regression(self):
        cfg = self.config
        self.net.params["h4"] = init_output_layer(cfg.target_speeds, cfg)
        self.net.invalidate()
        self.optimizer.reset(self.train_config.lr_regression)
        self.phase = "regression"
        self.phase_epoch = 0
        self.heldout_curve = []
        self.train_curve = []

    def run_epoch(self):
        """One epoch of ``steps_per_epoch`` batches plus held-out scoring."""
        tc = self.train_config
        total, its = 0.0, None
        for _ in range(tc.steps_per_epoch):
            frames, flow, mask = self.sampler.next_batch()
            loss, per_iter, grads = unrolled_loss(
                frames, flow, mask, self.net, self.phase, self.targets, scales=tc.scales, margin=tc.loss_margin
            )
            if not math.isfinite(loss) or not all(np.all(np.isfinite(g)) for g in grads.values()):
                self.report.status = "diverged"
                raise DivergenceError(f"non-finite loss at epoch {self.epoch + 1}", self.last_good, self.report)
            self.optimizer.step(self.net.params, grads)
            self.net.invalidate()
            total += loss
            its = per_iter if its is None else [a + b for a, b in zip(its, per_iter)]
        n = tc.steps_per_epoch
        loss = total / n
        its = [v / n for v in its]
        self.epoch += 1
        self.phase_epoch += 1
        h_loss = float("nan")
        if self.heldout and self.phase == "classification":
            h_loss = heldout_classification_loss(self.net, self.heldout, self.targets, scales=tc.scales, margin=tc.loss_margin)
        h_epe, h_aae = evaluate_flow(self.net, self.heldout, scales=tc.scales, margin=tc.eval_margin)
        rec = EpochRecord(self.epoch, self.phase, loss, its, h_loss, h_epe, h_aae)
        self.report.history.append(rec)
        self.train_curve.append(loss)
        self.heldout_curve.append(h_loss if math.isfinite(h_loss) else loss)
        self.last_good = self.net.copy()
        log.info("epoch %d %s loss %.5f heldout epe %.4f", self.epoch, self.phase, loss, h_epe)
        return rec

    def finished(self):
        return self.report.status in ("converged", "N.C.", "diverged")

    def step_schedule(self):
        """Decide what happens after an epoch: phase switch, stop or continue."""
        tc = self.train_config
        if not _improved(self.train_curve, tc.nc_epochs, tc.nc_tol):
            self.report.status = "N.C."
            return
        if self.phase == "classification":
            plateau = not _improved(self.heldout_curve, tc.plateau_epochs, tc.plateau_tol)
            if plateau or self.phase_epoch >= tc.max_epochs_classification:
                if tc.phases == "both":
                    self._switch_to_regression()
                else:
                    self.report.status = "converged"
        elif self.phase_epoch >= tc.max_epochs_regression:
            self.report.status = "converged"

    # -- checkpointing ------------------------------------------------------

    def save(self, path):
        state = {
            "phase": self.phase,
            "epoch": self.epoch,
            "phase_epoch": self.phase_epoch,
            "heldout_curve": self.heldout_curve,
            "train_curve": self.train_curve,
            "status": self.report.status,
            "history": [asdict(r) for r in self.report.history],
            "sampler": self.sampler.state,
            "adam": {"lr": self.optimizer.lr, "step_count": self.optimizer.step_count},
        }
        moments = {f"adam_m/{k}": v for k, v in self.optimizer.m.items()}
        moments.update({f"adam_v/{k}": v for k, v in self.optimizer.v.items()})
        checkpoint.save(path, self.net, self.train_config.to_dict(), state, moments)

    @classmethod
    def resume(cls, path, train_set, heldout=()):
        """Rebuild a trainer from :meth:`save` output; continuing it reproduces the uninterrupted run."""
        ck = checkpoint.load(path)
        if not ck.state or ck.train_config is None:
            raise TrainingError(f"{path} holds no trainer state")
        self = cls(ck.config, TrainConfig.from_dict(ck.train_config), train_set, heldout)
        s = ck.state
        self.net.set_params(ck.params)
        self.last_good = self.net.copy()
        self.phase = s["phase"]
        self.epoch = s["epoch"]
        self.phase_epoch = s["phase_epoch"]
        self.heldout_curve = list(s["heldout_curve"])
        self.train_curve = list(s["train_curve"])
        self.report = LossReport([EpochRecord(**r) for r in s["history"]], s["status"])
        self.sampler.state = s["sampler"]
        self.optimizer.lr = s["adam"]["lr"]
        self.optimizer.step_count = s["adam"]["step_count"]
        for k in self.optimizer.m:
            self.optimizer.m[k] = ck.arrays[f"adam_m/{k}"]
            self.optimizer.v[k] = ck.arrays[f"adam_v/{k}"]
        return self

    def train(self, callback=None):
        """Run to completion. ``callback(trainer)`` is called after each epoch."""
        while not self.finished():
            self.run_epoch()
            self.step_schedule()
            if callback is not None:
                callback(self)
        return self.net, self.report


def train(train_set, net_config, train_config, heldout=()):
    """Convenience wrapper: returns ``(net, report)``."""
    return Trainer(net_config, train_config, train_set, heldout).train()
