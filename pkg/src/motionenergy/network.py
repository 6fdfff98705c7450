"""The motion-energy network: forward and hand-written backward passes.

Pipeline for one scale (all tensors batched ``(B, H, W, C)``)::

    frames -> centre-surround -> local std normalisation
           -> motion filters (conv, MO channels) -> square -> max-pool /2
           -> orientation normalisation -> aperture conv -> ReLU

Scales are run on resized copies of the frames, upsampled to the half
resolution grid of scale 0, concatenated and decoded pixelwise into a
softmax over ``T x O`` motion hypotheses and a 2-D flow vector.

Flow values are always expressed in pixels/frame of the *input* resolution,
even though the network output lives on the half-resolution grid.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import asdict, dataclass, field, fields, replace
from fractions import Fraction

import numpy as np

from . import rotation
from .rotation import TiedLayerSpec
from .tensor_core import (
    ContractViolation,
    box_mean,
    conv_bank,
    conv_bank_grad,
    gaussian_kernel_1d,
    maxpool,
    maxpool_grad,
    resize_bilinear,
    resize_bilinear_grad,
    separable_filter,
    warp_bilinear,
)

PARAM_NAMES = ("h1", "b1", "h2", "b2", "h3", "b3", "h4")


@dataclass
class NetworkConfig:
    """Architecture constants plus the switches used by ablation presets."""

    frames: int = 3  # F
    size: int = 11  # w, spatial kernel size
    kernels: int = 4  # M, independent kernels per orientation
    orientations: int = 12  # O
    speeds: int = 8  # T
    num_scales: int = 10
    scale_factor: float = 1.0 / math.sqrt(2.0)
    recurrent_iters: int = 1
    epsilon: float = 0.01
    std_floor: float = 0.01
    target_speeds: tuple | None = None
    center_surround: bool = True
    local_norm: bool = True
    orientation_norm: bool = True
    phase_pooling: bool = True
    rectifier: str = "square"
    tied: bool = True
    fixed_h1: str | None = None

    def __post_init__(self):
        if self.target_speeds is not None:
            self.target_speeds = tuple(float(s) for s in self.target_speeds)
        self.validate()

    def validate(self):
        if self.size < 1 or self.size % 2 == 0:
            raise ValueError(f"kernel size w must be odd and positive, got {self.size}")
        if self.orientations < 2 or self.orientations % 2:
            raise ValueError(f"orientations O must be even, got {self.orientations}")
        if self.frames < 2:
            raise ValueError(f"need at least 2 frames, got {self.frames}")
        for name in ("kernels", "speeds", "num_scales", "recurrent_iters"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if not 0.0 < self.scale_factor < 1.0:
            raise ValueError("scale_factor must lie in (0, 1)")
        if self.rectifier not in ("square", "relu"):
            raise ValueError(f"rectifier must be 'square' or 'relu', got {self.rectifier!r}")
        if self.fixed_h1 not in (None, "gauss-deriv"):
            raise ValueError(f"unknown fixed_h1 {self.fixed_h1!r}")
        if self.target_speeds is not None and len(self.target_speeds) != self.speeds:
            raise ValueError(f"target_speeds needs {self.speeds} entries, got {len(self.target_speeds)}")

    def to_dict(self):
        d = asdict(self)
        if d["target_speeds"] is not None:
            d["target_speeds"] = list(d["target_speeds"])
        return d

    @classmethod
    def from_dict(cls, d):
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        return cls(**d)

    def replace(self, **changes):
        return replace(self, **changes)

    @property
    def center_index(self):
        """0-based index of frame ceil(F/2); flow is measured from it to the next frame."""
        return math.ceil(self.frames / 2) - 1

    @property
    def pool_window(self):
        return math.ceil(self.size / 4) if self.phase_pooling else 1

    @property
    def n_targets(self):
        return self.speeds * self.orientations

    def layer_specs(self):
        O, M, T, F, S, w = self.orientations, self.kernels, self.speeds, self.frames, self.num_scales, self.size
        return {
            "h1": TiedLayerSpec(1, O, F, M, w, spatially_rotated=True, oriented_input=False, tied=self.tied),
            "h2": TiedLayerSpec(O, O, M, M, w, spatially_rotated=True, tied=self.tied),
            "h3": TiedLayerSpec(O, O, M * S, T, 1, spatially_rotated=False, tied=self.tied),
            "h4": TiedLayerSpec(
                O, 2, T, 1, 1, spatially_rotated=False, tied=self.tied, out_turns=(Fraction(0), Fraction(1, 4))
            ),
        }


def target_vectors(speeds, orientations):
    """Classification targets, index ``o * T + t`` -> ``speed_t * (cos, sin)(2 pi o / O)``."""
    speeds = np.asarray(speeds, dtype=np.float64)
    theta = 2.0 * np.pi * np.arange(orientations) / orientations
    u = np.cos(theta)[:, None] * speeds[None, :]
    v = np.sin(theta)[:, None] * speeds[None, :]
    return np.stack([u.ravel(), v.ravel()], axis=1)


def gauss_derivative_h1(config):
    """Fixed spatiotemporal derivative-of-Gaussian kernels at orientation 0.

    Kernel ``m`` is the spatial x-derivative of order ``1 + m % 2`` times a
    temporal derivative of order ``1 - (m // 2) % 2``; sigma is w/4 in space
    and 0.8 frames in time.
    """
    w, F, M = config.size, config.frames, config.kernels
    r = w // 2
    s = np.arange(-r, r + 1, dtype=np.float64)
    sig = w / 4.0
    g = np.exp(-0.5 * (s / sig) ** 2)
    g /= g.sum()
    d1 = -s / sig**2 * g
    d2 = (s**2 / sig**4 - 1.0 / sig**2) * g
    t = np.arange(F, dtype=np.float64) - (F - 1) / 2.0
    gt = np.exp(-0.5 * (t / 0.8) ** 2)
    gt /= gt.sum()
    dt = -t / 0.8**2 * gt
    h1 = np.zeros((1, F, M, w, w))
    for m in range(M):
        spatial = np.outer(g, d1 if m % 2 == 0 else d2)  # (y, x)
        temporal = dt if (m // 2) % 2 == 0 else gt
        k = temporal[:, None, None] * spatial[None]
        h1[0, :, m] = k / np.abs(k).sum()
    return h1


def init_output_layer(speeds, config):
    """Canonical output weights whose decoded flow is the softmax-weighted target mean."""
    spec = config.layer_specs()["h4"]
    speeds = np.asarray(speeds, dtype=np.float64)
    h4 = np.zeros(spec.canonical_shape)
    for i in range(spec.in_groups):
        for j in range(spec.out_groups):
            cls = spec.class_table[i, j]
            rel = 2.0 * math.pi * float(spec.output_turns[j] - spec.in_turns[i])
            h4[cls, :, 0, 0, 0] = speeds * math.cos(rel)
    return h4


class MotionNet:
    """Canonical parameters plus a cache of their expanded kernel banks.

    ``params`` holds the only trainable state. Call :meth:`invalidate` (or
    :meth:`set_params`) after changing it so the expanded banks are rebuilt.
    """

    def __init__(self, config, params=None):
        self.config = config
        self.specs = config.layer_specs()
        self.params = params if params is not None else self.zero_params()
        self._banks = None

    def zero_params(self):
        p = {}
        for name in ("h1", "h2", "h3", "h4"):
            p[name] = np.zeros(self.specs[name].canonical_shape)
        for name, layer in (("b1", "h1"), ("b2", "h2"), ("b3", "h3")):
            p[name] = np.zeros(self.specs[layer].bias_shape)
        return p

    @classmethod
    def random(cls, config, seed=0, scale=1.0):
        """Random canonical weights; the output layer is set from the targets."""
        rng = np.random.default_rng(seed)
        net = cls(config)
        specs = net.specs
        p = net.params
        fan1 = config.size**2 * config.frames
        fan2 = config.size**2 * config.kernels * config.orientations
        fan3 = config.kernels * config.orientations * config.num_scales
        p["h1"] = rng.normal(0.0, scale / math.sqrt(fan1), specs["h1"].canonical_shape)
        p["h2"] = rng.normal(0.0, scale * 4.0 / math.sqrt(fan2), specs["h2"].canonical_shape)
        p["h3"] = rng.normal(0.0, scale * 4.0 / math.sqrt(fan3), specs["h3"].canonical_shape)
        p["b1"] = rng.normal(0.0, 0.01 * scale, specs["h1"].bias_shape)
        p["b2"] = rng.normal(0.0, 0.01 * scale, specs["h2"].bias_shape)
        p["b3"] = rng.normal(0.0, 0.01 * scale, specs["h3"].bias_shape)
        if config.fixed_h1 == "gauss-deriv":
            p["h1"] = expand_canonical_h1_fixed(config, specs["h1"])
            p["b1"] = np.zeros(specs["h1"].bias_shape)
        speeds = config.target_speeds
        if speeds is None:
            speeds = np.linspace(0.5, 1.5, config.speeds)
        p["h4"] = init_output_layer(speeds, config)
        net.invalidate()
        return net

    @property
    def targets(self):
        speeds = self.config.target_speeds
        if speeds is None:
            raise ContractViolation("classification targets not set on the config")
        return target_vectors(speeds, self.config.orientations)

    def set_params(self, params):
        self.params = params
        self.invalidate()

    def invalidate(self):
        self._banks = None

    def banks(self):
        if self._banks is None:
            p, s = self.params, self.specs
            self._banks = {
                "W1": rotation.expand(p["h1"], s["h1"]),
                "b1": rotation.expand_bias(p["b1"], s["h1"]),
                "W2": rotation.expand(p["h2"], s["h2"]),
                "b2": rotation.expand_bias(p["b2"], s["h2"]),
                "W3": rotation.expand(p["h3"], s["h3"])[0, 0],
                "b3": rotation.expand_bias(p["b3"], s["h3"]),
                "W4": rotation.expand(p["h4"], s["h4"])[0, 0],
            }
        return self._banks

    def copy(self):
        return MotionNet(self.config, {k: v.copy() for k, v in self.params.items()})

    def parameter_count(self):
        return int(sum(v.size for v in self.params.values()))


def expand_canonical_h1_fixed(config, spec):
    h1 = gauss_derivative_h1(config)
    if spec.tied:
        return h1
    # untied: every output orientation gets its own explicitly rotated copy
    out = np.zeros(spec.canonical_shape)
    full = rotation.expand(h1, replace(spec, tied=True))
    for j in range(spec.out_groups):
        block = full[:, :, :, j * spec.out_per_group : (j + 1) * spec.out_per_group]
        out[j] = block.transpose(2, 3, 0, 1)
    return out


# ---------------------------------------------------------------------------
# individual layers (batched)
# ---------------------------------------------------------------------------


def stack_input(frames):
    """Stack F grayscale frames into an ``(H, W, F)`` tensor."""
    frames = [np.asarray(f, dtype=np.float64) for f in frames]
    if len(frames) < 2:
        raise ContractViolation("need at least two frames")
    shape = frames[0].shape
    for f in frames:
        if f.ndim != 2:
            raise ContractViolation(f"frames must be 2-D grayscale images, got shape {f.shape}")
        if f.shape != shape:
            raise ContractViolation(f"frame sizes differ: {shape} vs {f.shape}")
    return np.stack(frames, axis=-1)


def center_surround(x, size):
    """Subtract a unit-sum Gaussian blur (sigma = size/3) from every channel."""
    g = gaussian_kernel_1d(size / 3.0)
    return np.asarray(x, dtype=np.float64) - separable_filter(x, g, g)


def local_std(x, size):
    m = box_mean(x, size)
    m2 = box_mean(np.asarray(x) ** 2, size)
    return np.sqrt(np.maximum(m2 - m * m, 0.0))


def local_contrast_norm(x, size, floor=0.01):
    """Divide by the local standard deviation over a size x size window."""
    return x / np.maximum(local_std(x, size), floor)


def square_and_pool(z, window):
    """Pointwise square then max-pool with stride 2. Returns ``(pooled, record)``."""
    return maxpool(np.asarray(z) ** 2, window)


def orientation_norm(x, orientations, epsilon):
    """Divide each channel by the sum over the O orientation variants of its kernel group."""
    x = np.asarray(x, dtype=np.float64)
    shape = x.shape
    grp = x.reshape(shape[:-1] + (orientations, shape[-1] // orientations))
    denom = grp.sum(axis=-2, keepdims=True) + epsilon
    return (grp / denom).reshape(shape)


def _orientation_norm_grad(x, g, orientations, epsilon):
    shape = x.shape
    gs = shape[:-1] + (orientations, shape[-1] // orientations)
    xg, gg = x.reshape(gs), g.reshape(gs)
    denom = xg.sum(axis=-2, keepdims=True) + epsilon
    dot = (gg * xg).sum(axis=-2, keepdims=True)
    return (gg / denom - dot / denom**2).reshape(shape)


def motion_filters(x, bank, bias):
    return conv_bank(x, bank, bias)


def aperture_smoothing(x, bank, bias):
    return np.maximum(conv_bank(x, bank, bias), 0.0)


def softmax(z):
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def decode(x, W3, b3, W4):
    """Pixelwise hidden layer, softmax and linear output. Returns ``(scores, dist, flow)``."""
    scores = x @ W3 + b3
    dist = softmax(scores)
    return scores, dist, dist @ W4


# ---------------------------------------------------------------------------
# traces
# ---------------------------------------------------------------------------


@dataclass
class ScaleCache:
    scale: int
    size: tuple
    x_norm: np.ndarray  # input of the motion filters
    z1: np.ndarray  # motion filter responses
    pool_record: object
    pooled: np.ndarray
    x_on: np.ndarray  # after orientation normalisation
    z2: np.ndarray  # aperture conv pre-activation
    pooled_size: tuple


@dataclass
class LayerTrace:
    """Everything the backward pass needs from one forward evaluation."""

    input_shape: tuple
    used_scales: list
    scales: list
    features: np.ndarray
    scores: np.ndarray
    dist: np.ndarray
    flow: np.ndarray
    banks: dict
    rows: np.ndarray
    warnings: list = field(default_factory=list)
    accumulated: np.ndarray | None = None  # flow the frames were warped by (half res)


def _scaled_size(n, factor):
    # keep the parity of n so pooled grids stay symmetric under 90 degree turns
    m = max(1, int(round(n * factor)))
    if (m - n) % 2:
        m = m + 1 if n * factor > m else m - 1
        if m < 1:
            m += 2
    return m


def scale_sizes(height, width, config):
    return [
        (_scaled_size(height, config.scale_factor**s), _scaled_size(width, config.scale_factor**s))
        for s in range(config.num_scales)
    ]


def _features_forward(frames, banks, config, scale):
    x = frames
    if config.center_surround:
        x = center_surround(x, config.size)
    if config.local_norm:
        x = local_contrast_norm(x, config.size, config.std_floor)
    z1 = conv_bank(x, banks["W1"], banks["b1"])
    r = z1 * z1 if config.rectifier == "square" else np.maximum(z1, 0.0)
    pooled, record = maxpool(r, config.pool_window)
    x_on = orientation_norm(pooled, config.orientations, config.epsilon) if config.orientation_norm else pooled
    z2 = conv_bank(x_on, banks["W2"], banks["b2"])
    out = np.maximum(z2, 0.0)
    cache = ScaleCache(
        scale=scale,
        size=frames.shape[1:3],
        x_norm=x,
        z1=z1,
        pool_record=record,
        pooled=pooled,
        x_on=x_on,
        z2=z2,
        pooled_size=out.shape[1:3],
    )
    return out, cache


def _features_backward(g_out, cache, banks, config):
    g2 = g_out * (cache.z2 > 0)
    g_on, dW2, db2 = conv_bank_grad(cache.x_on, banks["W2"], g2)
    if config.orientation_norm:
        g_pool = _orientation_norm_grad(cache.pooled, g_on, config.orientations, config.epsilon)
    else:
        g_pool = g_on
    g_r = maxpool_grad(g_pool, cache.pool_record)
    if config.rectifier == "square":
        g1 = 2.0 * cache.z1 * g_r
    else:
        g1 = g_r * (cache.z1 > 0)
    _, dW1, db1 = conv_bank_grad(cache.x_norm, banks["W1"], g1, need_input=False)
    return dW1, db1, dW2, db2


def _decode_rows(config, used):
    O, S, M = config.orientations, config.num_scales, config.kernels
    return np.array([o * S * M + s * M + m for o in range(O) for s in used for m in range(M)], dtype=np.int64)


def forward_multiscale(frames, net, scales=None):
    """Run the pyramid and decode once.

    ``frames`` is ``(H, W, F)`` or ``(B, H, W, F)``. Returns
    ``(dist, flow, trace)`` at half resolution.
    """
    config = net.config
    x = np.asarray(frames, dtype=np.float64)
    squeeze = x.ndim == 3
    if squeeze:
        x = x[None]
    if x.ndim != 4 or x.shape[3] != config.frames:
        raise ContractViolation(f"expected (B, H, W, {config.frames}) frames, got {np.shape(frames)}")
    b, h, w, _ = x.shape
    banks = net.banks()
    sizes = scale_sizes(h, w, config)
    wanted = range(config.num_scales) if scales is None else scales
    half = ((h + 1) // 2, (w + 1) // 2)
    used, caches, feats, notes = [], [], [], []
    for s in wanted:
        hs, ws = sizes[s]
        if min(hs, ws) < config.size:
            msg = f"scale {s} ({hs}x{ws}) is smaller than the {config.size}px kernel; skipped"
            notes.append(msg)
            warnings.warn(msg, RuntimeWarning, stacklevel=2)
            continue
        xs = resize_bilinear(x, hs, ws)
        out, cache = _features_forward(xs, banks, config, s)
        feats.append(resize_bilinear(out, *half))
        caches.append(cache)
        used.append(s)
    if not used:
        raise ContractViolation(f"input {h}x{w} is smaller than the {config.size}px kernel at every scale")
    O, M = config.orientations, config.kernels
    stacked = np.stack([f.reshape(b, *half, O, M) for f in feats], axis=4)
    features = stacked.reshape(b, *half, O * len(used) * M)
    rows = _decode_rows(config, used)
    scores, dist, flow = decode(features, banks["W3"][rows], banks["b3"], banks["W4"])
    trace = LayerTrace(
        input_shape=x.shape,
        used_scales=used,
        scales=caches,
        features=features,
        scores=scores,
        dist=dist,
        flow=flow,
        banks=banks,
        rows=rows,
        warnings=notes,
    )
    if squeeze:
        return dist[0], flow[0], trace
    return dist, flow, trace


def forward_single_scale(frames, net):
    """Scale 0 only: the plain network without the pyramid."""
    return forward_multiscale(frames, net, scales=[0])


def warp_frames(frames, flow_full, center_index):
    """Warp frame k by ``flow * (k - center)`` so the centre frame stays fixed."""
    out = np.empty_like(frames)
    for n in range(frames.shape[0]):
        for k in range(frames.shape[3]):
            offset = k - center_index
            if offset == 0:
                out[n, :, :, k] = frames[n, :, :, k]
            else:
                out[n, :, :, k] = warp_bilinear(frames[n, :, :, k], flow_full[n], float(offset))
    return out


def forward_recurrent(frames, net, iters=None, scales=None):
    """Iteratively re-estimate residual flow on warped frames.

    Returns ``(flow, traces)``: the summed half-resolution flow and one
    :class:`LayerTrace` per unfolded iteration (``trace.flow`` is that
    iteration's residual, ``trace.accumulated`` the flow it started from).
    """
    config = net.config
    x = np.asarray(frames, dtype=np.float64)
    squeeze = x.ndim == 3
    if squeeze:
        x = x[None]
    iters = config.recurrent_iters if iters is None else iters
    if iters < 1:
        raise ContractViolation("need at least one recurrent iteration")
    b, h, w, _ = x.shape
    acc = np.zeros((b, (h + 1) // 2, (w + 1) // 2, 2))
    traces = []
    for r in range(iters):
        if r == 0:
            xin = x
        else:
            xin = warp_frames(x, resize_bilinear(acc, h, w), config.center_index)
        _, residual, trace = forward_multiscale(xin, net, scales=scales)
        trace.accumulated = acc.copy()
        acc = acc + residual
        traces.append(trace)
    return (acc[0] if squeeze else acc), traces


def upsample_flow(flow, height, width):
    """Bilinear upsampling of a half-resolution flow to ``height x width``."""
    return resize_bilinear(flow, height, width)


def estimate_flow(frames, net, iters=None, scales=None, full_resolution=True):
    """Convenience inference: returns ``(flow, dist)`` for an ``(H, W, F)`` stack."""
    frames = np.asarray(frames, dtype=np.float64)
    flow, traces = forward_recurrent(frames, net, iters=iters, scales=scales)
    dist = traces[-1].dist[0]
    if full_resolution:
        flow = upsample_flow(flow, *frames.shape[:2])
    return flow, dist


# ---------------------------------------------------------------------------
# backward
# ---------------------------------------------------------------------------


def _as_batched(g, ndim):
    if g is None:
        return None
    g = np.asarray(g, dtype=np.float64)
    return g[None] if g.ndim == ndim - 1 else g


def backward_trace(trace, net, d_dist=None, d_flow=None):
    """Gradients of one forward evaluation w.r.t. the canonical parameters.

    ``d_dist`` and ``d_flow`` are the loss cotangents of the distribution and
    of the decoded flow; either may be ``None``.
    """
    if trace is None:
        raise ContractViolation("backward needs the LayerTrace from the forward pass")
    config, specs = net.config, net.specs
    banks = trace.banks
    p = trace.dist
    d_dist = _as_batched(d_dist, p.ndim)
    d_flow = _as_batched(d_flow, p.ndim)
    W4 = banks["W4"]
    dp = np.zeros_like(p) if d_dist is None else d_dist.copy()
    dW4 = np.zeros_like(W4)
    if d_flow is not None:
        dp += d_flow @ W4.T
        dW4 = p.reshape(-1, p.shape[-1]).T @ d_flow.reshape(-1, 2)
    dz = p * (dp - (p * dp).sum(axis=-1, keepdims=True))
    feats = trace.features
    W3u = banks["W3"][trace.rows]
    dW3 = np.zeros_like(banks["W3"])
    dW3[trace.rows] = feats.reshape(-1, feats.shape[-1]).T @ dz.reshape(-1, dz.shape[-1])
    db3 = dz.sum(axis=(0, 1, 2))
    dfeat = dz @ W3u.T

    b = feats.shape[0]
    half = feats.shape[1:3]
    O, M = config.orientations, config.kernels
    n_used = len(trace.used_scales)
    dstack = dfeat.reshape(b, *half, O, n_used, M)
    dW1 = np.zeros_like(banks["W1"])
    db1 = np.zeros_like(banks["b1"])
    dW2 = np.zeros_like(banks["W2"])
    db2 = np.zeros_like(banks["b2"])
    for n, cache in enumerate(trace.scales):
        g = dstack[:, :, :, :, n, :].reshape(b, *half, O * M)
        g = resize_bilinear_grad(g, *cache.pooled_size)
        a, bb, c, d = _features_backward(g, cache, banks, config)
        dW1 += a
        db1 += bb
        dW2 += c
        db2 += d
    return {
        "h1": rotation.fold_gradients(dW1, specs["h1"], reduce="sum"),
        "b1": rotation.fold_bias_gradient(db1, specs["h1"]),
        "h2": rotation.fold_gradients(dW2, specs["h2"], reduce="sum"),
        "b2": rotation.fold_bias_gradient(db2, specs["h2"]),
        "h3": rotation.fold_gradients(dW3[None, None], specs["h3"], reduce="sum"),
        "b3": rotation.fold_bias_gradient(db3, specs["h3"]),
        "h4": rotation.fold_gradients(dW4[None, None], specs["h4"], reduce="sum"),
    }


def backward(traces, net, d_dists=None, d_flows=None):
    """Sum of per-iteration gradients; the warps are treated as constants."""
    if not traces:
        raise ContractViolation("backward needs at least one LayerTrace")
    n = len(traces)
    d_dists = d_dists if d_dists is not None else [None] * n
    d_flows = d_flows if d_flows is not None else [None] * n
    total = None
    for trace, dd, df in zip(traces, d_dists, d_flows):
        g = backward_trace(trace, net, dd, df)
        if total is None:
            total = g
        else:
            for k in total:
                total[k] += g[k]
    return total
