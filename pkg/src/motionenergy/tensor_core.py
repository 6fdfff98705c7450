"""Dense rank-3 tensor kernels and their adjoints.

Tensors are plain ``float64`` numpy arrays laid out ``(height, width,
channels)``. Most functions also accept a leading batch axis
``(batch, height, width, channels)`` and return the same rank they were given.

Conventions used throughout:

* convolutions are correlations (no kernel flip), stride 1, and pad the
  input by replicating its border pixels, so output size equals input size;
* bilinear resizing maps source corners onto target corners;
* kernel rotation reads zero outside the kernel support;
* rotation angles are measured in image coordinates (x to the right, y down),
  so a positive angle turns the +x axis towards +y.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from fractions import Fraction
from functools import lru_cache

import numpy as np

from . import _backend


class ContractViolation(ValueError):
    """Raised when an operation's shape or record preconditions are not met."""


def _batched(x):
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 3:
        return x[None], True
    if x.ndim == 4:
        return x, False
    raise ContractViolation(f"expected a rank-3 or rank-4 tensor, got shape {x.shape}")


def _unbatch(x, squeeze):
    return x[0] if squeeze else x


def _check_odd(ky, kx):
    if ky % 2 == 0 or kx % 2 == 0:
        raise ContractViolation(f"kernel sizes must be odd, got {ky}x{kx}")


# ---------------------------------------------------------------------------
# padding
# ---------------------------------------------------------------------------


def pad_replicate(x, py, px):
    """Pad the two spatial axes of a batched tensor by edge replication."""
    return np.pad(x, ((0, 0), (py, py), (px, px), (0, 0)), mode="edge")


def _fold_axis(g, p, axis):
    if p == 0:
        return g
    n = g.shape[axis] - 2 * p
    core = np.take(g, np.arange(p, p + n), axis=axis).copy()
    lo = np.take(g, np.arange(0, p), axis=axis).sum(axis=axis)
    hi = np.take(g, np.arange(p + n, p + n + p), axis=axis).sum(axis=axis)
    idx_first = [slice(None)] * g.ndim
    idx_first[axis] = 0
    idx_last = [slice(None)] * g.ndim
    idx_last[axis] = n - 1
    core[tuple(idx_first)] += lo
    core[tuple(idx_last)] += hi
    return core


def pad_replicate_adjoint(gp, py, px):
    """Adjoint of :func:`pad_replicate`: pile padded gradients onto the edges."""
    return _fold_axis(_fold_axis(gp, py, 1), px, 2)


# ---------------------------------------------------------------------------
# convolutions
# ---------------------------------------------------------------------------


def conv_bank(x, bank, bias=None):
    """Correlate a tensor with a full kernel bank.

    ``bank`` has shape ``(ky, kx, c_in, c_out)``; output channel ``o`` is
    ``sum_c x[..., c] * bank[:, :, c, o] + bias[o]``.
    """
    xb, squeeze = _batched(x)
    bank = np.asarray(bank, dtype=np.float64)
    if bank.ndim != 4:
        raise ContractViolation(f"bank must be (ky, kx, c_in, c_out), got {bank.shape}")
    ky, kx, ci, co = bank.shape
    _check_odd(ky, kx)
    if xb.shape[3] != ci:
        raise ContractViolation(f"input has {xb.shape[3]} channels, bank expects {ci}")
    if ky == 1 and kx == 1:
        out = xb @ bank[0, 0]
    else:
        out = _backend.conv_forward(pad_replicate(xb, ky // 2, kx // 2), bank)
    if bias is not None:
        out = out + np.asarray(bias, dtype=np.float64)
    return _unbatch(out, squeeze)


def conv_bank_grad(x, bank, grad_out, need_input=True):
    """Gradients of :func:`conv_bank` w.r.t. input, bank and bias."""
    xb, squeeze = _batched(x)
    gb, _ = _batched(grad_out)
    bank = np.asarray(bank, dtype=np.float64)
    ky, kx, ci, co = bank.shape
    if gb.shape[:3] != xb.shape[:3] or gb.shape[3] != co:
        raise ContractViolation(f"gradient shape {gb.shape} does not match output of {xb.shape} * {bank.shape}")
    dbias = gb.sum(axis=(0, 1, 2))
    if ky == 1 and kx == 1:
        flat_x = xb.reshape(-1, ci)
        flat_g = gb.reshape(-1, co)
        dbank = (flat_x.T @ flat_g)[None, None]
        dx = gb @ bank[0, 0].T if need_input else None
    else:
        py, px = ky // 2, kx // 2
        xp = pad_replicate(xb, py, px)
        dbank = _backend.conv_weight_grad(xp, np.ascontiguousarray(gb), ky, kx)
        dx = None
        if need_input:
            dxp = _backend.conv_input_grad(np.ascontiguousarray(gb), bank, xp.shape[1], xp.shape[2])
            dx = pad_replicate_adjoint(dxp, py, px)
    if dx is not None:
        dx = _unbatch(dx, squeeze)
    return dx, dbank, dbias


def _plane_kernel(kernel):
    k = np.asarray(kernel, dtype=np.float64)
    if k.ndim == 3:
        if k.shape[2] != 1:
            raise ContractViolation(f"conv2d expects a depth-1 kernel, got depth {k.shape[2]}")
        k = k[:, :, 0]
    if k.ndim != 2:
        raise ContractViolation(f"conv2d kernel must be 2-D, got shape {k.shape}")
    _check_odd(*k.shape)
    return k


def conv2d(x, kernel):
    """Apply one 2-D kernel to every channel of ``x`` independently."""
    xb, squeeze = _batched(x)
    k = _plane_kernel(kernel)
    b, h, w, c = xb.shape
    planes = xb.transpose(0, 3, 1, 2).reshape(b * c, h, w, 1)
    out = conv_bank(planes, k[:, :, None, None])
    out = out.reshape(b, c, h, w).transpose(0, 2, 3, 1)
    return _unbatch(out, squeeze)


def conv2d_grad(x, kernel, grad_out):
    """Returns ``(d_input, d_kernel)`` for :func:`conv2d`."""
    xb, squeeze = _batched(x)
    gb, _ = _batched(grad_out)
    k = _plane_kernel(kernel)
    b, h, w, c = xb.shape
    if gb.shape != xb.shape:
        raise ContractViolation(f"gradient shape {gb.shape} != input shape {xb.shape}")
    planes = xb.transpose(0, 3, 1, 2).reshape(b * c, h, w, 1)
    gplanes = gb.transpose(0, 3, 1, 2).reshape(b * c, h, w, 1)
    dx, dk, _ = conv_bank_grad(planes, k[:, :, None, None], gplanes)
    dx = dx.reshape(b, c, h, w).transpose(0, 2, 3, 1)
    return _unbatch(dx, squeeze), dk[:, :, 0, 0]


def conv3d(x, kernel, bias=0.0):
    """Sum-over-channels correlation producing a single output plane.

    ``kernel`` is ``(ky, kx, depth)`` with ``depth`` equal to the channel count.
    """
    k = np.asarray(kernel, dtype=np.float64)
    if k.ndim != 3:
        raise ContractViolation(f"conv3d kernel must be (ky, kx, depth), got {k.shape}")
    return conv_bank(x, k[:, :, :, None], np.array([bias], dtype=np.float64))


def conv3d_grad(x, kernel, grad_out):
    """Returns ``(d_input, d_kernel, d_bias)`` for :func:`conv3d`."""
    k = np.asarray(kernel, dtype=np.float64)
    dx, dk, db = conv_bank_grad(x, k[:, :, :, None], grad_out)
    return dx, dk[:, :, :, 0], float(db[0])


def gaussian_kernel_1d(sigma, radius=None):
    """Unit-sum sampled Gaussian of half-width ``radius`` (default ``ceil(3 sigma)``)."""
    if radius is None:
        radius = int(math.ceil(3.0 * sigma))
    t = np.arange(-radius, radius + 1, dtype=np.float64)
    g = np.exp(-0.5 * (t / sigma) ** 2)
    return g / g.sum()


def separable_filter(x, k_y, k_x):
    """Per-channel correlation with the outer product ``k_y[:, None] * k_x[None, :]``."""
    xb, squeeze = _batched(x)
    k_y = np.asarray(k_y, dtype=np.float64)
    k_x = np.asarray(k_x, dtype=np.float64)
    ry, rx = len(k_y) // 2, len(k_x) // 2
    h, w = xb.shape[1:3]
    xp = np.pad(xb, ((0, 0), (ry, ry), (0, 0), (0, 0)), mode="edge")
    tmp = np.zeros_like(xb)
    for t, c in enumerate(k_y):
        tmp += c * xp[:, t : t + h]
    tp = np.pad(tmp, ((0, 0), (0, 0), (rx, rx), (0, 0)), mode="edge")
    out = np.zeros_like(xb)
    for t, c in enumerate(k_x):
        out += c * tp[:, :, t : t + w]
    return _unbatch(out, squeeze)


def box_mean(x, size):
    """Mean over a ``size`` x ``size`` window, replicate-padded."""
    k = np.full(size, 1.0 / size)
    return separable_filter(x, k, k)


# ---------------------------------------------------------------------------
# pooling
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ArgmaxRecord:
    """Winning input position for every pooled output value."""

    flat_index: np.ndarray  # (B, oh, ow, C) index into the flattened (B, H, W, C) input
    input_shape: tuple


def _pool_offsets(window):
    lo = (window - 1) // 2
    return lo, window - 1 - lo


def maxpool(x, window, stride=2):
    """Per-channel max over ``window`` x ``window`` regions centred on ``(2i, 2j)``.

    Output is ``ceil(H/2) x ceil(W/2)``. Even windows extend one pixel further
    towards larger indices. Returns ``(pooled, record)``.
    """
    if stride != 2:
        raise ContractViolation("maxpool stride is fixed at 2")
    if window < 1:
        raise ContractViolation(f"window must be >= 1, got {window}")
    xb, squeeze = _batched(x)
    b, h, w, c = xb.shape
    oh, ow = (h + 1) // 2, (w + 1) // 2
    lo, hi = _pool_offsets(window)
    # extra bottom/right row so 2*(oh-1)+hi stays inside for odd sizes
    xp = np.pad(xb, ((0, 0), (lo, hi + 1), (lo, hi + 1), (0, 0)), mode="edge")
    best, arg = _backend.maxpool_forward(np.ascontiguousarray(xp), window, oh, ow)
    dy = arg // window - lo
    dx = arg % window - lo
    ii = np.clip(2 * np.arange(oh)[None, :, None, None] + dy, 0, h - 1)
    jj = np.clip(2 * np.arange(ow)[None, None, :, None] + dx, 0, w - 1)
    bb = np.arange(b)[:, None, None, None]
    cc = np.arange(c)[None, None, None, :]
    flat = ((bb * h + ii) * w + jj) * c + cc
    record = ArgmaxRecord(flat_index=flat, input_shape=(b, h, w, c))
    return _unbatch(best, squeeze), record


def maxpool_grad(grad_out, record):
    """Route pooled gradients back to the winning input positions."""
    if record is None:
        raise ContractViolation("maxpool_grad needs the ArgmaxRecord from the forward pass")
    gb, squeeze = _batched(grad_out)
    if gb.shape != record.flat_index.shape:
        raise ContractViolation(f"gradient shape {gb.shape} != pooled shape {record.flat_index.shape}")
    size = int(np.prod(record.input_shape))
    dx = np.bincount(record.flat_index.ravel(), weights=gb.ravel(), minlength=size)
    return _unbatch(dx.reshape(record.input_shape), squeeze)


# ---------------------------------------------------------------------------
# bilinear resize / warp
# ---------------------------------------------------------------------------


def _corner_coords(n_out, n_in):
    if n_out == 1:
        return np.array([(n_in - 1) / 2.0])
    return np.arange(n_out) * ((n_in - 1) / (n_out - 1))


def _lerp_axis(x, coords, axis):
    n_in = x.shape[axis]
    i0 = np.clip(np.floor(coords).astype(np.int64), 0, n_in - 1)
    i1 = np.minimum(i0 + 1, n_in - 1)
    f = coords - i0
    shape = [1] * x.ndim
    shape[axis] = len(coords)
    f = f.reshape(shape)
    a = np.take(x, i0, axis=axis)
    b = np.take(x, i1, axis=axis)
    return a + f * (b - a)


def resize_bilinear(x, new_height, new_width):
    """Corner-aligned bilinear resize of every channel."""
    if new_height < 1 or new_width < 1:
        raise ContractViolation("target size must be >= 1")
    xb, squeeze = _batched(x)
    h, w = xb.shape[1:3]
    if (h, w) == (new_height, new_width):
        return _unbatch(xb.copy(), squeeze)
    out = _lerp_axis(xb, _corner_coords(new_height, h), 1)
    out = _lerp_axis(out, _corner_coords(new_width, w), 2)
    return _unbatch(out, squeeze)


@lru_cache(maxsize=256)
def _interp_matrix(n_out, n_in):
    m = np.zeros((n_out, n_in))
    coords = _corner_coords(n_out, n_in)
    i0 = np.clip(np.floor(coords).astype(np.int64), 0, n_in - 1)
    i1 = np.minimum(i0 + 1, n_in - 1)
    f = coords - i0
    np.add.at(m, (np.arange(n_out), i0), 1.0 - f)
    np.add.at(m, (np.arange(n_out), i1), f)
    m.setflags(write=False)
    return m


def resize_bilinear_grad(grad_out, input_height, input_width):
    """Adjoint of :func:`resize_bilinear` for an input of the given size."""
    gb, squeeze = _batched(grad_out)
    oh, ow = gb.shape[1:3]
    if (oh, ow) == (input_height, input_width):
        return _unbatch(gb.copy(), squeeze)
    my = _interp_matrix(oh, input_height)
    mx = _interp_matrix(ow, input_width)
    out = np.einsum("ih,bijc,jw->bhwc", my, gb, mx, optimize=True)
    return _unbatch(out, squeeze)


def warp_bilinear(frame, flow, scale=1.0):
    """Resample ``frame`` at ``(i + scale*v, j + scale*u)``, clamping to the border.

    ``frame`` is ``(H, W)`` or ``(H, W, 1)``; ``flow`` is ``(H, W, 2)`` holding
    ``(u, v)``.
    """
    f = np.asarray(frame, dtype=np.float64)
    keep_channel = f.ndim == 3
    if keep_channel:
        if f.shape[2] != 1:
            raise ContractViolation("warp_bilinear expects a single-channel plane")
        f = f[:, :, 0]
    flow = np.asarray(flow, dtype=np.float64)
    h, w = f.shape
    if flow.shape != (h, w, 2):
        raise ContractViolation(f"flow shape {flow.shape} does not match frame {(h, w)}")
    ys = np.arange(h, dtype=np.float64)[:, None] + scale * flow[:, :, 1]
    xs = np.arange(w, dtype=np.float64)[None, :] + scale * flow[:, :, 0]
    ys = np.clip(ys, 0.0, h - 1.0)
    xs = np.clip(xs, 0.0, w - 1.0)
    out = _backend.bilinear_gather(f, ys, xs)
    return out[:, :, None] if keep_channel else out


# ---------------------------------------------------------------------------
# kernel rotation
# ---------------------------------------------------------------------------


@lru_cache(maxsize=512)
def _rotation_matrix(size, angle):
    """Bilinear sampling matrix for a residual rotation of a size x size kernel."""
    c = (size - 1) / 2.0
    cos_a, sin_a = math.cos(angle), math.sin(angle)
    m = np.zeros((size * size, size * size))
    for y in range(size):
        for x in range(size):
            dx, dy = x - c, y - c
            sx = cos_a * dx + sin_a * dy + c
            sy = -sin_a * dx + cos_a * dy + c
            x0, y0 = math.floor(sx), math.floor(sy)
            fx, fy = sx - x0, sy - y0
            for yy, wy in ((y0, 1.0 - fy), (y0 + 1, fy)):
                for xx, wx in ((x0, 1.0 - fx), (x0 + 1, fx)):
                    if 0 <= yy < size and 0 <= xx < size and wy * wx != 0.0:
                        m[y * size + x, yy * size + xx] += wy * wx
    m.setflags(write=False)
    return m


@lru_cache(maxsize=512)
def _rotation_taps(size, angle):
    """The rows of :func:`_rotation_matrix` as (index, weight) pairs, 4 per output pixel."""
    m = _rotation_matrix(size, angle)
    idx = np.zeros((size * size, 4), dtype=np.int64)
    wts = np.zeros((size * size, 4))
    for r in range(size * size):
        cols = np.flatnonzero(m[r])
        idx[r, : len(cols)] = cols
        wts[r, : len(cols)] = m[r, cols]
    idx.setflags(write=False)
    wts.setflags(write=False)
    return idx, wts


def _split_angle(angle):
    q = int(round(angle / (math.pi / 2)))
    residual = angle - q * (math.pi / 2)
    if abs(residual) < 1e-12:
        residual = 0.0
    return q, residual


def _split_turn(turn):
    turn = Fraction(turn)
    q = round(4 * turn)
    return int(q), 2.0 * math.pi * float(turn - Fraction(q, 4))


def _apply_rotation(kernel, q, residual):
    k = np.asarray(kernel, dtype=np.float64)
    squeeze = k.ndim == 2
    if squeeze:
        k = k[:, :, None]
    ky, kx = k.shape[:2]
    if ky != kx:
        raise ContractViolation(f"rotation needs a square kernel, got {ky}x{kx}")
    if residual != 0.0:
        # fixed-order 4-tap sum rather than a matmul: BLAS rounding depends on
        # memory layout, and tied copies must come out bit-identical
        idx, wts = _rotation_taps(ky, residual)
        flat = k.reshape(ky * kx, -1)
        acc = wts[:, 0, None] * flat[idx[:, 0]]
        for t in range(1, 4):
            acc = acc + wts[:, t, None] * flat[idx[:, t]]
        k = acc.reshape(k.shape)
    # positive quarter turn in image coordinates == numpy's clockwise rot90
    out = np.rot90(k, k=-q, axes=(0, 1))
    out = np.ascontiguousarray(out)
    return out[:, :, 0] if squeeze else out


def _apply_rotation_adjoint(kernel, q, residual):
    k = np.asarray(kernel, dtype=np.float64)
    squeeze = k.ndim == 2
    if squeeze:
        k = k[:, :, None]
    k = np.ascontiguousarray(np.rot90(k, k=q, axes=(0, 1)))
    if residual != 0.0:
        size = k.shape[0]
        m = _rotation_matrix(size, residual)
        k = (m.T @ k.reshape(size * size, -1)).reshape(k.shape)
    return k[:, :, 0] if squeeze else k


def rotate_bilinear(kernel, angle):
    """Rotate each depth slice of a square kernel about its centre.

    The rotation is split into whole quarter turns (exact index permutations)
    and a residual of at most 45 degrees sampled bilinearly, so multiples of
    pi/2 are exact.
    """
    q, residual = _split_angle(angle)
    return _apply_rotation(kernel, q, residual)


def rotate_bilinear_adjoint(kernel, angle):
    """Adjoint (transpose) of :func:`rotate_bilinear` at the same angle."""
    q, residual = _split_angle(angle)
    return _apply_rotation_adjoint(kernel, q, residual)


def rotate_turn(kernel, turn):
    """Rotate by an exact fraction of a full turn.

    Kernels rotated by turns that differ by a multiple of 1/4 are exact
    quarter-turn permutations of each other, bit for bit.
    """
    q, residual = _split_turn(turn)
    return _apply_rotation(kernel, q, residual)


def rotate_turn_adjoint(kernel, turn):
    q, residual = _split_turn(turn)
    return _apply_rotation_adjoint(kernel, q, residual)


def rot90_image(x, quarter_turns=1):
    """Rotate the spatial axes of a tensor by quarter turns (image coordinates)."""
    return np.ascontiguousarray(np.rot90(np.asarray(x), k=-quarter_turns, axes=(0, 1)))
