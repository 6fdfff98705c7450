"""Middlebury ``.flo`` files, EPE/AAE metrics and flow/distribution rendering."""

from __future__ import annotations

import csv
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image

FLO_MAGIC = b"PIEH"
UNKNOWN_FLOW_THRESHOLD = 1e9
UNKNOWN_FLOW = 1e10


class FloFormatError(ValueError):
    pass


# ---------------------------------------------------------------------------
# .flo
# ---------------------------------------------------------------------------


def read_flo(data):
    """Decode ``.flo`` bytes into ``(flow, mask)``.

    ``flow`` is float64 ``(H, W, 2)`` holding the stored float32 values
    verbatim (sentinels included); ``mask`` is False where either component
    exceeds the unknown-flow threshold.
    """
    data = bytes(data)
    if len(data) < 12:
        raise FloFormatError("truncated header")
    if data[:4] != FLO_MAGIC:
        raise FloFormatError(f"bad magic {data[:4]!r}")
    width, height = struct.unpack("<ii", data[4:12])
    if width <= 0 or height <= 0:
        raise FloFormatError(f"bad dimensions {width}x{height}")
    n = width * height * 2
    if len(data) < 12 + 4 * n:
        raise FloFormatError(f"truncated payload: need {4 * n} bytes, have {len(data) - 12}")
    flow = np.frombuffer(data, dtype="<f4", count=n, offset=12).reshape(height, width, 2).astype(np.float64)
    mask = (np.abs(flow) <= UNKNOWN_FLOW_THRESHOLD).all(axis=-1)
    return flow, mask


def write_flo(flow, mask=None):
    """Encode a flow field; invalid pixels without a sentinel get ``1e10``."""
    flow = np.asarray(flow, dtype=np.float64)
    if flow.ndim != 3 or flow.shape[2] != 2:
        raise ValueError(f"flow must be (H, W, 2), got {flow.shape}")
    out = flow.astype("<f4")
    if mask is not None:
        invalid = ~np.asarray(mask, dtype=bool)
        already = (np.abs(out) > UNKNOWN_FLOW_THRESHOLD).any(axis=-1)
        fill = invalid & ~already
        out[fill] = UNKNOWN_FLOW
    h, w = flow.shape[:2]
    return FLO_MAGIC + struct.pack("<ii", w, h) + out.tobytes()


def read_flo_file(path):
    return read_flo(Path(path).read_bytes())


def write_flo_file(path, flow, mask=None):
    Path(path).write_bytes(write_flo(flow, mask))


# ---------------------------------------------------------------------------
# metrics
# ---------------------------------------------------------------------------


def _valid(flow, gt, mask):
    flow = np.asarray(flow, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    if flow.shape != gt.shape:
        raise ValueError(f"flow {flow.shape} and ground truth {gt.shape} differ")
    if mask is None:
        mask = np.ones(flow.shape[:-1], dtype=bool)
    mask = np.asarray(mask, dtype=bool)
    if not mask.any():
        raise ValueError("no valid pixels")
    return flow[mask], gt[mask]


def epe(flow, gt, mask=None):
    """Mean end-point error over valid pixels."""
    f, g = _valid(flow, gt, mask)
    return float(np.mean(np.hypot(f[:, 0] - g[:, 0], f[:, 1] - g[:, 1])))


def aae(flow, gt, mask=None):
    """Mean angle in degrees between ``(u, v, 1)`` and ``(u*, v*, 1)``."""
    f, g = _valid(flow, gt, mask)
    u, v, gu, gv = f[:, 0], f[:, 1], g[:, 0], g[:, 1]
    dot = u * gu + v * gv + 1.0
    cross = np.sqrt((v - gv) ** 2 + (gu - u) ** 2 + (u * gv - v * gu) ** 2)
    return float(np.mean(np.degrees(np.arctan2(cross, dot))))


@dataclass
class MetricReport:
    name: str
    epe: float
    aae: float
    pixels: int


def evaluate(flow, gt, mask=None, name=""):
    if mask is None:
        mask = np.ones(np.shape(gt)[:-1], dtype=bool)
    return MetricReport(name, epe(flow, gt, mask), aae(flow, gt, mask), int(np.count_nonzero(mask)))


def write_metric_csv(path, reports):
    """Per-sequence rows plus a pixel-weighted ``mean`` row."""
    reports = list(reports)
    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh)
        wr.writerow(["sequence", "epe", "aae", "pixels"])
        for r in reports:
            wr.writerow([r.name, f"{r.epe:.6f}", f"{r.aae:.6f}", r.pixels])
        if reports:
            mean_epe = float(np.mean([r.epe for r in reports]))
            mean_aae = float(np.mean([r.aae for r in reports]))
            wr.writerow(["mean", f"{mean_epe:.6f}", f"{mean_aae:.6f}", sum(r.pixels for r in reports)])


# ---------------------------------------------------------------------------
# colour wheel
# ---------------------------------------------------------------------------


def make_colorwheel():
    """The 55-entry Middlebury colour wheel (RY, YG, GC, CB, BM, MR)."""
    RY, YG, GC, CB, BM, MR = 15, 6, 4, 11, 13, 6
    wheel = np.zeros((RY + YG + GC + CB + BM + MR, 3))
    col = 0
    wheel[0:RY, 0] = 255
    wheel[0:RY, 1] = np.floor(255 * np.arange(RY) / RY)
    col += RY
    wheel[col : col + YG, 0] = 255 - np.floor(255 * np.arange(YG) / YG)
    wheel[col : col + YG, 1] = 255
    col += YG
    wheel[col : col + GC, 1] = 255
    wheel[col : col + GC, 2] = np.floor(255 * np.arange(GC) / GC)
    col += GC
    wheel[col : col + CB, 1] = 255 - np.floor(255 * np.arange(CB) / CB)
    wheel[col : col + CB, 2] = 255
    col += CB
    wheel[col : col + BM, 2] = 255
    wheel[col : col + BM, 0] = np.floor(255 * np.arange(BM) / BM)
    col += BM
    wheel[col : col + MR, 2] = 255 - np.floor(255 * np.arange(MR) / MR)
    wheel[col : col + MR, 0] = 255
    return wheel


def flow_to_color(flow, max_magnitude=None, mask=None):
    """Render flow as an RGB ``uint8`` image on the Middlebury wheel.

    Hue encodes direction, saturation ``|flow| / max_magnitude`` (clamped to 1).
    ``max_magnitude`` defaults to the 99th percentile of the magnitudes.
    """
    flow = np.asarray(flow, dtype=np.float64)
    u, v = flow[:, :, 0], flow[:, :, 1]
    rad = np.hypot(u, v)
    if mask is not None:
        mask = np.asarray(mask, dtype=bool)
        u = np.where(mask, u, 0.0)
        v = np.where(mask, v, 0.0)
        rad = np.where(mask, rad, 0.0)
    if max_magnitude is None:
        max_magnitude = float(np.percentile(rad, 99)) if rad.size else 1.0
        if max_magnitude <= 0:
            max_magnitude = 1.0
    if max_magnitude <= 0:
        raise ValueError("max_magnitude must be positive")
    wheel = make_colorwheel()
    ncols = wheel.shape[0]
    sat = np.minimum(rad / max_magnitude, 1.0)
    a = np.arctan2(-v, -u) / np.pi
    fk = (a + 1) / 2 * (ncols - 1)
    k0 = np.floor(fk).astype(np.int64)
    k1 = (k0 + 1) % ncols
    f = fk - k0
    img = np.zeros(flow.shape[:2] + (3,), dtype=np.uint8)
    for c in range(3):
        col = (1 - f) * wheel[k0, c] / 255.0 + f * wheel[k1, c] / 255.0
        col = 1 - sat * (1 - col)
        img[:, :, c] = np.floor(255 * col)
    return img


def save_png(path, image):
    Image.fromarray(np.asarray(image)).save(path)


# ---------------------------------------------------------------------------
# distributed representation
# ---------------------------------------------------------------------------


def radial_bins(dist, pixel, speeds, orientations):
    """The softmax vector at ``pixel`` as a ``(speeds, orientations)`` grid."""
    dist = np.asarray(dist)
    i, j = pixel
    if not (0 <= i < dist.shape[0] and 0 <= j < dist.shape[1]):
        raise IndexError(f"pixel {pixel} outside {dist.shape[:2]}")
    if dist.shape[2] != speeds * orientations:
        raise ValueError(f"distribution has {dist.shape[2]} bins, expected {speeds * orientations}")
    # channel o * T + t
    return dist[i, j].reshape(orientations, speeds).T.copy()


def distribution_to_radial_plot(dist, pixel, speeds, orientations, size=129, vmax=None):
    """Concentric rings (speeds, innermost = slowest) of angular sectors (orientations).

    Sector ``o`` is centred on the direction ``2 pi o / O`` drawn in image
    coordinates (x right, y down). Brightness is ``255 * value / vmax``;
    ``vmax`` defaults to 1, the largest possible softmax value. Pixels outside
    the rings are 0.
    """
    bins = radial_bins(dist, pixel, speeds, orientations)
    vmax = 1.0 if vmax is None else float(vmax)
    c = (size - 1) / 2.0
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    dx, dy = xx - c, yy - c
    r = np.hypot(dx, dy)
    inner = 0.15 * c
    ring = np.floor((r - inner) / ((c - inner) / speeds)).astype(np.int64)
    sector_width = 2 * np.pi / orientations
    ang = np.mod(np.arctan2(dy, dx) + sector_width / 2, 2 * np.pi)
    sector = np.minimum((ang // sector_width).astype(np.int64), orientations - 1)
    inside = (r >= inner) & (ring >= 0) & (ring < speeds)
    img = np.zeros((size, size), dtype=np.uint8)
    values = bins[np.clip(ring, 0, speeds - 1), sector]
    img[inside] = np.clip(np.round(255.0 * values[inside] / vmax), 0, 255).astype(np.uint8)
    return img


def save_distribution(path, dist, speeds, orientations, target_speeds=None):
    """Dump a distribution for later plotting (``.npz``)."""
    extra = {} if target_speeds is None else {"target_speeds": np.asarray(target_speeds, dtype=np.float64)}
    np.savez(path, dist=np.asarray(dist), speeds=speeds, orientations=orientations, **extra)


def load_distribution(path):
    """Returns ``(dist, speeds, orientations)``."""
    with np.load(path) as z:
        return z["dist"], int(z["speeds"]), int(z["orientations"])


def nearest_bin(vector, target_speeds, orientations):
    """(speed index, orientation index) of the target closest to ``vector``."""
    u, v = vector
    speeds = np.asarray(target_speeds)
    theta = 2 * np.pi * np.arange(orientations) / orientations
    tu = np.cos(theta)[:, None] * speeds[None, :]
    tv = np.sin(theta)[:, None] * speeds[None, :]
    d = (tu - u) ** 2 + (tv - v) ** 2
    o, t = np.unravel_index(int(np.argmin(d)), d.shape)
    return int(t), int(o)

