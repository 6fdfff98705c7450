"""Training data: Middlebury ingestion and synthetic sequences with exact flow."""

from __future__ import annotations

import math
import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from .flow_io import read_flo_file, write_flo_file
from .tensor_core import gaussian_kernel_1d, separable_filter

MIDDLEBURY_TRAIN = ("Grove2", "RubberWhale", "Urban3")
MIDDLEBURY_TEST = ("Grove3", "Dimetrodon", "Hydrangea")
LUMA = (0.299, 0.587, 0.114)


class DataError(Exception):
    """Missing or inconsistent dataset files."""


@dataclass
class TrainingSample:
    """F frames ``(H, W, F)``, flow ``(H, W, 2)`` between frames ceil(F/2) and ceil(F/2)+1, and a validity mask."""

    frames: np.ndarray
    flow: np.ndarray
    mask: np.ndarray
    name: str = ""
    split: str = "train"
    layer_flows: list = field(default_factory=list)

    def __post_init__(self):
        h, w = self.frames.shape[:2]
        if self.flow.shape != (h, w, 2) or self.mask.shape != (h, w):
            raise DataError(f"{self.name}: frames {self.frames.shape}, flow {self.flow.shape}, mask {self.mask.shape}")


# ---------------------------------------------------------------------------
# images
# ---------------------------------------------------------------------------


def to_gray(img):
    img = np.asarray(img, dtype=np.float64)
    if img.ndim == 2:
        return img
    if img.shape[2] == 4:
        img = img[:, :, :3]
    if img.shape[2] == 1:
        return img[:, :, 0]
    return img @ np.asarray(LUMA)


def read_image_gray(path):
    """Read PNG/PGM/PPM as a grayscale image in [0, 1]."""
    try:
        with Image.open(path) as im:
            arr = np.asarray(im)
    except (OSError, FileNotFoundError) as exc:
        raise DataError(f"cannot read image {path}: {exc}") from exc
    scale = 65535.0 if arr.dtype == np.uint16 else 255.0
    return to_gray(arr) / scale


# ---------------------------------------------------------------------------
# Middlebury
# ---------------------------------------------------------------------------


@dataclass
class SequenceRecord:
    name: str
    frame_paths: list
    flow_path: Path
    split: str


def _frame_dirs(root):
    for sub in ("other-data-gray", "other-data"):
        if (root / sub).is_dir():
            return root / sub
    return root


def _flow_dir(root):
    if (root / "other-gt-flow").is_dir():
        return root / "other-gt-flow"
    return root


def middlebury_records(root, frames, names=None, annotated=10, frame_pattern="frame{:02d}.png", flow_name="flow10.flo"):
    """Locate sequences under ``root``.

    Works with the official layout (``other-data[-gray]/<seq>``,
    ``other-gt-flow/<seq>``) and a flat ``<root>/<seq>/`` layout. The F-frame
    stack is centred so the annotated pair ``annotated, annotated+1`` sits at
    positions ceil(F/2), ceil(F/2)+1.
    """
    root = Path(root)
    if not root.is_dir():
        raise DataError(f"dataset root {root} does not exist")
    fdir, gdir = _frame_dirs(root), _flow_dir(root)
    if names is None:
        names = sorted(p.name for p in gdir.iterdir() if (p / flow_name).is_file())
    first = annotated - (math.ceil(frames / 2) - 1)
    records = []
    for name in names:
        paths = [fdir / name / frame_pattern.format(first + k) for k in range(frames)]
        missing = [p for p in paths if not p.is_file()]
        if missing:
            raise DataError(f"{name}: {len(missing)} of {frames} frames missing (first: {missing[0]})")
        flow_path = gdir / name / flow_name
        if not flow_path.is_file():
            raise DataError(f"{name}: ground truth {flow_path} missing")
        split = "test" if name in MIDDLEBURY_TEST else "train"
        records.append(SequenceRecord(name, paths, flow_path, split))
    if not records:
        raise DataError(f"no sequences found under {root}")
    return records


def load_record(record):
    frames = np.stack([read_image_gray(p) for p in record.frame_paths], axis=-1)
    flow, mask = read_flo_file(record.flow_path)
    if flow.shape[:2] != frames.shape[:2]:
        raise DataError(f"{record.name}: flow {flow.shape[:2]} vs frames {frames.shape[:2]}")
    return TrainingSample(frames, flow, mask, name=record.name, split=record.split)


def load_middlebury(root, frames=3, train_names=MIDDLEBURY_TRAIN, test_names=MIDDLEBURY_TEST, **kw):
    """Load the half split. Returns ``(train, test)`` lists of :class:`TrainingSample`."""
    train = [load_record(r) for r in middlebury_records(root, frames, list(train_names), **kw)]
    test = [load_record(r) for r in middlebury_records(root, frames, list(test_names), **kw)]
    for s in train:
        s.split = "train"
    for s in test:
        s.split = "test"
    return train, test


def middlebury_root_from_env():
    value = os.environ.get("MIDDLEBURY_ROOT")
    return Path(value) if value else None


# ---------------------------------------------------------------------------
# synthetic sequences
# ---------------------------------------------------------------------------


@dataclass
class Layer:
    motion: tuple  # (u, v) px/frame
    alpha: float = 1.0
    texture: str = "noise"  # "noise" or "sinusoid"
    wavelength: float = 8.0
    phase: float = 0.0
    grating_angle: float = 0.0  # radians, direction of the grating's wave vector


@dataclass
class SyntheticSpec:
    height: int
    width: int
    layers: list
    frames: int = 3
    seed: int = 0
    sigma: float = 2.0

    def __post_init__(self):
        if not self.layers:
            raise ValueError("need at least one layer")
        total = sum(layer.alpha for layer in self.layers)
        if not math.isclose(total, 1.0, abs_tol=1e-9):
            raise ValueError(f"layer alphas must sum to 1, got {total}")


def _noise_texture(rng, h, w, sigma):
    g = gaussian_kernel_1d(sigma)
    t = separable_filter(rng.random((h, w, 1)), g, g)[:, :, 0]
    lo, hi = t.min(), t.max()
    return (t - lo) / (hi - lo)


def _sample(texture, ys, xs):
    h, w = texture.shape
    y0 = np.clip(np.floor(ys).astype(np.int64), 0, h - 2)
    x0 = np.clip(np.floor(xs).astype(np.int64), 0, w - 2)
    fy, fx = ys - y0, xs - x0
    a = texture[y0, x0] + fx * (texture[y0, x0 + 1] - texture[y0, x0])
    b = texture[y0 + 1, x0] + fx * (texture[y0 + 1, x0 + 1] - texture[y0 + 1, x0])
    return a + fy * (b - a)


def _render_layer(layer, spec, rng):
    h, w, F = spec.height, spec.width, spec.frames
    center = math.ceil(F / 2) - 1
    u, v = layer.motion
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    if layer.texture == "sinusoid":
        kx = math.cos(layer.grating_angle) * 2 * math.pi / layer.wavelength
        ky = math.sin(layer.grating_angle) * 2 * math.pi / layer.wavelength
        frames = []
        for k in range(F):
            d = k - center
            frames.append(0.5 + 0.5 * np.sin(kx * (xx - d * u) + ky * (yy - d * v) + layer.phase))
        return np.stack(frames, axis=-1)
    pad = int(math.ceil(max(abs(u), abs(v)) * max(center, F - 1 - center))) + 2
    tex = _noise_texture(rng, h + 2 * pad, w + 2 * pad, spec.sigma)
    frames = []
    for k in range(F):
        d = k - center
        frames.append(_sample(tex, yy + pad - d * v, xx + pad - d * u))
    return np.stack(frames, axis=-1)


def synth_sequence(spec):
    """Render alpha-blended translating layers with their exact flows.

    Frame ``k`` of a layer moving at ``(u, v)`` is the texture displaced by
    ``(k - c) * (u, v)`` with ``c`` the 0-based centre frame. The sample's
    flow is the dominant (largest-alpha, first on ties) layer's motion;
    ``layer_flows`` keeps every layer's flow.
    """
    rng = np.random.default_rng(spec.seed)
    frames = np.zeros((spec.height, spec.width, spec.frames))
    flows = []
    for layer in spec.layers:
        frames += layer.alpha * _render_layer(layer, spec, rng)
        flows.append(np.broadcast_to(np.asarray(layer.motion, dtype=np.float64), (spec.height, spec.width, 2)).copy())
    dominant = int(np.argmax([layer.alpha for layer in spec.layers]))
    mask = np.ones((spec.height, spec.width), dtype=bool)
    return TrainingSample(frames, flows[dominant].copy(), mask, name=f"synthetic-{spec.seed}", layer_flows=flows)


def random_translation_set(n, height, width, max_speed, frames=3, seed=0, min_speed=0.0, sigma=2.0):
    """``n`` single-layer noise sequences with uniformly random direction and speed."""
    rng = np.random.default_rng(seed)
    out = []
    for k in range(n):
        speed = rng.uniform(min_speed, max_speed)
        angle = rng.uniform(0.0, 2 * math.pi)
        motion = (speed * math.cos(angle), speed * math.sin(angle))
        spec = SyntheticSpec(height, width, [Layer(motion)], frames=frames, seed=int(rng.integers(2**31)), sigma=sigma)
        out.append(synth_sequence(spec))
    return out


def write_sequence(root, sample, annotated=10, frame_pattern="frame{:02d}.png", flow_name="flow10.flo"):
    """Write ``sample`` in the flat layout read by :func:`middlebury_records` (16-bit PNG frames)."""
    d = Path(root) / sample.name
    d.mkdir(parents=True, exist_ok=True)
    F = sample.frames.shape[2]
    first = annotated - (math.ceil(F / 2) - 1)
    for k in range(F):
        img = np.round(np.clip(sample.frames[:, :, k], 0.0, 1.0) * 65535.0).astype(np.uint16)
        Image.fromarray(img).save(d / frame_pattern.format(first + k))
    write_flo_file(d / flow_name, sample.flow, sample.mask)
    return d


def synthetic_from_config(cfg, frames, seed=0):
    """Build a translation set from a mapping with keys n, height, width, max_speed[, min_speed, sigma]."""
    return random_translation_set(
        int(cfg.get("n", 16)),
        int(cfg.get("height", 64)),
        int(cfg.get("width", 64)),
        float(cfg.get("max_speed", 3.0)),
        frames=frames,
        seed=int(cfg.get("seed", seed)),
        min_speed=float(cfg.get("min_speed", 0.0)),
        sigma=float(cfg.get("sigma", 2.0)),
    )
