"""Ablation presets: named deltas from the full model."""

from __future__ import annotations

from dataclasses import dataclass, field


@dataclass(frozen=True)
class AblationPreset:
    name: str
    description: str
    network: dict = field(default_factory=dict)
    training: dict = field(default_factory=dict)
    expect_nc: bool = False  # reported as not converging for the full-size model


def _build():
    p = [
        AblationPreset("full", "full model, no changes"),
        AblationPreset("frames-2", "two input frames", {"frames": 2}),
        AblationPreset("frames-5", "five input frames", {"frames": 5}),
        AblationPreset("no-center-surround", "skip the centre-surround filter", {"center_surround": False}),
        AblationPreset("no-local-norm", "skip local contrast normalisation", {"local_norm": False}),
        AblationPreset(
            "gauss-deriv-h1",
            "fixed Gaussian-derivative spatiotemporal kernels in the first layer, not trained",
            {"fixed_h1": "gauss-deriv"},
        ),
        AblationPreset("no-orientation-norm", "skip the L1 normalisation across orientations", {"orientation_norm": False}),
        AblationPreset("no-pooling", "no spatial max-pooling for phase invariance", {"phase_pooling": False}),
        AblationPreset("relu-conv1", "ReLU instead of squaring after the motion filters", {"rectifier": "relu"}),
        AblationPreset(
            "no-rotation-ties", "every kernel trained independently, no rotation weight tying", {"tied": False}, expect_nc=True
        ),
        AblationPreset("loss-classification", "classification loss only", training={"phases": "classification"}),
        AblationPreset("loss-regression", "end-point-error loss only", training={"phases": "regression"}),
    ]
    for o in (6, 8, 16):
        p.append(AblationPreset(f"orientations-{o}", f"{o} orientations", {"orientations": o}))
    for s in (4, 8, 16):
        p.append(AblationPreset(f"scales-{s}", f"{s} pyramid scales", {"num_scales": s}))
    for r in (2, 3, 4, 5):
        p.append(AblationPreset(f"iters-{r}", f"{r} recurrent iterations", {"recurrent_iters": r}))
    return {x.name: x for x in p}


PRESETS = _build()


def get_preset(name):
    try:
        return PRESETS[name]
    except KeyError:
        raise KeyError(f"unknown preset {name!r}; choose from {', '.join(PRESETS)}") from None


def apply_preset(preset, network_dict, training_dict):
    """Return copies of the two config dicts with the preset's deltas applied."""
    net = dict(network_dict)
    net.update(preset.network)
    tr = dict(training_dict)
    tr.update(preset.training)
    return net, tr
