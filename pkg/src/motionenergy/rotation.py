"""Rotation-tied weight banks.

A tied layer maps ``in_groups`` orientation groups of ``in_per_group``
channels onto ``out_groups`` groups of ``out_per_group`` channels. Only one
canonical kernel per *relative-orientation class* is stored; the kernel that
links input group ``i`` to output group ``j`` is the canonical kernel of
``class(i, j)`` rotated to the orientation of ``j``. Two pairs share a class
when the cosines of their relative angles agree.

Orientations are kept as exact fractions of a full turn so the class table
and the quarter-turn structure of the rotations are free of rounding.

Channel layout is orientation-major: channel ``g * per_group + m`` belongs
to orientation group ``g``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from fractions import Fraction
from functools import cached_property
from itertools import product

import numpy as np

from .tensor_core import ContractViolation, rotate_turn, rotate_turn_adjoint


@dataclass(frozen=True)
class TiedLayerSpec:
    """Shape and tying rules of one layer.

    ``out_turns`` overrides the regular output orientations (the flow output
    layer uses ``(0, 1/4)``, i.e. the u and v axes). With
    ``oriented_input=False`` the input carries no orientation (raw frames), so
    every output group reads the same canonical kernel. ``tied=False`` gives
    every (input group, output group) pair its own kernel and bias, with no
    rotation.
    """

    in_groups: int
    out_groups: int
    in_per_group: int
    out_per_group: int
    size: int = 1
    spatially_rotated: bool = True
    oriented_input: bool = True
    tied: bool = True
    out_turns: tuple = field(default=None)

    def __post_init__(self):
        for name in ("in_groups", "out_groups", "in_per_group", "out_per_group", "size"):
            if getattr(self, name) < 1:
                raise ContractViolation(f"{name} must be >= 1")
        if self.size % 2 == 0:
            raise ContractViolation("kernel size must be odd")
        if self.out_turns is not None and len(self.out_turns) != self.out_groups:
            raise ContractViolation("out_turns must list one orientation per output group")

    @property
    def in_turns(self):
        return tuple(Fraction(i, self.in_groups) for i in range(self.in_groups))

    @property
    def output_turns(self):
        if self.out_turns is not None:
            return tuple(Fraction(t) for t in self.out_turns)
        return tuple(Fraction(j, self.out_groups) for j in range(self.out_groups))

    @property
    def in_channels(self):
        return self.in_groups * self.in_per_group

    @property
    def out_channels(self):
        return self.out_groups * self.out_per_group

    @cached_property
    def _classes(self):
        return _build_class_table(self)

    @property
    def class_table(self):
        """(in_groups, out_groups) array of class indices."""
        return self._classes[0]

    @property
    def class_turns(self):
        """Folded relative angle (fraction of a turn in [0, 1/2]) of each class."""
        return self._classes[1]

    @property
    def n_classes(self):
        return len(self._classes[1])

    @property
    def canonical_shape(self):
        return (self.n_classes, self.in_per_group, self.out_per_group, self.size, self.size)

    @property
    def bias_shape(self):
        return (self.out_per_group,) if self.tied else (self.out_channels,)

    @property
    def expanded_count(self):
        """Number of 2-D kernels in the full bank."""
        return self.in_groups * self.out_groups * self.in_per_group * self.out_per_group

    @property
    def canonical_count(self):
        """Number of 2-D kernels actually stored."""
        return self.n_classes * self.in_per_group * self.out_per_group


def _fold_turn(t):
    t = t % 1
    return min(t, 1 - t)


def _build_class_table(spec):
    table = np.zeros((spec.in_groups, spec.out_groups), dtype=np.int64)
    if not spec.tied:
        for i, j in product(range(spec.in_groups), range(spec.out_groups)):
            table[i, j] = i * spec.out_groups + j
        return table, tuple(range(spec.in_groups * spec.out_groups))
    if not spec.oriented_input:
        return table, (Fraction(0),)
    folded = {}
    for i, j in product(range(spec.in_groups), range(spec.out_groups)):
        folded[i, j] = _fold_turn(spec.output_turns[j] - spec.in_turns[i])
    keys = sorted(set(folded.values()))
    index = {k: n for n, k in enumerate(keys)}
    for (i, j), k in folded.items():
        table[i, j] = index[k]
    return table, tuple(keys)


def relative_orientation_class(i, j, spec):
    """Class index linking input group ``i`` to output group ``j``."""
    if not (0 <= i < spec.in_groups and 0 <= j < spec.out_groups):
        raise ContractViolation(f"group pair ({i}, {j}) out of range")
    return int(spec.class_table[i, j])


def _check_canonical(canonical, spec):
    canonical = np.asarray(canonical, dtype=np.float64)
    if canonical.shape != spec.canonical_shape:
        raise ContractViolation(f"canonical weights {canonical.shape} do not match spec {spec.canonical_shape}")
    return canonical


def _rotated_class_kernels(block, turn, rotate):
    # block (M, N, k, k) -> same shape, every 2-D slice rotated
    m, n, k, _ = block.shape
    stacked = block.reshape(m * n, k, k).transpose(1, 2, 0)
    return rotate(stacked, turn).transpose(2, 0, 1).reshape(m, n, k, k)


def expand(canonical, spec):
    """Materialise the full ``(k, k, c_in, c_out)`` bank from canonical kernels."""
    canonical = _check_canonical(canonical, spec)
    k = spec.size
    mi, no = spec.in_per_group, spec.out_per_group
    bank = np.empty((k, k, spec.in_channels, spec.out_channels))
    rotate = spec.tied and spec.spatially_rotated and k > 1
    cache = {}
    table = spec.class_table
    for i, j in product(range(spec.in_groups), range(spec.out_groups)):
        cls = int(table[i, j])
        key = (cls, j)
        if key not in cache:
            block = canonical[cls]
            if rotate:
                block = _rotated_class_kernels(block, spec.output_turns[j], rotate_turn)
            cache[key] = block.transpose(2, 3, 0, 1)
        bank[:, :, i * mi : (i + 1) * mi, j * no : (j + 1) * no] = cache[key]
    return bank


def fold_gradients(bank_grad, spec, reduce="mean"):
    """Pull full-bank gradients back onto the canonical kernels.

    Each copy is inverse-rotated to the canonical orientation. The default
    ``reduce="mean"`` averages over the copies of a class; ``reduce="sum"``
    is the exact adjoint of :func:`expand`, i.e. the true gradient of the
    loss w.r.t. the canonical weights (used by the network's backward pass).
    """
    bank_grad = np.asarray(bank_grad, dtype=np.float64)
    k = spec.size
    mi, no = spec.in_per_group, spec.out_per_group
    if bank_grad.shape != (k, k, spec.in_channels, spec.out_channels):
        raise ContractViolation(f"bank gradient {bank_grad.shape} does not match spec")
    table = spec.class_table
    partial = {}
    for i, j in product(range(spec.in_groups), range(spec.out_groups)):
        key = (int(table[i, j]), j)
        block = bank_grad[:, :, i * mi : (i + 1) * mi, j * no : (j + 1) * no].transpose(2, 3, 0, 1)
        partial[key] = partial.get(key, 0.0) + block
    out = np.zeros(spec.canonical_shape)
    rotate = spec.tied and spec.spatially_rotated and k > 1
    for (cls, j), block in partial.items():
        if rotate:
            block = _rotated_class_kernels(block, spec.output_turns[j], rotate_turn_adjoint)
        out[cls] += block
    if reduce == "mean":
        counts = np.bincount(table.ravel(), minlength=spec.n_classes)
        out /= counts[:, None, None, None, None]
    elif reduce != "sum":
        raise ValueError(f"reduce must be 'sum' or 'mean', got {reduce!r}")
    return out


def expand_bias(bias, spec):
    bias = np.asarray(bias, dtype=np.float64)
    if bias.shape != spec.bias_shape:
        raise ContractViolation(f"bias {bias.shape} does not match spec {spec.bias_shape}")
    return np.tile(bias, spec.out_groups) if spec.tied else bias.copy()


def fold_bias_gradient(grad, spec):
    grad = np.asarray(grad, dtype=np.float64)
    if not spec.tied:
        return grad.copy()
    return grad.reshape(spec.out_groups, spec.out_per_group).sum(axis=0)


def check_rotation_ties(bank, spec):
    """Brute-force check of the tying rule on an expanded bank.

    For every quadruple ``(i, i', j, j')`` whose relative angles have equal
    cosines, the kernel ``(i, j)`` must equal ``(i', j')`` rotated by
    ``theta_j - theta_j'``. When that difference is a whole number of quarter
    turns the rotation is an index permutation and equality is checked bit for
    bit. Otherwise two bilinear rotations do not compose exactly, so both
    kernels are checked bit for bit against the tied copy at output
    orientation 0 rotated once. Returns the number of quadruples checked;
    raises ``AssertionError`` on the first violation.
    """
    bank = np.asarray(bank)
    k = spec.size
    mi, no = spec.in_per_group, spec.out_per_group
    in_t = spec.in_turns
    out_t = spec.output_turns
    rotated = spec.spatially_rotated and k > 1

    def angle(i, j):
        if not spec.oriented_input:
            return 0.0
        return 2.0 * math.pi * float(out_t[j] - in_t[i])

    def block(i, j):
        return bank[:, :, i * mi : (i + 1) * mi, j * no : (j + 1) * no]

    def rot(b, turn):
        if not rotated or turn == 0:
            return b
        flat = b.reshape(k, k, mi * no)
        return rotate_turn(flat, turn).reshape(b.shape)

    pairs = list(product(range(spec.in_groups), range(spec.out_groups)))
    reference = {}
    for i, j in pairs:
        if out_t[j] == 0:
            reference.setdefault(round(math.cos(angle(i, j)), 9), (i, j))
    checked = 0
    for (i, j), (ip, jp) in product(pairs, pairs):
        if not math.isclose(math.cos(angle(i, j)), math.cos(angle(ip, jp)), abs_tol=1e-9):
            continue
        turn = out_t[j] - out_t[jp]
        if (4 * turn).denominator == 1:
            expected = rot(block(ip, jp), turn)
            assert np.array_equal(block(i, j), expected), f"tie ({i},{j}) <- ({ip},{jp}) violated"
        else:
            ri, rj = reference[round(math.cos(angle(i, j)), 9)]
            for a, b in ((i, j), (ip, jp)):
                expected = rot(block(ri, rj), out_t[b] - out_t[rj])
                assert np.array_equal(block(a, b), expected), f"tie ({a},{b}) <- ({ri},{rj}) violated"
        checked += 1
    return checked
