"""Partial cost volume between image features and depth features.

For every coarse cell this correlates the image feature vector with the
depth feature vectors of cells displaced by at most ``d`` in Chebyshev
distance, producing one channel per displacement: (2d+1)^2 channels in
total.  Each entry is the inner product of the two feature vectors
divided by the feature length.  Neighbors that fall off the grid
contribute zero, the standard padding for partial cost volumes.

The whole volume is one fused graph node with an analytic backward pass
rather than a composition of primitives; a brute-force double loop in
the tests pins the forward down to 1e-12 and finite differences check
the gradients.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .encoders import FeatureMap
from .tensor import Tensor, custom_op

# One encoder block per halving, six blocks: a one-cell displacement at
# the coarse grid spans this many pixels at full resolution.
CELL_STRIDE = 64


def displacement_offsets(d):
    """Channel ordering of the volume: (dy, dx) pairs, row-major."""
    if d < 0:
        raise ValueError("search radius must be nonnegative")
    return [(dy, dx) for dy in range(-d, d + 1) for dx in range(-d, d + 1)]


def max_displacement_pixels(d):
    """Largest full-resolution pixel displacement the volume can express."""
    if d < 0:
        raise ValueError("search radius must be nonnegative")
    return d * CELL_STRIDE


@dataclass(eq=False)
class CostVolume:
    """Correlation scores per cell and displacement hypothesis."""

    values: Tensor
    search_radius: int

    def __post_init__(self):
        expected = (2 * self.search_radius + 1) ** 2
        if self.values.ndim != 3 or self.values.shape[2] != expected:
            raise ValueError(
                "cost volume with radius %d needs %d channels, got shape %s"
                % (self.search_radius, expected, (self.values.shape,))
            )

    @property
    def height(self):
        return self.values.shape[0]

    @property
    def width(self):
        return self.values.shape[1]

    @property
    def channels(self):
        return self.values.shape[2]


def compute_cost_volume(fi: FeatureMap, fl: FeatureMap, d: int) -> CostVolume:
    """Correlate image features against displaced depth features.

    Channel c of cell (y, x) holds dot(fi[y, x], fl[y+dy, x+dx]) / N for
    the c-th offset of displacement_offsets(d), N being the feature
    length.  Differentiable with respect to both feature maps.
    """
    a, b = fi.values, fl.values
    if a.shape != b.shape:
        raise ValueError(
            "feature maps must share a shape, got %s and %s" % (a.shape, b.shape)
        )
    offsets = displacement_offsets(d)
    h, w, n = a.shape
    scale = 1.0 / n
    out = np.zeros((h, w, len(offsets)), dtype=a.dtype)
    spans = []
    for ci, (dy, dx) in enumerate(offsets):
        ya, yb = max(0, -dy), min(h, h - dy)
        xa, xb = max(0, -dx), min(w, w - dx)
        spans.append((ci, dy, dx, ya, yb, xa, xb))
        if ya >= yb or xa >= xb:
            continue
        left = a.data[ya:yb, xa:xb]
        right = b.data[ya + dy : yb + dy, xa + dx : xb + dx]
        out[ya:yb, xa:xb, ci] = (left * right).sum(axis=2) * scale

    def backward(g):
        if a.requires_grad:
            da = np.zeros_like(a.data)
            for ci, dy, dx, ya, yb, xa, xb in spans:
                if ya >= yb or xa >= xb:
                    continue
                da[ya:yb, xa:xb] += (
                    g[ya:yb, xa:xb, ci, None]
                    * b.data[ya + dy : yb + dy, xa + dx : xb + dx]
                )
            a._accumulate(da * scale)
        if b.requires_grad:
            db = np.zeros_like(b.data)
            for ci, dy, dx, ya, yb, xa, xb in spans:
                if ya >= yb or xa >= xb:
                    continue
                db[ya + dy : yb + dy, xa + dx : xb + dx] += (
                    g[ya:yb, xa:xb, ci, None] * a.data[ya:yb, xa:xb]
                )
            b._accumulate(db * scale)

    return CostVolume(custom_op(out, (a, b), backward), d)
