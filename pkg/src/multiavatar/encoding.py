"""Sinusoidal positional encoding for 3-d points and joint positions.

Layout is normative for checkpoint compatibility: coordinate-major with
the band index innermost, sine before cosine. For a point (x, y, z) and
L bands the output is

    [sin(2^0 pi x), cos(2^0 pi x), ..., sin(2^{L-1} pi x), cos(2^{L-1} pi x),
     sin(2^0 pi y), ...,                                     cos(2^{L-1} pi z)]

so truncating to fewer bands is a per-coordinate prefix selection.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import diffcore as dc
from .diffcore import Tensor


@dataclass(frozen=True)
class EncodingSpec:
    """Number of frequency bands; a 3-vector encodes to 6*bands values."""

    bands: int

    def __post_init__(self):
        if self.bands < 1:
            raise ValueError(f"bands must be >= 1, got {self.bands}")

    @property
    def out_dim(self):
        return 6 * self.bands


def positional_encode(points, spec):
    """Encode a [B x 3] point batch to [B x 6L], differentiably.

    Accepts a Tensor or array; frequencies are 2^b * pi for b in [0, L).
    """
    if not isinstance(points, Tensor):
        points = Tensor(points)
    if points.ndim != 2 or points.shape[1] != 3:
        raise dc.ShapeError(f"expected a [B x 3] batch, got {points.shape}")
    L = spec.bands
    freqs = (2.0 ** np.arange(L)) * np.pi
    b = points.shape[0]
    # [B,3,1] * [L] -> [B,3,L], then interleave sin/cos on a new last axis
    scaled = dc.reshape(points, (b, 3, 1)) * Tensor(freqs.astype(points.dtype))
    s = dc.sin(scaled)
    c = dc.cos(scaled)
    interleaved = dc.stack([s, c], axis=3)  # [B,3,L,2]
    return dc.reshape(interleaved, (b, 6 * L))


def truncate_bands(encoded, spec, keep):
    """Prefix-select the first ``keep`` bands of an encoded batch.

    Used for optional coarse-to-fine frequency ramping: the encoding of a
    smaller band count is literally a column subset of the full one.
    """
    if not 1 <= keep <= spec.bands:
        raise ValueError(f"keep must be in [1, {spec.bands}], got {keep}")
    L = spec.bands
    cols = []
    for coord in range(3):
        base = coord * 2 * L
        cols.extend(range(base, base + 2 * keep))
    return encoded[:, np.asarray(cols)]


def band_ramp_weights(spec, step, start, end):
    """Per-column weights in [0,1] that fade high bands in linearly over
    a step window (all ones at or past ``end``; band 0 always on)."""
    L = spec.bands
    if step >= end or end <= start:
        alpha = L
    else:
        alpha = L * max(0.0, (step - start)) / (end - start)
    band_w = np.clip(alpha - np.arange(L), 0.0, 1.0)
    per_coord = np.repeat(band_w, 2)  # sin and cos share a band weight
    return np.tile(per_coord, 3)
