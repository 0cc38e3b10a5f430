"""Static scene grid: discretize the scene into k = grid_size^2 cells, encode
context per cell, pool pedestrian gaze cues by occupancy, and weight cells by
attention carried over from the previous step.

The grid works in world coordinates. Bounds come from the batch's observed
positions so every pedestrian lands in a cell; the scene image (optional) is
mean-pooled down to the same grid before a single 3x3 same-padded
convolution realized as an im2col matmul.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import DiffValue


class GridError(ValueError):
    """Scene/grid geometry problems (image too small, bad bounds)."""


@dataclass(frozen=True)
class GridBounds:
    xmin: float
    xmax: float
    ymin: float
    ymax: float

    @property
    def width(self) -> float:
        return self.xmax - self.xmin

    @property
    def height(self) -> float:
        return self.ymax - self.ymin


def bounds_from_positions(positions: np.ndarray, margin: float = 1e-6) -> GridBounds:
    """Tight box around (T, N, 2) or (N, 2) positions, slightly inflated so
    max-edge points still fall inside the last cell."""
    pts = positions.reshape(-1, 2)
    if pts.shape[0] == 0:
        return GridBounds(0.0, 1.0, 0.0, 1.0)
    xmin, ymin = pts.min(axis=0)
    xmax, ymax = pts.max(axis=0)
    if xmax - xmin < margin:
        xmax = xmin + 1.0
    if ymax - ymin < margin:
        ymax = ymin + 1.0
    return GridBounds(float(xmin), float(xmax) + margin, float(ymin), float(ymax) + margin)


def assign_cells(positions: np.ndarray, bounds: GridBounds, grid_size: int) -> np.ndarray:
    """Row-major cell index per pedestrian, (N,) ints in [0, grid_size^2)."""
    if positions.shape[0] == 0:
        return np.zeros(0, dtype=np.int64)
    col = np.clip(
        ((positions[:, 0] - bounds.xmin) / bounds.width * grid_size).astype(np.int64),
        0, grid_size - 1,
    )
    row = np.clip(
        ((positions[:, 1] - bounds.ymin) / bounds.height * grid_size).astype(np.int64),
        0, grid_size - 1,
    )
    return row * grid_size + col


def occupancy_pool(v_emb: DiffValue, cell_idx: np.ndarray, k: int) -> DiffValue:
    """Mean of occupant rows per cell, zeros for empty cells: a constant
    (k, N) pooling matrix applied to the embeddings."""
    n = v_emb.data.shape[0]
    pool = np.zeros((k, n))
    for c in range(k):
        members = np.flatnonzero(cell_idx == c)
        if members.size:
            pool[c, members] = 1.0 / members.size
    return ad.matmul(ad.constant(pool), v_emb)


def downsample_image(img: np.ndarray, grid_size: int) -> np.ndarray:
    """Mean-pool a grayscale image to grid_size x grid_size, scaled to [0, 1]."""
    arr = np.asarray(img, dtype=np.float64)
    if arr.ndim != 2:
        raise GridError("scene image must be 2-D grayscale")
    h, w = arr.shape
    if h < grid_size or w < grid_size:
        raise GridError(
            f"scene image {h}x{w} smaller than grid {grid_size}x{grid_size}; "
            f"provide at least {grid_size} pixels per side or drop the image"
        )
    if arr.max() > 1.0:
        arr = arr / 255.0
    rows = np.array_split(np.arange(h), grid_size)
    cols = np.array_split(np.arange(w), grid_size)
    out = np.empty((grid_size, grid_size))
    for i, r in enumerate(rows):
        for j, c in enumerate(cols):
            out[i, j] = arr[np.ix_(r, c)].mean()
    return out


def conv_patches(down: np.ndarray) -> np.ndarray:
    """im2col for a 3x3 same-padded convolution over the downsampled map:
    (k, 9) patch matrix, cells row-major, kernel positions row-major."""
    g = down.shape[0]
    padded = np.zeros((g + 2, g + 2))
    padded[1:-1, 1:-1] = down
    patches = np.empty((g * g, 9))
    for r in range(g):
        for c in range(g):
            patches[r * g + c] = padded[r : r + 3, c : c + 3].ravel()
    return patches


def conv_encode(
    down: np.ndarray,
    w_conv: DiffValue,
    b_conv: DiffValue,
    mask: DiffValue,
) -> DiffValue:
    """One 3x3 conv via im2col, each cell's d_c features scaled by its mask
    entry. mask is (k, 1); returns (k, d_c)."""
    k = down.shape[0] * down.shape[1]
    if mask.data.shape != (k, 1):
        raise GridError(f"mask must be ({k}, 1), got {mask.data.shape}")
    d_c = w_conv.data.shape[1]
    out = ad.bias_add(ad.matmul(ad.constant(conv_patches(down)), w_conv), b_conv)
    mask_tile = ad.matmul(mask, ad.constant(np.ones((1, d_c))))
    return ad.mul(out, mask_tile)


def mask_features(mask: DiffValue, d_c: int) -> DiffValue:
    """Cell identity features when no conv context is configured: the mask
    entry tiled across d_c channels."""
    return ad.matmul(mask, ad.constant(np.ones((1, d_c))))


def append_social_context(base: DiffValue, f_s_prev: DiffValue | None, k: int, d: int) -> DiffValue:
    """C = [base || mean of previous-step social features broadcast to every
    cell]; zeros on the first step or for an empty crowd."""
    if f_s_prev is None or f_s_prev.data.shape[0] == 0:
        social = ad.constant(np.zeros((k, d)))
    else:
        mean = ad.mean_rows(f_s_prev)
        social = ad.matmul(ad.constant(np.ones((k, 1))), mean)
    return ad.concat_cols([base, social])


def regularize(f_o: DiffValue, lam: float) -> DiffValue:
    """Uniform importance prior over static regions: f_O' = lambda * f_O."""
    return ad.scale(f_o, lam)


def fuse_mask(f_s: DiffValue, f_o_prime: DiffValue) -> DiffValue:
    """Score every pedestrian against every cell: F = f_S @ f_O'^T, (N, k)."""
    if f_s.data.shape[1] != f_o_prime.data.shape[1]:
        raise GridError(
            f"feature widths differ: social {f_s.data.shape[1]} "
            f"vs static {f_o_prime.data.shape[1]}"
        )
    return ad.matmul(f_s, ad.transpose(f_o_prime))


def attend_cells(
    f_o_prime: DiffValue,
    h_o: DiffValue,
    a_cells: DiffValue,
    w_ho: DiffValue,
) -> DiffValue:
    """Next-step static features f_O'' = a ⊙ f_O' ⊙ (h_O @ W_ho).

    a_cells is (k, 1) attention from the previous step; zero-attention cells
    zero out entirely."""
    d = f_o_prime.data.shape[1]
    h_proj = ad.matmul(h_o, w_ho)
    a_tile = ad.matmul(a_cells, ad.constant(np.ones((1, d))))
    return ad.mul(a_tile, ad.mul(f_o_prime, h_proj))


def uniform_cell_attention(k: int) -> DiffValue:
    return ad.constant(np.full((k, 1), 1.0 / k))


def cell_attention_from_ped(a_ped: DiffValue) -> DiffValue:
    """Collapse row-stochastic pedestrian-over-cell attention (N, k) to a
    (k, 1) cell vector by column mean; the mean preserves sum-to-one."""
    return ad.transpose(ad.mean_rows(a_ped))
