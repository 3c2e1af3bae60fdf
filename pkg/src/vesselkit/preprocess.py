"""Data preparation: green-channel extraction, contrast-limited adaptive
histogram equalization, field-of-view erosion, and the thin-vessel
weighting map w = 1 / (alpha * d) over the per-pixel vessel diameter d.
"""

import numpy as np
from scipy.ndimage import convolve, distance_transform_edt, label as cc_label, maximum_filter
from scipy.spatial import cKDTree
from skimage.morphology import medial_axis

from .exceptions import ConfigurationError

WEIGHT_ALPHA = 0.18

# A skeleton spur descends toward the boundary at roughly unit EDT slope;
# genuine tapering centerlines change much more slowly than this.
_SPUR_SLOPE = 0.4


def extract_green(rgb):
    """Channel 1 of an (H, W, 3) uint8/float image, scaled to [0, 1]."""
    rgb = np.asarray(rgb)
    if rgb.ndim != 3 or rgb.shape[2] != 3:
        raise ConfigurationError(f"expected an (H, W, 3) image, got shape {rgb.shape}")
    green = rgb[:, :, 1].astype(np.float64)
    if rgb.dtype == np.uint8:
        return green / 255.0
    return green


def clahe(img, tiles=(8, 8), clip_limit=2.0, bins=256):
    """Contrast-limited adaptive histogram equalization on a [0, 1] plane.

    The image is divided into tiles (the last tile in each direction absorbs
    the remainder); per-tile histograms are clipped at clip_limit times the
    uniform bin height with the excess redistributed evenly; pixel mappings
    are bilinearly interpolated between tile centers. Output is in [0, 1].
    """
    img = np.asarray(img, dtype=np.float64)
    if img.ndim != 2:
        raise ConfigurationError(f"clahe expects a 2-D plane, got shape {img.shape}")
    if clip_limit <= 0:
        raise ConfigurationError("clip_limit must be positive")
    tx, ty = int(tiles[0]), int(tiles[1])
    if tx < 1 or ty < 1:
        raise ConfigurationError("tile counts must be >= 1")
    H, W = img.shape
    tx, ty = min(tx, W), min(ty, H)
    quant = np.clip((img * bins).astype(np.int64), 0, bins - 1)

    # tile edges; the last tile absorbs the division remainder
    ys = [H // ty * i for i in range(ty)] + [H]
    xs = [W // tx * i for i in range(tx)] + [W]
    maps = np.empty((ty, tx, bins))
    centers_y = np.empty(ty)
    centers_x = np.empty(tx)
    identity = (np.arange(bins) + 0.5) / bins
    for i in range(ty):
        for j in range(tx):
            tile = quant[ys[i]:ys[i + 1], xs[j]:xs[j + 1]]
            n = tile.size
            hist = np.bincount(tile.reshape(-1), minlength=bins).astype(np.float64)
            if np.count_nonzero(hist) <= 1:  # degenerate (uniform) tile
                maps[i, j] = identity
            else:
                limit = max(clip_limit * n / bins, 1.0)
                excess = np.maximum(hist - limit, 0.0).sum()
                hist = np.minimum(hist, limit) + excess / bins
                cdf = np.cumsum(hist)
                first = cdf[np.flatnonzero(hist)[0]]
                maps[i, j] = np.clip((cdf - first) / (n - first), 0.0, 1.0)
            centers_y[i] = 0.5 * (ys[i] + ys[i + 1] - 1)
            centers_x[j] = 0.5 * (xs[j] + xs[j + 1] - 1)

    # bilinear blend of the four surrounding tile mappings (clamped at borders)
    yy = np.arange(H, dtype=np.float64)
    xxc = np.arange(W, dtype=np.float64)
    iy = np.clip(np.searchsorted(centers_y, yy) - 1, 0, max(ty - 2, 0))
    ix = np.clip(np.searchsorted(centers_x, xxc) - 1, 0, max(tx - 2, 0))
    if ty > 1:
        fy = np.clip((yy - centers_y[iy]) / (centers_y[iy + 1] - centers_y[iy]), 0.0, 1.0)
    else:
        iy = np.zeros(H, dtype=int)
        fy = np.zeros(H)
    if tx > 1:
        fx = np.clip((xxc - centers_x[ix]) / (centers_x[ix + 1] - centers_x[ix]), 0.0, 1.0)
    else:
        ix = np.zeros(W, dtype=int)
        fx = np.zeros(W)

    iy2 = np.minimum(iy + 1, ty - 1)
    ix2 = np.minimum(ix + 1, tx - 1)
    IY, IX = np.meshgrid(iy, ix, indexing="ij")
    IY2, IX2 = np.meshgrid(iy2, ix2, indexing="ij")
    FY, FX = np.meshgrid(fy, fx, indexing="ij")
    v00 = maps[IY, IX, quant]
    v01 = maps[IY, IX2, quant]
    v10 = maps[IY2, IX, quant]
    v11 = maps[IY2, IX2, quant]
    out = (1 - FY) * ((1 - FX) * v00 + FX * v01) + FY * ((1 - FX) * v10 + FX * v11)
    return np.clip(out, 0.0, 1.0)


def erode_fov(mask, pixels=4):
    """Erode a binary mask by a Euclidean disc of the given radius. Pixels
    outside the image count as background, so a full mask loses its border."""
    mask = np.asarray(mask).astype(bool)
    if mask.ndim != 2:
        raise ConfigurationError(f"expected a 2-D mask, got shape {mask.shape}")
    if pixels < 0:
        raise ConfigurationError("erosion radius must be >= 0")
    if pixels == 0:
        return mask.copy()
    padded = np.pad(mask, 1, constant_values=False)
    dist = distance_transform_edt(padded)[1:-1, 1:-1]
    return dist > pixels


def _prune_spurs(skel, dist, slope=_SPUR_SLOPE, max_iter=64):
    """Iteratively peel skeleton endpoints whose EDT rises inward faster than
    ``slope`` per pixel. Removes the spurious branches that discrete tube caps
    and boundary bumps induce, while preserving tapering centerlines."""
    skel = skel.copy()
    kernel = np.ones((3, 3), dtype=np.int8)
    for _ in range(max_iter):
        on = skel.astype(np.int8)
        # endpoint: exactly one 8-connected skeleton neighbor
        neighbor_count = convolve(on, kernel, mode="constant") - on
        endpoints = skel & (neighbor_count == 1)
        if not endpoints.any():
            break
        neighbor_max = maximum_filter(np.where(skel, dist, -np.inf), size=3)
        steep = endpoints & (neighbor_max >= dist + slope)
        if not steep.any():
            break
        skel[steep] = False
    return skel


def weight_map(label, alpha=WEIGHT_ALPHA):
    """Thin-vessel emphasis weights and the per-pixel diameter estimate.

    The diameter at a vessel pixel is twice the distance-transform value at
    its nearest skeleton (medial axis) pixel, clamped to >= 1 px; the skeleton
    is spur-pruned first so tube caps do not leak tiny widths. Weights are
    1 / (alpha * d) on vessel pixels and 1 on the background; the diameter
    plane stores 0 outside vessels.
    """
    if alpha <= 0:
        raise ConfigurationError("alpha must be positive")
    label = np.asarray(label).astype(bool)
    if label.ndim != 2:
        raise ConfigurationError(f"expected a 2-D label plane, got shape {label.shape}")
    weight = np.ones(label.shape, dtype=np.float64)
    diameter = np.zeros(label.shape, dtype=np.float64)
    if not label.any():
        return weight, diameter

    skel, dist = medial_axis(label, return_distance=True)
    pruned = _prune_spurs(skel, dist)
    if pruned.any():
        skel = pruned
    elif not skel.any():  # tiny blobs can skeletonize to nothing
        skel = label
    # nearest skeleton pixel for every pixel, via EDT on the skeleton complement
    _, (inear, jnear) = distance_transform_edt(~skel, return_indices=True)
    d = 2.0 * dist[inear, jnear]

    # keep the propagation inside each connected vessel: where the Euclidean
    # nearest skeleton pixel belongs to a different component (two vessels
    # passing close by), re-query against the pixel's own skeleton
    comp, _ = cc_label(label, structure=np.ones((3, 3), dtype=np.int8))
    bad = label & (comp != comp[inear, jnear])
    if bad.any():
        for c in np.unique(comp[bad]):
            own_skel = skel & (comp == c)
            if not own_skel.any():
                own_skel = comp == c
            sk_pts = np.argwhere(own_skel)
            tree = cKDTree(sk_pts)
            px = np.argwhere(bad & (comp == c))
            _, nearest = tree.query(px)
            d[px[:, 0], px[:, 1]] = 2.0 * dist[sk_pts[nearest, 0], sk_pts[nearest, 1]]

    d = np.maximum(d, 1.0)
    diameter[label] = d[label]
    weight[label] = 1.0 / (alpha * diameter[label])
    return weight, diameter
