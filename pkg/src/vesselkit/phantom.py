"""Synthetic vessel phantoms: dark tapering tubular trees on a bright
background inside a circular field of view, with controlled degradations
(low-frequency illumination, vignetting, Gaussian noise) and exact
ground-truth labels and diameters.
"""

from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import cKDTree

from .exceptions import ConfigurationError
from .preprocess import weight_map

BACKGROUND = 0.82
OUTSIDE_FOV = 0.10
STEP = 0.75  # centerline sampling distance in pixels
AA_WIDTH = 1.0
# the tube profile keeps labelled pixels strictly darker than any background
# pixel when noise and illumination are off
INSIDE_FLOOR = 0.62
OUTSIDE_CAP = 0.18


@dataclass(frozen=True)
class PhantomConfig:
    size: tuple = (512, 512)
    n_trees: int = 10
    diameter_range: tuple = (1.0, 8.0)
    tortuosity: float = 0.12
    background_amplitude: float = 0.10
    vignette: float = 0.94  # FOV disc radius as a fraction of min(H, W)/2
    noise_sigma: float = 0.05
    contrast_range: tuple = (0.12, 0.38)
    seed: int = 0

    def __post_init__(self):
        if self.size[0] < 32 or self.size[1] < 32:
            raise ConfigurationError("phantom size must be at least 32x32")
        if self.n_trees < 1:
            raise ConfigurationError("need at least one vessel tree")
        if not (0 < self.vignette <= 1):
            raise ConfigurationError("vignette fraction must be in (0, 1]")


@dataclass
class LabeledSample:
    """One image with ground truth: all planes share (H, W)."""

    image: np.ndarray
    label: np.ndarray
    fov: np.ndarray
    weight: np.ndarray
    diameter: np.ndarray


@dataclass
class SampleSuite:
    train: list
    val: list
    test: list
    seeds: dict = field(default_factory=dict)

    def split(self, name):
        return {"train": self.train, "val": self.val, "test": self.test}[name]


def _grow_trees(cfg, rng, fov_radius, center):
    """Centerline samples for all trees: positions, radii, per-tree contrast.

    Each tree is a tapering random walk that bifurcates at segment ends
    (children start thinner than the parent, so junctions stay close to the
    local tube width). A branch stops at the field-of-view boundary or when
    it would collide with a previously grown tree.
    """
    d_min, d_max = cfg.diameter_range
    pts, rads, drops = [], [], []
    clearance = 3.0  # boundary gap keeping neighboring tubes 8-disconnected

    for _ in range(cfg.n_trees):
        drop = rng.uniform(*cfg.contrast_range)
        theta = rng.uniform(0, 2 * np.pi)
        start = center + 0.82 * fov_radius * np.array([np.sin(theta), np.cos(theta)])
        heading = theta + np.pi + rng.uniform(-0.5, 0.5)  # roughly inward
        d0 = rng.uniform(0.35 * d_max, d_max)
        total = rng.uniform(1.4, 2.2) * fov_radius
        tree_start = len(pts)
        # (position, heading, diameter, remaining length, depth)
        queue = [(start, heading, d0, total, 0)]
        while queue:
            pos, ang, dia, remaining, depth = queue.pop()
            junction = pos.copy()
            junction_r = 1.5 * dia + clearance
            seg_len = remaining if depth >= 2 else remaining * rng.uniform(0.35, 0.6)
            n_steps = max(int(seg_len / STEP), 2)
            end_dia = max(dia * rng.uniform(0.6, 0.8), d_min)
            all_pts = np.asarray(pts) if pts else np.empty((0, 2))
            all_r = np.asarray(rads) if rads else np.empty(0)
            if len(all_pts):
                # the parent chain near the junction is not an obstacle while
                # the walker is still inside the junction ball
                same_tree = np.arange(len(all_pts)) >= tree_start
                in_ball = ((all_pts - junction) ** 2).sum(axis=1) < junction_r ** 2
                reduced = ~(same_tree & in_ball)
            branch_pts, branch_rads = [], []
            tail = max(int(3.0 * dia / STEP), 8)  # a branch may not loop onto itself
            alive = True
            for k in range(n_steps):
                ang += rng.normal(0.0, cfg.tortuosity)
                pos = pos + STEP * np.array([np.sin(ang), np.cos(ang)])
                if np.linalg.norm(pos - center) > 0.97 * fov_radius:
                    alive = False
                    break
                d_here = dia + (end_dia - dia) * (k + 1) / n_steps
                r_here = d_here / 2.0
                blocked = False
                if len(all_pts):
                    if ((pos - junction) ** 2).sum() < junction_r ** 2:
                        obs, obs_r = all_pts[reduced], all_r[reduced]
                    else:
                        obs, obs_r = all_pts, all_r
                    if len(obs):
                        d2 = ((obs - pos) ** 2).sum(axis=1)
                        blocked = bool(np.any(d2 < (obs_r + r_here + clearance) ** 2))
                if not blocked and len(branch_pts) > tail:
                    own = np.asarray(branch_pts[:-tail])
                    own_r = np.asarray(branch_rads[:-tail])
                    d2 = ((own - pos) ** 2).sum(axis=1)
                    blocked = bool(np.any(d2 < (own_r + r_here + clearance) ** 2))
                if blocked:
                    alive = False
                    break
                branch_pts.append(pos.copy())
                branch_rads.append(r_here)
            pts.extend(branch_pts)
            rads.extend(branch_rads)
            drops.extend([drop] * len(branch_pts))
            if alive and depth < 2 and remaining - seg_len > 8:
                if end_dia > 5.0:
                    # still too wide to branch cleanly: keep walking and tapering
                    queue.append((pos.copy(), ang, end_dia, remaining - seg_len, depth))
                elif end_dia > 1.5 * d_min:
                    # narrow opening angle keeps the junction bulge below a pixel
                    half_open = rng.uniform(0.2, 0.4)
                    for sign in (-1.0, 1.0):
                        share = rng.uniform(0.4, 0.7)
                        queue.append((
                            pos.copy(),
                            ang + sign * half_open,
                            end_dia * rng.uniform(0.7, 0.9),
                            (remaining - seg_len) * share,
                            depth + 1,
                        ))
    return np.asarray(pts), np.asarray(rads), np.asarray(drops)


def _low_frequency_field(shape, rng, max_cycles=3):
    """Random smooth field from Fourier modes up to max_cycles per image,
    normalized to peak magnitude 1. Contains no energy above the cutoff."""
    H, W = shape
    yy = np.arange(H)[:, None] / H
    xx = np.arange(W)[None, :] / W
    out = np.zeros((H, W))
    for ky in range(-max_cycles, max_cycles + 1):
        for kx in range(0, max_cycles + 1):
            if kx == 0 and ky <= 0:
                continue
            if ky * ky + kx * kx > max_cycles * max_cycles:
                continue
            phase = 2 * np.pi * (ky * yy + kx * xx)
            out += rng.normal() * np.cos(phase) + rng.normal() * np.sin(phase)
    peak = np.abs(out).max()
    return out / peak if peak > 0 else out


def generate(cfg=None):
    """One phantom sample, fully determined by cfg.seed."""
    cfg = cfg if cfg is not None else PhantomConfig()
    rng = np.random.default_rng(cfg.seed)
    H, W = cfg.size
    center = np.array([(H - 1) / 2.0, (W - 1) / 2.0])
    fov_radius = cfg.vignette * min(H, W) / 2.0

    yy, xx = np.mgrid[0:H, 0:W].astype(np.float64)
    rho = np.hypot(yy - center[0], xx - center[1])
    fov = rho <= fov_radius

    pts, rads, drops = _grow_trees(cfg, rng, fov_radius, center)
    label = np.zeros((H, W), dtype=bool)
    diameter = np.zeros((H, W))
    darkening = np.zeros((H, W))
    if len(pts):
        tree = cKDTree(pts)
        max_r = rads.max()
        # signed margin to the tube union: max over nearby samples of r - dist
        k = min(12, len(pts))
        dist, idx = tree.query(np.column_stack([yy.ravel(), xx.ravel()]), k=k,
                               distance_upper_bound=max_r + AA_WIDTH + 1.0)
        if k == 1:
            dist, idx = dist[:, None], idx[:, None]
        hit = np.isfinite(dist[:, 0])
        dist = dist[hit]
        idx = np.minimum(idx[hit], len(pts) - 1)  # out-of-range marks on misses
        margins = np.where(np.isfinite(dist), rads[idx] - dist, -np.inf)
        best = np.argmax(margins, axis=1)
        rows = np.arange(len(best))
        margin = margins[rows, best]
        sample = idx[rows, best]
        inside = margin >= 0.0
        t_in = np.clip(margin / AA_WIDTH, 0.0, 1.0)
        t_out = np.clip(1.0 + margin / AA_WIDTH, 0.0, 1.0)
        profile = np.where(inside,
                           INSIDE_FLOOR + (1.0 - INSIDE_FLOOR) * t_in,
                           OUTSIDE_CAP * t_out)
        flat_hit = np.flatnonzero(hit)
        label.ravel()[flat_hit[inside]] = True
        diameter.ravel()[flat_hit[inside]] = 2.0 * rads[sample[inside]]
        darkening.ravel()[flat_hit] = profile * drops[sample]

    label &= fov
    diameter[~label] = 0.0

    image = np.full((H, W), BACKGROUND)
    image -= darkening
    if cfg.background_amplitude > 0:
        field = _low_frequency_field((H, W), rng)
        image += cfg.background_amplitude * field
        image *= 1.0 - cfg.background_amplitude * (rho / max(fov_radius, 1.0)) ** 2
    if cfg.noise_sigma > 0:
        image += rng.normal(0.0, cfg.noise_sigma, size=(H, W))
    image[~fov] = OUTSIDE_FOV
    image = np.clip(image, 0.0, 1.0)

    weight, _ = weight_map(label)
    return LabeledSample(image=image, label=label, fov=fov, weight=weight, diameter=diameter)


def generate_suite(n=20, base_seed=1000, config=None):
    """n phantoms with disjoint seeds split 40/10/50 into train/val/test."""
    if n < 6:
        raise ConfigurationError("suite needs at least 6 samples")
    base = config if config is not None else PhantomConfig()
    n_train = max(1, round(0.4 * n))
    n_val = max(1, round(0.1 * n))
    n_test = n - n_train - n_val
    if n_test < 1:
        raise ConfigurationError("split leaves no test samples")
    seeds = [base_seed + i for i in range(n)]
    samples = []
    for s in seeds:
        cfg = PhantomConfig(size=base.size, n_trees=base.n_trees,
                            diameter_range=base.diameter_range, tortuosity=base.tortuosity,
                            background_amplitude=base.background_amplitude,
                            vignette=base.vignette, noise_sigma=base.noise_sigma,
                            contrast_range=base.contrast_range, seed=s)
        samples.append(generate(cfg))
    suite = SampleSuite(
        train=samples[:n_train],
        val=samples[n_train:n_train + n_val],
        test=samples[n_train + n_val:],
    )
    suite.seeds = {
        "train": seeds[:n_train],
        "val": seeds[n_train:n_train + n_val],
        "test": seeds[n_train + n_val:],
    }
    return suite
