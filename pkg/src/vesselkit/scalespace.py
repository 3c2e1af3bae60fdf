"""Gaussian scale-space machinery: second-derivative kernels, Hessians, and
the closed-form eigendecomposition of the 2x2 symmetric Hessian.

Axis convention: x runs along image columns (width), y along rows (height).
"""

import math
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .exceptions import ConfigurationError

# Keeps eigenvalue gradients finite where the discriminant vanishes.
EPS_EIG = 1e-12


def default_kernel_size(sigma):
    """Odd kernel size 2*ceil(3*sigma)+1, covering >= 99% of the Gaussian mass."""
    return 2 * math.ceil(3.0 * sigma) + 1


@dataclass(frozen=True)
class ScaleBank:
    """The set of analysis scales and the kernel sampling policy.

    gamma_normalize multiplies second derivatives by sigma^2 so responses are
    comparable across scales (required for a meaningful multi-scale maximum).
    """

    sigmas: tuple = (0.5, 1.0, 1.5, 2.0, 2.5, 3.0, 3.5, 4.0)
    gamma_normalize: bool = True
    size_rule: callable = field(default=default_kernel_size, repr=False)

    def __post_init__(self):
        for s in self.sigmas:
            if s <= 0:
                raise ConfigurationError(f"scale sigma must be positive, got {s}")
            if self.size_rule(s) < 3 or self.size_rule(s) % 2 == 0:
                raise ConfigurationError(f"kernel size rule must yield odd sizes >= 3, got {self.size_rule(s)} for sigma={s}")

    def kernel_sizes(self):
        return tuple(self.size_rule(s) for s in self.sigmas)


def gaussian_second_derivative_kernels(sigma, size=None, gamma_normalize=True):
    """Sample d2G/dx2, d2G/dxdy, d2G/dy2 on an odd grid.

    gxx and gyy are mean-subtracted so they sum to exactly zero (zero response
    to constant images); gxy is antisymmetric and sums to zero by construction.
    Each kernel is then rescaled so its discrete quadratic response matches
    the continuous operator (gxx applied to x*x/2 gives exactly 1), which the
    truncated grid would otherwise underestimate by several percent.
    Returns float64 arrays (gxx, gxy, gyy).
    """
    if sigma <= 0:
        raise ConfigurationError(f"sigma must be positive, got {sigma}")
    if size is None:
        size = default_kernel_size(sigma)
    if size % 2 == 0 or size < 3:
        raise ConfigurationError(f"kernel size must be odd and >= 3, got {size}")
    half = size // 2
    coords = np.arange(-half, half + 1, dtype=np.float64)
    x = coords[None, :]  # columns
    y = coords[:, None]  # rows
    s2 = sigma * sigma
    g = np.exp(-(x * x + y * y) / (2.0 * s2)) / (2.0 * np.pi * s2)
    gxx = (x * x / s2 - 1.0) / s2 * g
    gyy = (y * y / s2 - 1.0) / s2 * g
    gxy = (x * y) / (s2 * s2) * g
    gxx = gxx - gxx.mean()
    gyy = gyy - gyy.mean()
    # moment calibration: response to x^2 must be 2, to x*y must be 1
    gxx = gxx * (2.0 / (gxx * x * x).sum())
    gyy = gyy * (2.0 / (gyy * y * y).sum())
    gxy = gxy * (1.0 / (gxy * x * y).sum())
    if gamma_normalize:
        gxx, gxy, gyy = s2 * gxx, s2 * gxy, s2 * gyy
    return gxx, gxy, gyy


def hessian_kernel_stack(sigma, size=None, gamma_normalize=True):
    """The three derivative kernels stacked as a (3, 1, k, k) conv weight
    in (gxx, gxy, gyy) channel order."""
    gxx, gxy, gyy = gaussian_second_derivative_kernels(sigma, size, gamma_normalize)
    return np.stack([gxx, gxy, gyy])[:, None]


def hessian(image, sigma, size=None, gamma_normalize=True):
    """Gaussian-derivative Hessian responses of a single-channel tensor.

    Returns (hxx, hxy, hyy) tensors computed by zero-padded convolution with
    analytic kernels. The trainable variant lives in the Frangi network, which
    initializes its kernels from the same stack.
    """
    if image.shape[1] != 1:
        raise ConfigurationError("hessian expects a single-channel tensor")
    stack = hessian_kernel_stack(sigma, size, gamma_normalize)
    weight = ad.Tensor(stack, dtype=image.dtype)
    out = ad.conv2d(image, weight, padding=stack.shape[2] // 2)
    hxx = ad.slice_channels(out, 0, 1)
    hxy = ad.slice_channels(out, 1, 2)
    hyy = ad.slice_channels(out, 2, 3)
    return hxx, hxy, hyy


def eig2x2_sym(hxx, hxy, hyy, eps_eig=EPS_EIG):
    """Per-pixel eigenvalues of [[hxx, hxy], [hxy, hyy]], ordered so that
    |lambda1| <= |lambda2|. Differentiable; ``eps_eig`` sits inside the
    discriminant square root so gradients stay finite at degeneracies."""
    if hxx.shape != hxy.shape or hxx.shape != hyy.shape:
        raise ConfigurationError("eig2x2_sym: the three planes must share a shape")
    m = ad.affine(ad.add(hxx, hyy), 0.5)
    half_diff = ad.affine(ad.subtract(hxx, hyy), 0.5)
    disc = ad.add(ad.square(half_diff), ad.square(hxy))
    s = ad.sqrt(ad.affine(disc, 1.0, eps_eig))
    lo = ad.subtract(m, s)  # algebraically smaller eigenvalue
    hi = ad.add(m, s)
    lo_first = np.abs(lo.data) <= np.abs(hi.data)
    lam1 = ad.select(lo_first, lo, hi)
    lam2 = ad.select(lo_first, hi, lo)
    return lam1, lam2
