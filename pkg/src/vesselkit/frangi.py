"""Multi-scale Hessian vesselness: the classical filter and its trainable
network counterpart.

The vesselness response of dark tubes at one scale is

    V0 = 0                                           if lambda2 < 0
    V0 = exp(-R_B^2 / (2 beta^2)) * (1 - exp(-S^2 / (2 c^2)))   otherwise

with blobness R_B = |lambda1| / |lambda2| and structureness
S^2 = lambda1^2 + lambda2^2 over the Hessian eigenvalues |lambda1| <= |lambda2|.

The trainable network keeps exactly this structure: one Hessian kernel stack
per scale (initialized to the analytic Gaussian derivatives), per-scale beta
and c (initialized to 0.5 and 1.0), the eight per-scale responses stacked as
channels through two 1x1 convolutions, and a softmax head whose channel 1 is
the vessel probability. At initialization the per-scale responses reproduce
the classical filter.
"""

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .exceptions import ConfigurationError
from .params import ModelParams
from .scalespace import ScaleBank, eig2x2_sym, hessian_kernel_stack

# Defines R_B at lambda1 = lambda2 = 0 as 0 (the structureness term then
# forces V0 = 0 there anyway).
EPS_DIV = 1e-10

DEFAULT_BETA = 0.5
DEFAULT_C = 1.0


@dataclass(frozen=True)
class VesselnessParams:
    beta: float = DEFAULT_BETA
    c: float = DEFAULT_C
    polarity: str = "dark_on_bright"

    def __post_init__(self):
        if self.beta <= 0 or self.c <= 0:
            raise ConfigurationError("beta and c must be positive")
        if self.polarity not in ("dark_on_bright", "bright_on_dark"):
            raise ConfigurationError(f"unknown polarity {self.polarity!r}")


def vesselness(lam1, lam2, beta, c, polarity="dark_on_bright", eps_div=EPS_DIV):
    """Single-scale vesselness response in [0, 1].

    lam1/lam2 may be tensors or arrays; beta and c may be python floats or
    positive scalar tensors (the trainable path). Differentiable w.r.t. all
    four; the polarity gate passes zero gradient where it clamps.
    """
    if not isinstance(lam1, ad.Tensor):
        lam1 = ad.Tensor(np.asarray(lam1, dtype=np.float64))
    if not isinstance(lam2, ad.Tensor):
        lam2 = ad.Tensor(np.asarray(lam2, dtype=np.float64))
    for v, label in ((beta, "beta"), (c, "c")):
        data = v.data if isinstance(v, ad.Tensor) else v
        if np.any(np.asarray(data) <= 0):
            raise ConfigurationError(f"{label} must be positive")
    if polarity == "bright_on_dark":
        lam1, lam2 = ad.negate(lam1), ad.negate(lam2)
    elif polarity != "dark_on_bright":
        raise ConfigurationError(f"unknown polarity {polarity!r}")

    beta = beta if isinstance(beta, ad.Tensor) else ad.scalar(beta, dtype=lam1.dtype)
    c = c if isinstance(c, ad.Tensor) else ad.scalar(c, dtype=lam1.dtype)

    rb = ad.divide(ad.absolute(lam1), ad.affine(ad.absolute(lam2), 1.0, eps_div))
    blob = ad.exp(ad.negate(ad.divide(ad.square(rb), ad.affine(ad.square(beta), 2.0))))
    s2 = ad.add(ad.square(lam1), ad.square(lam2))
    structure = ad.affine(ad.exp(ad.negate(ad.divide(s2, ad.affine(ad.square(c), 2.0)))), -1.0, 1.0)
    gate = ad.Tensor((lam2.data >= 0).astype(lam1.dtype.type))
    return ad.multiply(ad.multiply(blob, structure), gate)


class FrangiNet:
    """Trainable multi-scale vesselness network.

    Per scale: a (3, 1, k, k) Hessian kernel stack, raw beta/c parameters
    (squared in the forward pass to stay positive). Head: 1x1 conv 8->8,
    1x1 conv 8->2, softmax. Channel 1 of the output is vessel probability.
    """

    def __init__(self, bank=None, polarity="dark_on_bright", dtype=np.float32,
                 head_gain=4.0, head_bias=2.0, eps_div=EPS_DIV):
        self.bank = bank if bank is not None else ScaleBank()
        if polarity not in ("dark_on_bright", "bright_on_dark"):
            raise ConfigurationError(f"unknown polarity {polarity!r}")
        self.polarity = polarity
        self.dtype = np.dtype(dtype)
        self.eps_div = eps_div
        self._params = ModelParams()
        n = len(self.bank.sigmas)

        for i, sigma in enumerate(self.bank.sigmas):
            size = self.bank.size_rule(sigma)
            stack = hessian_kernel_stack(sigma, size, self.bank.gamma_normalize)
            self._params.add(
                f"scale{i}.kernels",
                ad.Tensor(stack, requires_grad=True, dtype=self.dtype),
                init=f"gaussian_hessian(sigma={sigma}, size={size})",
            )
            self._params.add(
                f"scale{i}.beta_raw",
                ad.scalar(np.sqrt(DEFAULT_BETA), dtype=self.dtype, requires_grad=True),
                init=f"sqrt({DEFAULT_BETA})", regularize=False,
            )
            self._params.add(
                f"scale{i}.c_raw",
                ad.scalar(np.sqrt(DEFAULT_C), dtype=self.dtype, requires_grad=True),
                init=f"sqrt({DEFAULT_C})", regularize=False,
            )

        w1 = np.eye(n, dtype=self.dtype)[:, :, None, None]
        self._params.add("head.w1", ad.Tensor(w1, requires_grad=True, dtype=self.dtype),
                         init="identity_1x1")
        self._params.add("head.b1", ad.Tensor(np.zeros((1, n, 1, 1)), requires_grad=True,
                                              dtype=self.dtype), init="zeros", regularize=False)
        w2 = np.zeros((2, n, 1, 1))
        w2[1, :, 0, 0] = head_gain / n  # vessel logit: scaled channel mean
        b2 = np.zeros((1, 2, 1, 1))
        b2[0, 0, 0, 0] = head_bias  # background logit offset
        self._params.add("head.w2", ad.Tensor(w2, requires_grad=True, dtype=self.dtype),
                         init=f"channel_mean(gain={head_gain})")
        self._params.add("head.b2", ad.Tensor(b2, requires_grad=True, dtype=self.dtype),
                         init=f"background_bias({head_bias})", regularize=False)

    def params(self):
        return self._params

    def _check_input(self, x):
        if x.shape[1] != 1:
            raise ConfigurationError("FrangiNet expects single-channel input")

    def scale_vesselness(self, x, scale_index):
        """Vesselness plane of one scale with the current (trainable) kernels."""
        self._check_input(x)
        p = self._params
        size = self.bank.size_rule(self.bank.sigmas[scale_index])
        h = ad.conv2d(x, p[f"scale{scale_index}.kernels"], padding=size // 2)
        lam1, lam2 = eig2x2_sym(
            ad.slice_channels(h, 0, 1), ad.slice_channels(h, 1, 2), ad.slice_channels(h, 2, 3)
        )
        beta = ad.square(p[f"scale{scale_index}.beta_raw"])
        c = ad.square(p[f"scale{scale_index}.c_raw"])
        return vesselness(lam1, lam2, beta, c, self.polarity, self.eps_div)

    def scale_stack(self, x):
        """All per-scale vesselness planes stacked as channels (B, S, H, W)."""
        return ad.concat_channels(
            [self.scale_vesselness(x, i) for i in range(len(self.bank.sigmas))]
        )

    def forward(self, x):
        """Two-channel per-pixel probability tensor; channel 1 is vessel."""
        stack = self.scale_stack(x)
        h = ad.conv2d(stack, self._params["head.w1"], self._params["head.b1"])
        logits = ad.conv2d(h, self._params["head.w2"], self._params["head.b2"])
        return ad.softmax_channels(logits)

    def max_response(self, x):
        """Per-pixel maximum over scales (classical combination rule) with the
        current kernels and parameters."""
        return ad.reduce_max_channels(self.scale_stack(x))


def classical_frangi(image, bank=None, params=None):
    """Classical multi-scale vesselness of a 2-D image in [0, 1].

    Analytic (non-trainable) kernels, per-pixel maximum over scales, no graph
    recording. Returns a float64 2-D array in [0, 1].
    """
    bank = bank if bank is not None else ScaleBank()
    params = params if params is not None else VesselnessParams()
    image = np.asarray(image, dtype=np.float64)
    if image.ndim != 2:
        raise ConfigurationError(f"classical_frangi expects a 2-D image, got shape {image.shape}")
    with ad.no_grad():
        net = FrangiNet(bank=bank, polarity=params.polarity, dtype=np.float64)
        for i in range(len(bank.sigmas)):
            net.params()[f"scale{i}.beta_raw"].data[...] = np.sqrt(params.beta)
            net.params()[f"scale{i}.c_raw"].data[...] = np.sqrt(params.c)
        out = net.max_response(ad.from_plane(image, dtype=np.float64))
    return out.plane().copy()


def count_frangi_params(model):
    """Per-component parameter counts and the grand total."""
    p = model.params()
    per_scale = {}
    for i, sigma in enumerate(model.bank.sigmas):
        per_scale[f"scale{i} (sigma={sigma})"] = int(np.prod(p[f"scale{i}.kernels"].shape))
    beta_c = 2 * len(model.bank.sigmas)
    head = sum(int(np.prod(p[name].shape)) for name in ("head.w1", "head.b1", "head.w2", "head.b2"))
    total = sum(per_scale.values()) + beta_c + head
    return {
        "kernels_per_scale": per_scale,
        "kernels_total": sum(per_scale.values()),
        "beta_c": beta_c,
        "head": head,
        "total": total,
    }
