"""Guided filtering: the classical local-linear-model filter and the
trainable preprocessing block built from it.

The guided filter output q is a shift-variant linear function of the filtered
signal p whose kernel depends only on the guidance image I: within each
radius-r window, q is the window-averaged local regression a*I + b with
a = cov(I, p) / (var(I) + eps) and b = mean(p) - a*mean(I).

The trainable block generates its own guidance with a five-layer dilated
context aggregation stack (dilations 1, 2, 4, 8, 1) and feeds the filter a
feature-extracted version of the input (two 3x3 convs, 1 -> 5 -> 1).
"""

import numpy as np

from . import autodiff as ad
from .exceptions import ConfigurationError
from .params import ModelParams

LEAKY_SLOPE = 0.2


class GuidedFilterConfig:
    def __init__(self, radius=2, epsilon=1e-2):
        if radius < 1:
            raise ConfigurationError("guided filter radius must be >= 1")
        if epsilon < 0:
            raise ConfigurationError("guided filter epsilon must be >= 0")
        self.radius = int(radius)
        self.epsilon = float(epsilon)

    def __repr__(self):
        return f"GuidedFilterConfig(radius={self.radius}, epsilon={self.epsilon})"


def guided_filter(p, guide, radius=2, epsilon=1e-2):
    """Edge-preserving filtering of p steered by the guidance image.

    Fully differentiable w.r.t. both inputs (and anything upstream of the
    guidance). Accepts tensors or 2-D arrays; returns a tensor.
    """
    if not isinstance(p, ad.Tensor):
        p = ad.from_plane(np.asarray(p, dtype=np.float64))
    if not isinstance(guide, ad.Tensor):
        guide = ad.from_plane(np.asarray(guide, dtype=np.float64))
    if p.shape != guide.shape:
        raise ConfigurationError(f"guided_filter: p {p.shape} and guidance {guide.shape} differ")
    r = int(radius)
    mean_i = ad.box_mean(guide, r)
    mean_p = ad.box_mean(p, r)
    cov = ad.subtract(ad.box_mean(ad.multiply(guide, p), r), ad.multiply(mean_i, mean_p))
    var = ad.subtract(ad.box_mean(ad.multiply(guide, guide), r), ad.square(mean_i))
    a = ad.divide(cov, ad.affine(var, 1.0, epsilon))
    b = ad.subtract(mean_p, ad.multiply(a, mean_i))
    return ad.add(ad.multiply(ad.box_mean(a, r), guide), ad.box_mean(b, r))


def _he_kernel(rng, out_ch, in_ch, k, scale=1.0):
    fan_in = in_ch * k * k
    return rng.standard_normal((out_ch, in_ch, k, k)) * scale * np.sqrt(2.0 / fan_in)


def _identity_kernel(out_ch, in_ch, k, noise=None):
    """Center-tap passthrough of channel 0, plus optional noise elsewhere."""
    w = np.zeros((out_ch, in_ch, k, k)) if noise is None else noise.copy()
    w[0, 0, k // 2, k // 2] = 1.0
    return w


class GuidedFilterLayer:
    """Trainable guided filter preprocessing block.

    can1..can5: 3x3 convolutions with dilations (1, 2, 4, 8, 1) and widths
    1 -> w -> w -> w -> w -> 1; trainable per-channel scale/shift after each
    hidden conv; leaky ReLU (slope 0.2) between layers. The extractor is two
    3x3 convolutions 1 -> 5 -> 1 with a leaky ReLU between.

    Initialization passes channel 0 through every layer unchanged (plus small
    noise on the remaining taps), so at step 0 the block behaves as a mild
    self-guided edge-preserving smoother of its input.
    """

    DILATIONS = (1, 2, 4, 8, 1)

    def __init__(self, width=10, gf_config=None, dtype=np.float32, seed=0,
                 noise_scale=0.1, identity_init=True):
        self.width = int(width)
        self.gf = gf_config if gf_config is not None else GuidedFilterConfig()
        self.dtype = np.dtype(dtype)
        self._params = ModelParams()
        rng = np.random.default_rng(seed)

        chans = [1, self.width, self.width, self.width, self.width, 1]
        for i, dil in enumerate(self.DILATIONS):
            in_ch, out_ch = chans[i], chans[i + 1]
            noise = _he_kernel(rng, out_ch, in_ch, 3, scale=noise_scale)
            w = _identity_kernel(out_ch, in_ch, 3, noise) if identity_init else noise
            init = "identity+he_noise" if identity_init else "he_normal"
            self._params.add(f"can{i + 1}.weight",
                             ad.Tensor(w, requires_grad=True, dtype=self.dtype),
                             init=f"{init}(seed={seed})")
            self._params.add(f"can{i + 1}.bias",
                             ad.Tensor(np.zeros((1, out_ch, 1, 1)), requires_grad=True,
                                       dtype=self.dtype),
                             init="zeros", regularize=False)
            if i < len(self.DILATIONS) - 1:  # scale/shift on hidden layers only
                self._params.add(f"can{i + 1}.scale",
                                 ad.Tensor(np.ones((1, out_ch, 1, 1)), requires_grad=True,
                                           dtype=self.dtype),
                                 init="ones", regularize=False)
                self._params.add(f"can{i + 1}.shift",
                                 ad.Tensor(np.zeros((1, out_ch, 1, 1)), requires_grad=True,
                                           dtype=self.dtype),
                                 init="zeros", regularize=False)

        for name, (in_ch, out_ch) in (("extract1", (1, 5)), ("extract2", (5, 1))):
            noise = _he_kernel(rng, out_ch, in_ch, 3, scale=noise_scale)
            w = _identity_kernel(out_ch, in_ch, 3, noise) if identity_init else noise
            self._params.add(f"{name}.weight",
                             ad.Tensor(w, requires_grad=True, dtype=self.dtype),
                             init="identity+he_noise" if identity_init else "he_normal")
            self._params.add(f"{name}.bias",
                             ad.Tensor(np.zeros((1, out_ch, 1, 1)), requires_grad=True,
                                       dtype=self.dtype),
                             init="zeros", regularize=False)

    def params(self):
        return self._params

    def guidance(self, x):
        """Guidance map from the dilated context stack; same shape as x."""
        if x.shape[1] != 1:
            raise ConfigurationError("guidance generator expects single-channel input")
        p = self._params
        h = x
        last = len(self.DILATIONS) - 1
        for i, dil in enumerate(self.DILATIONS):
            h = ad.conv2d(h, p[f"can{i + 1}.weight"], p[f"can{i + 1}.bias"],
                          dilation=dil, padding=dil)
            if i < last:
                h = ad.channel_affine(h, p[f"can{i + 1}.scale"], p[f"can{i + 1}.shift"])
                h = ad.leaky_relu(h, LEAKY_SLOPE)
        return h

    def extract(self, x):
        p = self._params
        h = ad.conv2d(x, p["extract1.weight"], p["extract1.bias"], padding=1)
        h = ad.leaky_relu(h, LEAKY_SLOPE)
        return ad.conv2d(h, p["extract2.weight"], p["extract2.bias"], padding=1)

    def forward(self, x):
        """Enhanced single-channel output, same shape as the input."""
        guide = self.guidance(x)
        feat = self.extract(x)
        return guided_filter(feat, guide, self.gf.radius, self.gf.epsilon)


def count_gf_params(layer):
    """Per-layer parameter counts and the grand total."""
    breakdown = layer.params().breakdown()
    can = sum(v for k, v in breakdown.items() if k.startswith("can"))
    extractor = sum(v for k, v in breakdown.items() if k.startswith("extract"))
    return {
        "per_layer": breakdown,
        "guidance_stack": can,
        "extractor": extractor,
        "total": can + extractor,
    }
