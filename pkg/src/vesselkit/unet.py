"""Configurable toy encoder-decoder segmenter / preprocessing network.

Encoder levels are two 3x3 conv + norm + ReLU blocks with 2x2 max pooling
between them; the decoder upsamples (nearest neighbor), reduces channels with
a 1x1 convolution, concatenates the skip connection, and applies two more
conv blocks. The head is a 1x1 convolution into either a 2-channel softmax
(segmenter mode) or a 1-channel sigmoid (preprocessing mode).

Inputs whose sides are not divisible by 2^(levels-1) are mirror-padded and
cropped back, so the output spatial shape always equals the input shape.
"""

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .exceptions import ConfigurationError
from .params import ModelParams

BN_EPS = 1e-5
BN_MOMENTUM = 0.9


@dataclass(frozen=True)
class UNetConfig:
    levels: int = 2
    features: int = 8
    mode: str = "segment"  # "segment" (2-ch softmax) or "preprocess" (1-ch sigmoid)
    use_norm: bool = True

    def __post_init__(self):
        if self.levels < 1:
            raise ConfigurationError("levels must be >= 1")
        if self.features < 1:
            raise ConfigurationError("features must be >= 1")
        if self.mode not in ("segment", "preprocess"):
            raise ConfigurationError(f"unknown mode {self.mode!r}")

    @property
    def out_channels(self):
        return 2 if self.mode == "segment" else 1


class UNet:
    """Encoder-decoder with skip connections at a configurable toy scale."""

    def __init__(self, config=None, dtype=np.float32, seed=0):
        self.config = config if config is not None else UNetConfig()
        self.dtype = np.dtype(dtype)
        self.train_mode = True
        self._params = ModelParams()
        self._running = {}  # norm layer name -> (mean, var) arrays
        rng = np.random.default_rng(seed)

        cfg = self.config
        self._enc_channels = [cfg.features * (2 ** i) for i in range(cfg.levels)]
        in_ch = 1
        for lvl, out_ch in enumerate(self._enc_channels):
            self._add_block(rng, f"enc{lvl}a", in_ch, out_ch, 3)
            self._add_block(rng, f"enc{lvl}b", out_ch, out_ch, 3)
            in_ch = out_ch
        for lvl in range(cfg.levels - 2, -1, -1):
            deep_ch = self._enc_channels[lvl + 1]
            skip_ch = self._enc_channels[lvl]
            self._add_block(rng, f"up{lvl}", deep_ch, skip_ch, 1, norm=False)
            self._add_block(rng, f"dec{lvl}a", 2 * skip_ch, skip_ch, 3)
            self._add_block(rng, f"dec{lvl}b", skip_ch, skip_ch, 3)
        self._add_block(rng, "head", cfg.features, cfg.out_channels, 1, norm=False)

    def _add_block(self, rng, name, in_ch, out_ch, k, norm=None):
        use_norm = self.config.use_norm if norm is None else norm
        fan_in = in_ch * k * k
        w = rng.standard_normal((out_ch, in_ch, k, k)) * np.sqrt(2.0 / fan_in)
        self._params.add(f"{name}.weight", ad.Tensor(w, requires_grad=True, dtype=self.dtype),
                         init="he_normal")
        if not use_norm:
            # a bias ahead of a normalization layer is a dead parameter
            self._params.add(f"{name}.bias",
                             ad.Tensor(np.zeros((1, out_ch, 1, 1)), requires_grad=True, dtype=self.dtype),
                             init="zeros", regularize=False)
        if use_norm:
            self._params.add(f"{name}.norm_scale",
                             ad.Tensor(np.ones((1, out_ch, 1, 1)), requires_grad=True, dtype=self.dtype),
                             init="ones", regularize=False)
            self._params.add(f"{name}.norm_shift",
                             ad.Tensor(np.zeros((1, out_ch, 1, 1)), requires_grad=True, dtype=self.dtype),
                             init="zeros", regularize=False)
            self._running[name] = (
                np.zeros(out_ch, dtype=np.float64),
                np.ones(out_ch, dtype=np.float64),
            )

    def params(self):
        return self._params

    def running_stats(self):
        return self._running

    def _conv_block(self, x, name, k, activate=True):
        p = self._params
        bias = p[f"{name}.bias"] if f"{name}.bias" in p else None
        h = ad.conv2d(x, p[f"{name}.weight"], bias, padding=k // 2)
        if name in self._running:
            h = self._norm(h, name)
        if activate:
            h = ad.relu(h)
        return h

    def _norm(self, x, name):
        p = self._params
        scale, shift = p[f"{name}.norm_scale"], p[f"{name}.norm_shift"]
        if self.train_mode:
            out, mean, var = ad.batch_norm_train(x, scale, shift, eps=BN_EPS)
            rm, rv = self._running[name]
            rm *= BN_MOMENTUM
            rm += (1.0 - BN_MOMENTUM) * mean
            rv *= BN_MOMENTUM
            rv += (1.0 - BN_MOMENTUM) * var
            return out
        rm, rv = self._running[name]
        return ad.batch_norm_infer(x, scale, shift, rm, rv, eps=BN_EPS)

    def forward(self, x):
        """Segmentation probabilities or the preprocessed plane, matching the
        input's spatial shape."""
        if x.shape[1] != 1:
            raise ConfigurationError("UNet expects single-channel input")
        cfg = self.config
        H, W = x.shape[2], x.shape[3]
        div = 2 ** (cfg.levels - 1)
        pad_b = (-H) % div
        pad_r = (-W) % div
        if pad_b or pad_r:
            x = ad.pad_reflect(x, (0, pad_b, 0, pad_r))

        skips = []
        h = x
        for lvl in range(cfg.levels):
            h = self._conv_block(h, f"enc{lvl}a", 3)
            h = self._conv_block(h, f"enc{lvl}b", 3)
            if lvl < cfg.levels - 1:
                skips.append(h)
                h = ad.maxpool2(h)
        for lvl in range(cfg.levels - 2, -1, -1):
            h = ad.upsample2(h)
            h = self._conv_block(h, f"up{lvl}", 1, activate=False)
            h = ad.concat_channels([skips[lvl], h])
            h = self._conv_block(h, f"dec{lvl}a", 3)
            h = self._conv_block(h, f"dec{lvl}b", 3)
        h = self._conv_block(h, "head", 1, activate=False)
        if pad_b or pad_r:
            h = ad.crop(h, 0, 0, H, W)
        if cfg.mode == "segment":
            return ad.softmax_channels(h)
        return ad.sigmoid(h)


def count_unet_params(config):
    """Closed-form parameter count broken down by block."""
    cfg = config
    counts = {}

    def conv(name, in_ch, out_ch, k, norm):
        n = in_ch * out_ch * k * k
        # bias only without a following norm layer; scale+shift otherwise
        n += 2 * out_ch if norm else out_ch
        counts[name] = n

    enc = [cfg.features * (2 ** i) for i in range(cfg.levels)]
    in_ch = 1
    for lvl, out_ch in enumerate(enc):
        conv(f"enc{lvl}a", in_ch, out_ch, 3, cfg.use_norm)
        conv(f"enc{lvl}b", out_ch, out_ch, 3, cfg.use_norm)
        in_ch = out_ch
    for lvl in range(cfg.levels - 2, -1, -1):
        conv(f"up{lvl}", enc[lvl + 1], enc[lvl], 1, False)
        conv(f"dec{lvl}a", 2 * enc[lvl], enc[lvl], 3, cfg.use_norm)
        conv(f"dec{lvl}b", enc[lvl], enc[lvl], 3, cfg.use_norm)
    conv("head", cfg.features, cfg.out_channels, 1, False)
    return {"per_block": counts, "total": sum(counts.values())}
