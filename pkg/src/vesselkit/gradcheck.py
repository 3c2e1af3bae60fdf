"""Analytic-vs-finite-difference gradient verification.

A fragment is a tiny model: a set of trainable tensors plus a forward
callable that rebuilds a scalar loss from scratch each time it runs. The
checker backpropagates once for the analytic gradients, then central
finite differences probe randomly chosen scalar parameters.
"""

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .exceptions import CheckFailure, ConfigurationError

REL_ERR_FLOOR = 1e-6  # denominator floor so near-zero gradients are comparable


@dataclass
class Fragment:
    name: str
    op_kinds: tuple
    params: list  # trainable tensors probed by the checker
    forward: callable  # () -> scalar Tensor, uses only self.params and captured constants


@dataclass
class ProbeResult:
    fragment: str
    op_kinds: tuple
    max_rel_err: float
    worst_param: str
    probes: int


@dataclass
class GradCheckReport:
    tolerance: float
    step: float
    results: list = field(default_factory=list)

    @property
    def ok(self):
        return all(r.max_rel_err < self.tolerance for r in self.results)

    def max_by_op_kind(self):
        worst = {}
        for r in self.results:
            for kind in r.op_kinds:
                worst[kind] = max(worst.get(kind, 0.0), r.max_rel_err)
        return worst

    def format(self):
        lines = [f"gradient check  tolerance={self.tolerance:g}  step={self.step:g}"]
        for kind, err in sorted(self.max_by_op_kind().items()):
            status = "ok" if err < self.tolerance else "FAIL"
            lines.append(f"  {kind:<22s} max rel err {err:.3e}  {status}")
        lines.append("PASS" if self.ok else "FAIL")
        return "\n".join(lines)


def grad_check(fragment, probe_count=20, step=1e-5, tolerance=1e-4, rng=None, raise_on_fail=True):
    """Compare analytic gradients of ``fragment`` against central differences
    at ``probe_count`` randomly chosen scalar parameters."""
    if not fragment.params:
        raise ConfigurationError(f"fragment {fragment.name!r}: no trainable tensors to probe")
    rng = rng if rng is not None else np.random.default_rng(0)

    for t in fragment.params:
        t.grad = None
    graph = ad.Graph()
    with graph:
        loss = fragment.forward()
    graph.backward(loss)
    analytic = {id(t): (np.zeros_like(t.data) if t.grad is None else t.grad.copy()) for t in fragment.params}
    graph.reset()

    max_rel = 0.0
    worst = ""
    sizes = np.array([t.data.size for t in fragment.params], dtype=float)
    for _ in range(probe_count):
        ti = int(rng.choice(len(fragment.params), p=sizes / sizes.sum()))
        tensor = fragment.params[ti]
        flat = tensor.data.reshape(-1)
        k = int(rng.integers(flat.size))
        saved = flat[k]
        flat[k] = saved + step
        up = fragment.forward().item()
        flat[k] = saved - step
        down = fragment.forward().item()
        flat[k] = saved
        fd = (up - down) / (2.0 * step)
        an = float(analytic[id(tensor)].reshape(-1)[k])
        rel = abs(fd - an) / max(abs(fd), abs(an), REL_ERR_FLOOR)
        if rel > max_rel:
            max_rel = rel
            worst = f"{tensor.name or f'param{ti}'}[{k}]"

    result = ProbeResult(fragment.name, fragment.op_kinds, max_rel, worst, probe_count)
    if raise_on_fail and max_rel >= tolerance:
        raise CheckFailure(
            f"gradient check failed for {fragment.name!r} (ops {', '.join(fragment.op_kinds)}): "
            f"max rel err {max_rel:.3e} at {worst}, tolerance {tolerance:g}",
            report=result,
        )
    return result


def run_fragments(fragments, probe_count=20, step=1e-5, tolerance=1e-4, seed=0):
    """Check a list of fragments and collect a per-op-kind report."""
    report = GradCheckReport(tolerance=tolerance, step=step)
    rng = np.random.default_rng(seed)
    for frag in fragments:
        result = grad_check(
            frag, probe_count=probe_count, step=step, tolerance=tolerance, rng=rng,
            raise_on_fail=False,
        )
        report.results.append(result)
    return report


# ---------------------------------------------------------------------------
# standard fragment library: one small composite per op kind


def _param(rng, shape, name, scale=1.0, offset=0.0):
    t = ad.Tensor(offset + scale * rng.standard_normal(shape), requires_grad=True, dtype=np.float64)
    t.name = name
    return t


def standard_fragments(seed=0):
    """Small fragments covering every registered op kind. All use float64."""
    rng = np.random.default_rng(seed)
    frags = []

    def frag(name, kinds, params, forward):
        frags.append(Fragment(name, tuple(kinds), params, forward))

    x = _param(rng, (1, 1, 5, 5), "x")
    w = _param(rng, (2, 1, 3, 3), "w", scale=0.5)
    b = _param(rng, (1, 2, 1, 1), "b", scale=0.1)
    frag("conv3x3", ["conv2d"], [x, w, b],
         lambda: ad.reduce_sum(ad.sigmoid(ad.conv2d(x, w, b, padding=1))))

    xd = _param(rng, (1, 1, 7, 7), "xd")
    wd = _param(rng, (1, 1, 3, 3), "wd", scale=0.5)
    frag("conv_dilated", ["conv2d"], [xd, wd],
         lambda: ad.reduce_sum(ad.square(ad.conv2d(xd, wd, dilation=2, padding=2))))

    xs = _param(rng, (1, 1, 6, 6), "xs")
    ws = _param(rng, (1, 1, 3, 3), "ws", scale=0.5)
    frag("conv_strided", ["conv2d"], [xs, ws],
         lambda: ad.reduce_sum(ad.exp(ad.affine(ad.conv2d(xs, ws, stride=2, padding=1), 0.3))))

    a = _param(rng, (1, 2, 4, 4), "a")
    bb = _param(rng, (1, 2, 4, 4), "bb")
    s = _param(rng, (1, 1, 1, 1), "s", scale=0.3, offset=1.0)
    frag("arith", ["add", "subtract", "multiply", "divide", "affine"], [a, bb, s],
         lambda: ad.reduce_mean(
             ad.divide(ad.add(ad.multiply(a, bb), ad.affine(a, 0.5, 0.1)),
                       ad.add(ad.square(ad.subtract(a, bb)), ad.square(s)))))

    e = _param(rng, (1, 1, 4, 4), "e", scale=0.8)
    frag("exp", ["exp"], [e], lambda: ad.reduce_sum(ad.exp(e)))
    frag("log_sqrt", ["log", "sqrt", "square", "absolute"], [e],
         lambda: ad.reduce_sum(ad.log(ad.sqrt(ad.affine(ad.square(ad.absolute(e)), 1.0, 0.5)))))
    frag("sigmoid", ["sigmoid"], [e], lambda: ad.reduce_sum(ad.square(ad.sigmoid(e))))
    frag("power", ["power"], [e],
         lambda: ad.reduce_sum(ad.power(ad.affine(ad.sigmoid(e), 0.9, 0.05), 2.5)))

    lr = _param(rng, (1, 1, 4, 4), "lr")
    lr.data[np.abs(lr.data) < 0.05] = 0.1  # keep probes away from the kink
    frag("leaky_relu", ["leaky_relu"], [lr],
         lambda: ad.reduce_sum(ad.square(ad.leaky_relu(lr, 0.2))))

    sel = _param(rng, (1, 1, 4, 4), "sel")
    sel_mask = rng.standard_normal((1, 1, 4, 4)) > 0
    frag("select", ["select"], [sel],
         lambda: ad.reduce_sum(ad.select(sel_mask, ad.square(sel), ad.affine(sel, 2.0))))

    sm = _param(rng, (1, 3, 3, 3), "sm")
    frag("softmax", ["softmax_channels"], [sm],
         lambda: ad.reduce_sum(ad.square(ad.softmax_channels(sm))))

    bm = _param(rng, (1, 1, 6, 6), "bm")
    frag("box_mean", ["box_mean"], [bm],
         lambda: ad.reduce_sum(ad.square(ad.box_mean(bm, 2))))

    rd = _param(rng, (1, 1, 4, 4), "rd")
    frag("reduce_mean", ["reduce_mean", "reduce_sum"], [rd],
         lambda: ad.add(ad.reduce_mean(ad.square(rd)), ad.affine(ad.reduce_sum(rd), 0.01)))

    mc = _param(rng, (1, 3, 4, 4), "mc")
    mc.data += np.arange(3).reshape(1, 3, 1, 1)  # separate channels: stable argmax
    frag("max_channels", ["reduce_max_channels"], [mc],
         lambda: ad.reduce_sum(ad.square(ad.reduce_max_channels(mc))))

    cc1 = _param(rng, (1, 2, 4, 4), "cc1")
    cc2 = _param(rng, (1, 1, 4, 4), "cc2")
    frag("concat_slice", ["concat_channels", "slice_channels"], [cc1, cc2],
         lambda: ad.reduce_sum(ad.square(
             ad.slice_channels(ad.concat_channels([cc1, cc2]), 1, 3))))

    mp = _param(rng, (1, 2, 4, 4), "mp")
    mp.data += np.arange(16).reshape(1, 1, 4, 4) * 0.5  # unique block maxima
    frag("pool_upsample", ["maxpool2", "upsample2"], [mp],
         lambda: ad.reduce_sum(ad.square(ad.upsample2(ad.maxpool2(mp)))))

    pd = _param(rng, (1, 1, 4, 5), "pd")
    frag("pad_crop", ["pad_reflect", "crop"], [pd],
         lambda: ad.reduce_sum(ad.square(ad.crop(ad.pad_reflect(pd, (1, 2, 1, 1)), 1, 0, 4, 6))))

    ca = _param(rng, (2, 3, 3, 3), "ca")
    cs = _param(rng, (1, 3, 1, 1), "cs", offset=1.0, scale=0.2)
    ch = _param(rng, (1, 3, 1, 1), "ch", scale=0.2)
    frag("channel_affine", ["channel_affine"], [ca, cs, ch],
         lambda: ad.reduce_sum(ad.square(ad.channel_affine(ca, cs, ch))))

    bn = _param(rng, (3, 2, 3, 3), "bn")
    bs = _param(rng, (1, 2, 1, 1), "bs", offset=1.0, scale=0.2)
    bh = _param(rng, (1, 2, 1, 1), "bh", scale=0.2)
    # weight the outputs so the loss is not a pure function of batch variance
    bn_probe = ad.Tensor(rng.standard_normal((3, 2, 3, 3)), dtype=np.float64)
    frag("batch_norm", ["batch_norm"], [bn, bs, bh],
         lambda: ad.reduce_sum(ad.square(ad.multiply(ad.batch_norm_train(bn, bs, bh)[0], bn_probe))))

    return frags
