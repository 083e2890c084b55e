"""Direct-formula reference implementations used as test oracles.

These deliberately avoid the library's separable filtering: SSIM statistics
come from an explicit dense window matrix, percentiles from a sorted list.
"""

import itertools
import math

import numpy as np


def window_matrix(shape, size=11, sigma=1.5):
    """Row-normalised Gaussian window weights between every pair of voxels."""
    coords = np.array(list(itertools.product(*[range(s) for s in shape])), dtype=np.float64)
    d2 = np.zeros((len(coords), len(coords)))
    inside = np.ones((len(coords), len(coords)), dtype=bool)
    for axis in range(3):
        diff = coords[:, None, axis] - coords[None, :, axis]
        d2 += diff**2
        inside &= np.abs(diff) <= size // 2
    w = np.exp(-d2 / (2 * sigma**2)) * inside
    return w / w.sum(axis=1, keepdims=True)


def ssim_direct(a, b, W, c1=1e-4, c2=9e-4):
    a = np.asarray(a, dtype=np.float64).ravel()
    b = np.asarray(b, dtype=np.float64).ravel()
    mu_a, mu_b = W @ a, W @ b
    var_a = W @ (a * a) - mu_a**2
    var_b = W @ (b * b) - mu_b**2
    cov = W @ (a * b) - mu_a * mu_b
    s = ((2 * mu_a * mu_b + c1) * (2 * cov + c2)) / ((mu_a**2 + mu_b**2 + c1) * (var_a + var_b + c2))
    return float(s.mean())


def quantile_direct(values, q):
    s = sorted(float(v) for v in np.ravel(values))
    pos = q * (len(s) - 1)
    lo = int(math.floor(pos))
    hi = min(lo + 1, len(s) - 1)
    return s[lo] + (pos - lo) * (s[hi] - s[lo])


def normalize_direct(v, lo=0.02, hi=0.98):
    p_lo, p_hi = quantile_direct(v, lo), quantile_direct(v, hi)
    v = np.asarray(v, dtype=np.float64)
    if p_hi <= p_lo:
        return np.zeros_like(v)
    return np.clip((v - p_lo) / (p_hi - p_lo), 0, 1)


def mae_direct(a, b):
    a, b = np.ravel(a), np.ravel(b)
    return sum(abs(float(x) - float(y)) for x, y in zip(a, b)) / len(a)


def nssim_direct(i, o, g, W):
    s_in = ssim_direct(i, g, W)
    if 1 - s_in < 1e-9:
        return 0.0
    return (ssim_direct(o, g, W) - s_in) / (1 - s_in)


def niou_direct(o, g, q=0.90):
    to, tg = quantile_direct(o, q), quantile_direct(g, q)
    mo = {k for k, x in enumerate(np.ravel(o)) if x > to}
    mg = {k for k, x in enumerate(np.ravel(g)) if x > tg}
    union = mo | mg
    return 1.0 if not union else len(mo & mg) / len(union)


def finite_difference_check(forward, params, x, h=1e-5, rtol=1e-3, atol=1e-6, chunk=256, h_fine=1e-7):
    """Compare float32 autodiff gradients with float64 central differences for every parameter.

    ``forward(params, x)`` must return an array; the scalar probed is its dot
    product with a fixed random weighting. Entries that miss at step ``h`` are
    probed again at ``h_fine``: a leaky-rectifier kink inside the +-h interval
    makes the coarse difference quotient wrong while the gradient is fine.
    Returns a dict with the worst errors and the failure/refinement counts.
    """
    import torch
    from torch.func import vmap

    from volufuse.neural import backward

    with torch.no_grad():
        probe_shape = forward(params, x).shape
    r = torch.from_numpy(np.random.default_rng(0).normal(size=probe_shape) / math.sqrt(np.prod(probe_shape)))

    p32 = {k: v.detach().clone().requires_grad_(True) for k, v in params.items()}
    loss = (forward(p32, x) * r.float()).sum()
    grads = backward(loss, p32)

    p64 = {k: v.detach().double() for k, v in params.items()}
    x64 = x.double()

    def quotients(name, idx, step):
        base = p64[name]
        flat = base.reshape(-1)
        batched = vmap(lambda vec: (forward({**p64, name: vec.reshape(base.shape)}, x64) * r).sum())
        out = torch.empty(len(idx), dtype=torch.float64)
        for s in range(0, len(idx), chunk):
            part = idx[s : s + chunk]
            bump = torch.zeros(len(part), flat.numel(), dtype=torch.float64)
            bump[torch.arange(len(part)), part] = step
            out[s : s + len(part)] = (batched(flat + bump) - batched(flat - bump)) / (2 * step)
        return out

    def misses(ad, fd):
        err = (ad - fd).abs()
        return (err > atol) & (err > rtol * fd.abs()), err

    report = {"entries": 0, "refined": 0, "failures": 0, "worst_abs": 0.0, "worst_rel": 0.0, "failed": {}}
    for name in p64:
        n = p64[name].numel()
        idx = torch.arange(n)
        ad = grads[name].reshape(-1).double()
        fd = quotients(name, idx, h)
        bad, _ = misses(ad, fd)
        if bad.any():
            redo = idx[bad]
            fd[redo] = quotients(name, redo, h_fine)
            report["refined"] += len(redo)
        bad, err = misses(ad, fd)
        rel = torch.where(err > atol, err / fd.abs().clamp_min(1e-300), torch.zeros_like(err))
        report["entries"] += n
        report["failures"] += int(bad.sum())
        if bad.any():
            report["failed"][name] = [(float(a), float(f)) for a, f in zip(ad[bad][:4], fd[bad][:4])]
        report["worst_abs"] = max(report["worst_abs"], float(err.max()))
        report["worst_rel"] = max(report["worst_rel"], float(rel.max()))
    return report
