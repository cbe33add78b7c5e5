"""Brute-force reference implementations used only by the test suite.

Everything here recomputes results through a deliberately different
arithmetic path from the library proper: float64 loops and tensordot
instead of float32 im2col GEMMs, trapezoid sums instead of closed-form
polynomial integrals, O(n^2) domination filters instead of sweeps. None
of these functions are imported by the runtime modules.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


@dataclass
class OracleResult:
    values: object
    tolerance: float
    seeds: list = field(default_factory=list)
    passed: bool = True


# ---------------------------------------------------------------------------
# finite differences

def finite_diff_grad(f, t: np.ndarray, eps: float = 1e-3) -> np.ndarray:
    """Central differences (f(t+eps*e) - f(t-eps*e)) / 2*eps per element.

    ``f`` must be a pure function of the array's values returning a scalar.
    """
    t = np.asarray(t, dtype=np.float64)
    grad = np.zeros_like(t)
    flat = t.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        fp = float(f(t))
        flat[i] = orig - eps
        fm = float(f(t))
        flat[i] = orig
        gflat[i] = (fp - fm) / (2.0 * eps)
    return grad


def max_rel_err(analytic: np.ndarray, reference: np.ndarray, floor: float = 1e-3) -> float:
    """Per-element relative error, floored at ``floor`` times the gradient scale.

    Elements far below the gradient's overall magnitude are judged on that
    scale instead of their own, so true-zero entries (clipped gradients)
    compare sanely against finite-difference noise.
    """
    a = np.asarray(analytic, dtype=np.float64)
    r = np.asarray(reference, dtype=np.float64)
    scale = max(float(np.abs(r).max(initial=0.0)), float(np.abs(a).max(initial=0.0)), 1e-12)
    denom = np.maximum(np.maximum(np.abs(a), np.abs(r)), floor * scale)
    return float((np.abs(a - r) / denom).max(initial=0.0))


def probed_finite_diff(f_sig, x: np.ndarray, indices, eps: float = 1e-3):
    """Central differences at selected flat indices, with routing guards.

    ``f_sig(x)`` returns (scalar value, signature bytes) where the signature
    captures every discrete routing decision in the forward pass (pool
    argmaxes, activation signs, quantizer cells). Probes whose signature
    changes anywhere inside the FD window are skipped: the composite is
    not differentiable there, so no estimator comparison is meaningful.
    Returns (valid_indices, fd_values).
    """
    x = np.asarray(x, dtype=np.float64)
    _, sig0 = f_sig(x)
    valid, vals = [], []
    for i in indices:
        xp = x.copy()
        xp.reshape(-1)[i] += eps
        fp, sp = f_sig(xp)
        xm = x.copy()
        xm.reshape(-1)[i] -= eps
        fm, sm = f_sig(xm)
        if sp == sig0 and sm == sig0:
            valid.append(int(i))
            vals.append((fp - fm) / (2.0 * eps))
    return valid, np.asarray(vals)


# ---------------------------------------------------------------------------
# float64 reference forwards (independent of icm.autograd)

def ref_conv2d(x, kernel, bias, stride=1, pad=0):
    x = np.asarray(x, dtype=np.float64)
    kernel = np.asarray(kernel, dtype=np.float64)
    bias = np.asarray(bias, dtype=np.float64)
    c_out, c_in, k, _ = kernel.shape
    xp = np.pad(x, ((0, 0), (pad, pad), (pad, pad)))
    h_out = (xp.shape[1] - k) // stride + 1
    w_out = (xp.shape[2] - k) // stride + 1
    y = np.empty((c_out, h_out, w_out))
    for i in range(h_out):
        for j in range(w_out):
            patch = xp[:, i * stride:i * stride + k, j * stride:j * stride + k]
            y[:, i, j] = np.tensordot(kernel, patch, axes=([1, 2, 3], [0, 1, 2])) + bias
    return y


def ref_tconv2d(x, kernel, bias, stride=1, pad=0):
    x = np.asarray(x, dtype=np.float64)
    kernel = np.asarray(kernel, dtype=np.float64)
    bias = np.asarray(bias, dtype=np.float64)
    c_in, c_out, k, _ = kernel.shape
    h, w = x.shape[1], x.shape[2]
    h_out = (h - 1) * stride - 2 * pad + k
    w_out = (w - 1) * stride - 2 * pad + k
    canvas = np.zeros((c_out, h_out + 2 * pad, w_out + 2 * pad))
    for i in range(h):
        for j in range(w):
            contrib = np.tensordot(x[:, i, j], kernel, axes=(0, 0))
            canvas[:, i * stride:i * stride + k, j * stride:j * stride + k] += contrib
    return canvas[:, pad:pad + h_out, pad:pad + w_out] + bias[:, None, None]


def ref_leaky_relu(x, slope=0.2):
    x = np.asarray(x, dtype=np.float64)
    return np.where(x >= 0, x, slope * x)


def ref_sigmoid(x):
    return 1.0 / (1.0 + np.exp(-np.asarray(x, dtype=np.float64)))


def ref_scaled_tanh(x, bound):
    return bound * np.tanh(np.asarray(x, dtype=np.float64) / bound)


def ref_mse(a, b):
    d = np.asarray(a, dtype=np.float64) - np.asarray(b, dtype=np.float64)
    return float(np.mean(d * d))


def ref_avg_down(x):
    c, h, w = x.shape
    return np.asarray(x, dtype=np.float64).reshape(c, h // 2, 2, w // 2, 2).mean(axis=(2, 4))


def ref_nearest_up(x):
    return np.repeat(np.repeat(np.asarray(x, dtype=np.float64), 2, axis=1), 2, axis=2)


def ref_maxpool2(x):
    c, h, w = x.shape
    v = np.asarray(x, dtype=np.float64).reshape(c, h // 2, 2, w // 2, 2)
    return v.max(axis=(2, 4))


def ref_maxpool2_with_idx(x):
    c, h, w = x.shape
    v = np.asarray(x, dtype=np.float64).reshape(c, h // 2, 2, w // 2, 2)
    flat = v.transpose(0, 1, 3, 2, 4).reshape(c, h // 2, w // 2, 4)
    idx = flat.argmax(axis=3)
    return np.take_along_axis(flat, idx[..., None], axis=3)[..., 0], idx


def ref_log_softmax0(logits):
    z = np.asarray(logits, dtype=np.float64)
    z = z - z.max(axis=0, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=0, keepdims=True))


def ref_quantize(y, step: float):
    """Round-half-away-from-zero onto the 64-level grid; float64 path."""
    q = np.asarray(y, dtype=np.float64) / step
    rounded = np.copysign(np.floor(np.abs(q) + 0.5), q)
    clamped = np.clip(rounded, -32, 31)
    return clamped.astype(np.int64) + 32, clamped * step


class RefFinetuneObjective:
    """Float64 re-implementation of the latent finetuning objective.

    Quantizers are frozen at the base latent's offsets so the objective is
    smooth inside each rounding cell, which is exactly the function the
    straight-through gradient differentiates. Construction happens once at
    the base point; calls return (value, routing signature) suitable for
    ``probed_finite_diff``.
    """

    def __init__(self, y0, x, codec_params, stage_channels, prob_params,
                 num_levels, extractor_params, quant_step, w_rate, w_proxy):
        self.x = np.asarray(x, dtype=np.float64)
        self.cw = {k: np.asarray(v, dtype=np.float64) for k, v in codec_params.items()}
        self.pw = {k: np.asarray(v, dtype=np.float64) for k, v in prob_params.items()}
        self.fe = {k: np.asarray(v, dtype=np.float64) for k, v in extractor_params.items()}
        self.chans = list(stage_channels)
        self.n_levels = num_levels
        self.step = float(quant_step)
        self.w_rate = float(w_rate)
        self.w_proxy = float(w_proxy)
        self.num_pixels = self.x.shape[1] * self.x.shape[2]

        y0 = np.asarray(y0, dtype=np.float64)
        self.offsets = []
        self.symbols = []
        v = y0
        for _ in range(num_levels):
            syms, snapped = ref_quantize(v, self.step)
            self.offsets.append(snapped - v)
            self.symbols.append(syms)
            v = self._pool(snapped)
        self.x_taps = self._extract(self.x)

    @staticmethod
    def _pool(v):
        c, h, w = v.shape
        if h % 2 or w % 2:
            v = np.pad(v, ((0, 0), (0, h % 2), (0, w % 2)), mode="edge")
            c, h, w = v.shape
        return v.reshape(c, h // 2, 2, w // 2, 2).mean(axis=(2, 4))

    def _extract(self, img):
        t = img
        taps = []
        for i in range(4):
            t = ref_conv2d(t, self.fe[f"block{i}.kernel"], self.fe[f"block{i}.bias"], 1, 1)
            t = ref_leaky_relu(t, 0.2)
            if i == 1:
                taps.append(t)
            if i == 3:
                taps.append(t)
                break
            t = ref_maxpool2(t)
        return taps

    def _decode(self, v):
        def act(t):
            return ref_leaky_relu(t, 0.2)

        t = act(ref_conv2d(v, self.cw["dec.head.kernel"], self.cw["dec.head.bias"], 1, 1))
        for i in reversed(range(len(self.chans))):
            h = act(ref_conv2d(t, self.cw[f"dec.res{i}a.kernel"], self.cw[f"dec.res{i}a.bias"], 1, 1))
            h = ref_conv2d(h, self.cw[f"dec.res{i}b.kernel"], self.cw[f"dec.res{i}b.bias"], 1, 1)
            t = act(t + h)
            th, tw = t.shape[1] * 2, t.shape[2] * 2
            t = ref_tconv2d(t, self.cw[f"dec.up{i}.kernel"], self.cw[f"dec.up{i}.bias"], 2, 0)
            t = act(t[:, :th, :tw])
        t = ref_conv2d(t, self.cw["dec.out.kernel"], self.cw["dec.out.bias"], 1, 1)
        return ref_sigmoid(t)

    def __call__(self, y):
        y = np.asarray(y, dtype=np.float64)
        # signature tracks only true discontinuities: the quantizer cells.
        # Activation/pool kinks are continuous and their finite-difference
        # bias is negligible at the loss level.
        sig = []
        values = []
        v = y
        for lvl in range(self.n_levels):
            cells, _ = ref_quantize(v, self.step)
            sig.append(cells.tobytes())
            v = v + self.offsets[lvl]
            values.append(v)
            v = self._pool(v)

        bits = 0.0
        for lvl in range(self.n_levels):
            if lvl == self.n_levels - 1:
                zb = self.pw["base.logits"]  # (64, C)
                logp = ref_log_softmax0(zb)
                for c in range(values[lvl].shape[0]):
                    for s in self.symbols[lvl][c].reshape(-1):
                        bits -= logp[int(s), c] / np.log(2)
            else:
                coarse = values[lvl + 1]
                th, tw = values[lvl].shape[1], values[lvl].shape[2]
                up = np.repeat(np.repeat(coarse, 2, axis=1), 2, axis=2)[:, :th, :tw]
                h = ref_conv2d(up, self.pw["cond1.kernel"], self.pw["cond1.bias"], 1, 1)
                h = ref_leaky_relu(h, 0.2)
                h = ref_conv2d(h, self.pw["cond2.kernel"], self.pw["cond2.bias"], 1, 1)
                logits = h.reshape(64, values[lvl].shape[0], th, tw)
                logp = ref_log_softmax0(logits).reshape(64, -1)
                for site, s in enumerate(self.symbols[lvl].reshape(-1)):
                    bits -= logp[int(s), site] / np.log(2)

        xhat = self._decode(values[0])
        taps = self._extract(xhat)
        proxy = ref_mse(self.x_taps[0], taps[0]) + ref_mse(self.x_taps[1], taps[1])
        total = self.w_rate * bits / self.num_pixels + self.w_proxy * proxy
        return total, b"".join(sig)


# ---------------------------------------------------------------------------
# scalar entropy summation

def entropy_bits_scalar(prob_fields, symbol_fields) -> float:
    """Sum of -log2 p over observed symbols, one float at a time.

    ``prob_fields`` and ``symbol_fields`` are parallel sequences; each
    probability field has the symbol axis first.
    """
    import math

    total = 0.0
    for probs, syms in zip(prob_fields, symbol_fields):
        probs = np.asarray(probs, dtype=np.float64)
        syms = np.asarray(syms)
        flat_p = probs.reshape(probs.shape[0], -1)
        flat_s = syms.reshape(-1)
        for site, s in enumerate(flat_s):
            total -= math.log2(flat_p[int(s), site])
    return total


# ---------------------------------------------------------------------------
# Pareto and BD-rate references

def exhaustive_pareto(points) -> list:
    """O(n^2) domination filter over (bpp, metric, label) triples.

    Keeps a point iff no other point has bpp <= and metric >= with one
    strict; exact ties on both axes keep the lexicographically first label.
    """
    kept = []
    for i, p in enumerate(points):
        dominated = False
        for j, q in enumerate(points):
            if i == j:
                continue
            if q[0] <= p[0] and q[1] >= p[1] and (q[0] < p[0] or q[1] > p[1]):
                dominated = True
                break
            if q[0] == p[0] and q[1] == p[1] and q[2] < p[2]:
                dominated = True
                break
        if not dominated:
            kept.append(p)
    return sorted(kept)


def numeric_bd(anchor_points, test_points, resolution: int = 20000) -> float:
    """BD-rate via cubic fits integrated by trapezoid at high resolution.

    ``*_points`` are (bpp, metric) pairs. Same fit convention as the
    closed-form path (log10 rate as a cubic in metric) but the integral
    is a dense trapezoid sum and the polynomial is evaluated by Horner.
    """
    a_bpp = np.asarray([p[0] for p in anchor_points], dtype=np.float64)
    a_met = np.asarray([p[1] for p in anchor_points], dtype=np.float64)
    t_bpp = np.asarray([p[0] for p in test_points], dtype=np.float64)
    t_met = np.asarray([p[1] for p in test_points], dtype=np.float64)
    if len(a_bpp) < 4 or len(t_bpp) < 4:
        raise ValueError("numeric_bd needs at least 4 points per curve")
    lo = max(a_met.min(), t_met.min())
    hi = min(a_met.max(), t_met.max())
    if not hi > lo:
        raise ValueError("metric ranges do not overlap")
    ca = np.polyfit(a_met, np.log10(a_bpp), 3)
    ct = np.polyfit(t_met, np.log10(t_bpp), 3)

    def horner(coeffs, x):
        acc = np.zeros_like(x)
        for c in coeffs:
            acc = acc * x + c
        return acc

    xs = np.linspace(lo, hi, resolution)
    diff = horner(ct, xs) - horner(ca, xs)
    avg = np.trapezoid(diff, xs) / (hi - lo)
    return float((10.0 ** avg - 1.0) * 100.0)
