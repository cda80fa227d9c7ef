"""Univariate and bivariate standard normal kernels.

The bivariate CDF follows Genz's (2004) refinement of the Drezner-Wesolowsky
Gauss-Legendre scheme, vectorised over numpy arrays.  Infinite limits are
handled exactly; no finite surrogate is ever substituted for +-inf.
"""

from __future__ import annotations

import numpy as np
from scipy.special import ndtr, ndtri, roots_legendre

__all__ = [
    "norm_cdf",
    "norm_quantile",
    "norm_pdf",
    "bvn_cdf",
    "bvn_pdf",
    "bvn_cdf_drho",
    "bvn_cdf_da",
    "rectangle_probs",
]

_TWO_PI = 2.0 * np.pi
_GL_X, _GL_W = roots_legendre(20)
# nodes mapped to (0, 2); weights unchanged
_X = 1.0 + _GL_X
_W = _GL_W


def norm_cdf(x):
    return ndtr(x)


def norm_quantile(p):
    """Inverse of :func:`norm_cdf`; returns -inf / +inf at p = 0 / 1."""
    p = np.asarray(p, dtype=float)
    if np.any((p < 0) | (p > 1)):
        raise ValueError("probability outside [0, 1]")
    out = ndtri(p)
    return float(out) if out.ndim == 0 else out


def norm_pdf(x):
    x = np.asarray(x, dtype=float)
    with np.errstate(over="ignore"):
        out = np.exp(-0.5 * x * x) / np.sqrt(_TWO_PI)
    out = np.where(np.isinf(x), 0.0, out)
    return float(out) if out.ndim == 0 else out


def _check_rho(rho: np.ndarray) -> None:
    if np.any(~np.isfinite(rho)) or np.any(np.abs(rho) >= 1.0):
        raise ValueError("bivariate normal correlation must satisfy -1 < rho < 1")


def _bvnu_finite(h: np.ndarray, k: np.ndarray, r: np.ndarray) -> np.ndarray:
    """P(X > h, Y > k) for finite h, k and |r| < 1 (arrays of equal shape)."""
    out = np.empty(h.shape)
    hk = h * k
    low = np.abs(r) < 0.925

    if np.any(low):
        hl, kl, rl, hkl = h[low], k[low], r[low], hk[low]
        hs = 0.5 * (hl * hl + kl * kl)
        asr = 0.5 * np.arcsin(rl)
        sn = np.sin(asr[:, None] * _X[None, :])
        terms = np.exp((sn * hkl[:, None] - hs[:, None]) / (1.0 - sn * sn))
        out[low] = (terms @ _W) * asr / _TWO_PI + ndtr(-hl) * ndtr(-kl)

    high = ~low
    if np.any(high):
        hh, kk, rh = h[high], k[high].copy(), r[high]
        hkh = hk[high].copy()
        neg = rh < 0
        kk[neg] = -kk[neg]
        hkh[neg] = -hkh[neg]
        as_ = 1.0 - rh * rh
        a = np.sqrt(as_)
        bs = (hh - kk) ** 2
        c = (4.0 - hkh) / 8.0
        d = (12.0 - hkh) / 80.0
        asr = -0.5 * (bs / as_ + hkh)
        bvn = np.where(
            asr > -100,
            a * np.exp(np.maximum(asr, -100)) * (1 - c * (bs - as_) * (1 - d * bs) / 3 + c * d * as_ * as_),
            0.0,
        )
        b = np.sqrt(bs)
        sp = np.sqrt(_TWO_PI) * ndtr(-b / a)
        bvn = np.where(
            hkh > -100,
            bvn - np.exp(-0.5 * np.maximum(hkh, -100)) * sp * b * (1 - c * bs * (1 - d * bs) / 3),
            bvn,
        )
        a2 = a / 2.0
        xs = (a2[:, None] * _X[None, :]) ** 2
        asr2 = -0.5 * (bs[:, None] / xs + hkh[:, None])
        ok = asr2 > -100
        sp2 = 1.0 + c[:, None] * xs * (1.0 + 5.0 * d[:, None] * xs)
        rs = np.sqrt(1.0 - xs)
        ep = np.exp(-(hkh[:, None] / 2.0) * xs / (1.0 + rs) ** 2) / rs
        terms = np.where(ok, np.exp(np.where(ok, asr2, 0.0)) * (sp2 - ep), 0.0)
        bvn = (a2 * (terms @ _W) - bvn) / _TWO_PI

        res = np.empty(hh.shape)
        pos = ~neg
        res[pos] = bvn[pos] + ndtr(-np.maximum(hh[pos], kk[pos]))
        # negative correlation: kk already flipped
        hn, kn, bn = hh[neg], kk[neg], bvn[neg]
        lower = np.where(hn < 0, ndtr(kn) - ndtr(hn), ndtr(-hn) - ndtr(-kn))
        res[neg] = np.where(hn >= kn, -bn, lower - bn)
        out[high] = res
    return np.clip(out, 0.0, 1.0)


def bvn_cdf(a, b, rho):
    """P(X <= a, Y <= b) for a standard bivariate normal with correlation rho.

    Accepts scalars or broadcastable arrays; a and b may be +-inf.
    """
    a, b, rho = np.broadcast_arrays(
        np.asarray(a, dtype=float), np.asarray(b, dtype=float), np.asarray(rho, dtype=float)
    )
    _check_rho(rho)
    shape = a.shape
    a, b, r = a.ravel(), b.ravel(), rho.ravel()
    out = np.empty(a.shape)

    a_neg = a == -np.inf
    b_neg = b == -np.inf
    a_pos = a == np.inf
    b_pos = b == np.inf
    zero = a_neg | b_neg
    out[zero] = 0.0
    both = a_pos & b_pos & ~zero
    out[both] = 1.0
    only_b = a_pos & ~b_pos & ~zero
    out[only_b] = ndtr(b[only_b])
    only_a = b_pos & ~a_pos & ~zero
    out[only_a] = ndtr(a[only_a])
    fin = ~(zero | a_pos | b_pos)
    if np.any(fin):
        indep = fin & (r == 0.0)
        out[indep] = ndtr(a[indep]) * ndtr(b[indep])
        rest = fin & (r != 0.0)
        if np.any(rest):
            out[rest] = _bvnu_finite(-a[rest], -b[rest], r[rest])
    out = out.reshape(shape)
    return float(out) if out.ndim == 0 else out


def bvn_pdf(a, b, rho):
    """Standard bivariate normal density; zero whenever a or b is infinite."""
    a, b, rho = np.broadcast_arrays(
        np.asarray(a, dtype=float), np.asarray(b, dtype=float), np.asarray(rho, dtype=float)
    )
    _check_rho(rho)
    one_m = 1.0 - rho * rho
    fin = np.isfinite(a) & np.isfinite(b)
    aa = np.where(fin, a, 0.0)
    bb = np.where(fin, b, 0.0)
    q = (aa * aa - 2.0 * rho * aa * bb + bb * bb) / one_m
    out = np.where(fin, np.exp(-0.5 * q) / (_TWO_PI * np.sqrt(one_m)), 0.0)
    return float(out) if out.ndim == 0 else out


def bvn_cdf_drho(a, b, rho):
    """d/drho of :func:`bvn_cdf` (Plackett's identity: the density at (a, b))."""
    return bvn_pdf(a, b, rho)


def bvn_cdf_da(a, b, rho):
    """d/da of :func:`bvn_cdf`: phi(a) * Phi((b - rho a) / sqrt(1 - rho^2))."""
    a, b, rho = np.broadcast_arrays(
        np.asarray(a, dtype=float), np.asarray(b, dtype=float), np.asarray(rho, dtype=float)
    )
    _check_rho(rho)
    fin_a = np.isfinite(a)
    aa = np.where(fin_a, a, 0.0)
    with np.errstate(invalid="ignore"):
        z = (b - rho * aa) / np.sqrt(1.0 - rho * rho)
    out = np.where(fin_a, norm_pdf(aa) * ndtr(z), 0.0)
    return float(out) if out.ndim == 0 else out


def rectangle_probs(tau_j: np.ndarray, tau_k: np.ndarray, rho: float) -> np.ndarray:
    """Cell probabilities of the contingency table cut at the given thresholds.

    ``tau_j`` and ``tau_k`` are the finite interior thresholds; the outer
    limits -inf / +inf are added here.  Returns an array of shape
    ``(len(tau_j) + 1, len(tau_k) + 1)``.
    """
    tj = np.concatenate(([-np.inf], np.asarray(tau_j, float), [np.inf]))
    tk = np.concatenate(([-np.inf], np.asarray(tau_k, float), [np.inf]))
    f = bvn_cdf(tj[:, None], tk[None, :], rho)
    return f[1:, 1:] - f[:-1, 1:] - f[1:, :-1] + f[:-1, :-1]
