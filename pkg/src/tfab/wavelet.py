"""Single-level 2D orthonormal wavelet transform over the (channel, time)
plane, differentiable on the autodiff tape.

The analysis operators are explicit half-size matrices: for an n-point axis,
the low-pass matrix is (n/2) x n with the reversed low filter taps on
disjoint index pairs (2i, 2i+1), likewise the high-pass matrix. Taps are
reversed because analysis is a convolution; for Haar this makes the
high-pass output second-minus-first on each pair. Stacking [low; high]
yields an orthogonal matrix, so synthesis is the transpose, reconstruction
is exact, and the backward pass of the forward transform is the inverse
transform applied to the cotangents.

Odd-length axes are reflect-padded by one sample before analysis and
cropped after synthesis; gradients use the exact adjoints (fold for the
pad, zero-fill for the crop).
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from . import autodiff as ad
from .errors import ShapeError

_INV_SQRT2 = 1.0 / np.sqrt(2.0)


@dataclass(frozen=True)
class WaveletFilters:
    """Orthonormal length-2 analysis filter pair."""

    low: tuple
    high: tuple

    def __post_init__(self):
        lo = np.asarray(self.low, dtype=np.float64)
        hi = np.asarray(self.high, dtype=np.float64)
        if lo.shape != (2,) or hi.shape != (2,):
            raise ShapeError("filters must have length 2")
        if (abs(lo @ lo - 1.0) > 1e-12 or abs(hi @ hi - 1.0) > 1e-12
                or abs(lo @ hi) > 1e-12):
            raise ValueError(
                "filters must be orthonormal: |L|=|H|=1 and L.H=0"
            )

    @property
    def low_array(self) -> np.ndarray:
        return np.asarray(self.low, dtype=np.float64)

    @property
    def high_array(self) -> np.ndarray:
        return np.asarray(self.high, dtype=np.float64)


HAAR = WaveletFilters(low=(_INV_SQRT2, _INV_SQRT2),
                      high=(_INV_SQRT2, -_INV_SQRT2))


@dataclass
class Subbands:
    """The four components of one decomposed sample, each [C/2, T/2].

    ``signal_shape`` records the pre-padding sample shape so the inverse
    transform can crop odd-sized reconstructions.
    """

    ll: object
    lh: object
    hl: object
    hh: object
    signal_shape: tuple

    def as_tuple(self):
        return (self.ll, self.lh, self.hl, self.hh)

    def values(self):
        """Plain arrays regardless of whether the fields are Vars."""
        return tuple(b.value if isinstance(b, ad.Var) else np.asarray(b)
                     for b in self.as_tuple())


@lru_cache(maxsize=32)
def _analysis_pair(taps_low: tuple, taps_high: tuple, n: int):
    """Half-size analysis matrices (L, H) for an even axis length n."""
    lo = np.asarray(taps_low, dtype=np.float64)[::-1]
    hi = np.asarray(taps_high, dtype=np.float64)[::-1]
    half = n // 2
    lmat = np.zeros((half, n))
    hmat = np.zeros((half, n))
    idx = np.arange(half)
    for k in range(2):
        lmat[idx, 2 * idx + k] = lo[k]
        hmat[idx, 2 * idx + k] = hi[k]
    return lmat, hmat


def _pad_even(x: np.ndarray):
    """Reflect-pad the trailing two axes to even lengths; returns the padded
    array and the original (C, T)."""
    c, t = x.shape[-2], x.shape[-1]
    pads = [(0, 0)] * (x.ndim - 2) + [(0, c % 2), (0, t % 2)]
    if c % 2 or t % 2:
        x = np.pad(x, pads, mode="edge")
    return x, (c, t)


def _fold_pad(g: np.ndarray, shape) -> np.ndarray:
    """Adjoint of _pad_even: fold the padded row/column back, then crop."""
    c, t = shape
    out = g
    if out.shape[-2] == c + 1:
        folded = out[..., :c, :].copy()
        folded[..., c - 1, :] += out[..., c, :]
        out = folded
    if out.shape[-1] == t + 1:
        folded = out[..., :, :t].copy()
        folded[..., :, t - 1] += out[..., :, t]
        out = folded
    return out


def _transform_arrays(x: np.ndarray, filters: WaveletFilters):
    """Forward analysis on plain arrays; x trailing axes (C, T), any batch
    prefix. Returns (ll, lh, hl, hh, signal_shape)."""
    xp, shape = _pad_even(x)
    c, t = xp.shape[-2], xp.shape[-1]
    lc, hc = _analysis_pair(tuple(filters.low), tuple(filters.high), c)
    lt, ht = _analysis_pair(tuple(filters.low), tuple(filters.high), t)
    # stay in the input precision so 32-bit callers get a 32-bit transform
    lc, hc = lc.astype(xp.dtype, copy=False), hc.astype(xp.dtype, copy=False)
    lt, ht = lt.astype(xp.dtype, copy=False), ht.astype(xp.dtype, copy=False)
    xl = xp @ lt.T
    xh = xp @ ht.T
    ll = lc @ xl
    lh = hc @ xl
    hl = lc @ xh
    hh = hc @ xh
    return ll, lh, hl, hh, shape


def _inverse_arrays(ll, lh, hl, hh, filters: WaveletFilters,
                    signal_shape=None) -> np.ndarray:
    """Synthesis on plain arrays; crops to signal_shape when given."""
    c2, t2 = ll.shape[-2], ll.shape[-1]
    lc, hc = _analysis_pair(tuple(filters.low), tuple(filters.high), 2 * c2)
    lt, ht = _analysis_pair(tuple(filters.low), tuple(filters.high), 2 * t2)
    lc, hc = lc.astype(ll.dtype, copy=False), hc.astype(ll.dtype, copy=False)
    lt, ht = lt.astype(ll.dtype, copy=False), ht.astype(ll.dtype, copy=False)
    x = (lc.T @ ll + hc.T @ lh) @ lt + (lc.T @ hl + hc.T @ hh) @ ht
    if signal_shape is not None:
        c, t = signal_shape
        x = x[..., :c, :t]
    return x


def _check_transform_input(x: np.ndarray) -> None:
    if x.ndim not in (2, 4):
        raise ShapeError(
            f"expected a [C,T] sample or [N,1,C,T] batch, got {x.shape}"
        )
    if x.ndim == 4 and x.shape[1] != 1:
        raise ShapeError(f"batched input must be [N,1,C,T], got {x.shape}")
    if x.shape[-2] < 2 or x.shape[-1] < 2:
        raise ShapeError(f"axes must have length >= 2, got {x.shape}")


def dwt2(x, filters: WaveletFilters = HAAR, pad_odd: bool = True) -> Subbands:
    """Decompose a sample into four half-size components.

    ``x`` may be a Var or an array, shaped [C,T] or [N,1,C,T]. Each
    component's backward is its synthesis term applied to the cotangent
    (followed by the pad adjoint when the input was odd-sized).
    """
    xvar = x if isinstance(x, ad.Var) else ad.Var(np.asarray(x))
    xv = xvar.value
    _check_transform_input(xv)
    if not pad_odd and (xv.shape[-2] % 2 or xv.shape[-1] % 2):
        raise ShapeError(
            f"odd axis length in {xv.shape} with padding disabled"
        )
    ll, lh, hl, hh, shape = _transform_arrays(xv, filters)
    c_pad = shape[0] + shape[0] % 2
    t_pad = shape[1] + shape[1] % 2
    lc, hc = _analysis_pair(tuple(filters.low), tuple(filters.high), c_pad)
    lt, ht = _analysis_pair(tuple(filters.low), tuple(filters.high), t_pad)
    bands = {}
    for name, val, ac, at in (("ll", ll, lc, lt), ("lh", lh, hc, lt),
                              ("hl", hl, lc, ht), ("hh", hh, hc, ht)):
        def grad_fn(g, ac=ac, at=at):
            contrib = ac.T @ g @ at
            ad._accumulate(xvar, _fold_pad(contrib, shape))

        bands[name] = ad.Var._op(val, (xvar,), grad_fn)
    return Subbands(signal_shape=shape, **bands)


def idwt2(sub: Subbands, filters: WaveletFilters = HAAR):
    """Reconstruct a sample from four components; exact left inverse of
    :func:`dwt2` under orthonormal filters. Returns a Var when any component
    is a Var, else an array."""
    vals = sub.values()
    if any(v.shape != vals[0].shape for v in vals):
        raise ShapeError(
            f"subband shapes differ: {[v.shape for v in vals]}"
        )
    is_var = any(isinstance(b, ad.Var) for b in sub.as_tuple())
    out = _inverse_arrays(*vals, filters=filters, signal_shape=sub.signal_shape)
    if not is_var:
        return out
    parents = tuple(b for b in sub.as_tuple() if isinstance(b, ad.Var))
    c2, t2 = vals[0].shape[-2], vals[0].shape[-1]
    lc, hc = _analysis_pair(tuple(filters.low), tuple(filters.high), 2 * c2)
    lt, ht = _analysis_pair(tuple(filters.low), tuple(filters.high), 2 * t2)
    band_ops = {"ll": (lc, lt), "lh": (hc, lt), "hl": (lc, ht), "hh": (hc, ht)}

    def grad_fn(g):
        gp = g
        c, t = sub.signal_shape
        if (c % 2) or (t % 2):
            # adjoint of the crop: zero-fill the removed row/column
            padded = np.zeros(g.shape[:-2] + (c + c % 2, t + t % 2),
                              dtype=g.dtype)
            padded[..., :c, :t] = g
            gp = padded
        for name, (ac, at) in band_ops.items():
            b = getattr(sub, name)
            if isinstance(b, ad.Var):
                ad._accumulate(b, ac @ gp @ at.T)

    return ad.Var._op(out, parents, grad_fn)


def energy(x: np.ndarray) -> float:
    return float(np.sum(np.square(np.asarray(x, dtype=np.float64))))


def adjoint_check(x: np.ndarray, y: Subbands,
                  filters: WaveletFilters = HAAR) -> float:
    """Normalized defect |<dwt2(x), y> - <x, idwt2(y)>| / (|x| |y|).

    Zero (to roundoff) when the forward and inverse transforms are exact
    adjoints of each other, which orthonormality guarantees.
    """
    x = np.asarray(x, dtype=np.float64)
    fwd = _transform_arrays(x, filters)[:4]
    yv = y.values()
    lhs = sum(float(np.vdot(a, b)) for a, b in zip(fwd, yv))
    inv = _inverse_arrays(*yv, filters=filters, signal_shape=y.signal_shape)
    rhs = float(np.vdot(x, inv))
    nx = np.sqrt(energy(x))
    ny = np.sqrt(sum(energy(v) for v in yv))
    if nx == 0.0 or ny == 0.0:
        return 0.0
    return abs(lhs - rhs) / (nx * ny)


def subbands_from_arrays(ll, lh, hl, hh, signal_shape=None) -> Subbands:
    """Package plain arrays as Subbands; infers an even signal shape."""
    arrs = [np.asarray(b) for b in (ll, lh, hl, hh)]
    arrs = [b.astype(np.float64) if b.dtype.kind != "f" else b for b in arrs]
    if signal_shape is None:
        signal_shape = (2 * arrs[0].shape[-2], 2 * arrs[0].shape[-1])
    return Subbands(ll=arrs[0], lh=arrs[1], hl=arrs[2], hh=arrs[3],
                    signal_shape=signal_shape)
