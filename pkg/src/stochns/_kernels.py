"""Compiled mode-pair sums and cached convolution tables."""
from functools import lru_cache

import numba
import numpy as np

from .spectral import Truncation


def split_batch(full: np.ndarray):
    """(B, M, 3) complex to contiguous real and imaginary parts laid out (M, 3, B)."""
    t = np.transpose(full, (1, 2, 0))
    return np.ascontiguousarray(t.real), np.ascontiguousarray(t.imag)


def join_batch(re: np.ndarray, im: np.ndarray) -> np.ndarray:
    """Inverse of :func:`split_batch`."""
    return np.ascontiguousarray(np.transpose(re + 1j * im, (2, 0, 1)))


@numba.njit(cache=True)
def _pair_sum(ur, ui, vr, vi, ip, iq, ik, q, outr, outi):
    # out[ik] += i (u[ip] . q[iq]) v[iq]; batch index innermost so it vectorizes
    nb = ur.shape[2]
    for n in range(ip.shape[0]):
        p = ip[n]
        r = iq[n]
        k = ik[n]
        q0 = q[r, 0]
        q1 = q[r, 1]
        q2 = q[r, 2]
        for b in range(nb):
            ar = -(ui[p, 0, b] * q0 + ui[p, 1, b] * q1 + ui[p, 2, b] * q2)
            ai = ur[p, 0, b] * q0 + ur[p, 1, b] * q1 + ur[p, 2, b] * q2
            for j in range(3):
                xr = vr[r, j, b]
                xi = vi[r, j, b]
                outr[k, j, b] += ar * xr - ai * xi
                outi[k, j, b] += ar * xi + ai * xr


@numba.njit(cache=True)
def _shift_sum(ur, ui, src, q, zr, zi, outr, outi):
    # out[h] += i (z . q[h]) u[src[h]] for one shift; z is per path, (3, B)
    nb = ur.shape[2]
    for h in range(src.shape[0]):
        s = src[h]
        if s < 0:
            continue
        q0 = q[h, 0]
        q1 = q[h, 1]
        q2 = q[h, 2]
        for b in range(nb):
            ar = -(zi[0, b] * q0 + zi[1, b] * q1 + zi[2, b] * q2)
            ai = zr[0, b] * q0 + zr[1, b] * q1 + zr[2, b] * q2
            for j in range(3):
                xr = ur[s, j, b]
                xi = ui[s, j, b]
                outr[h, j, b] += ar * xr - ai * xi
                outi[h, j, b] += ar * xi + ai * xr


class PairTable:
    """All (p, q) in the cube with p + q in the stored half of the cube."""

    def __init__(self, trunc: Truncation):
        k = trunc.wavevectors
        m, h = trunc.mode_count, trunc.half_count
        p, q = np.meshgrid(np.arange(m), np.arange(m), indexing="ij")
        p, q = p.ravel(), q.ravel()
        target = trunc.index_of(k[p] + k[q])
        keep = target >= h
        order = np.argsort(target[keep], kind="stable")
        self.ip = np.ascontiguousarray(p[keep][order])
        self.iq = np.ascontiguousarray(q[keep][order])
        self.ik = np.ascontiguousarray(target[keep][order] - h)
        self.q = np.ascontiguousarray(k.astype(np.float64))
        self.half_count = h

    def __len__(self):
        return len(self.ip)

    def convect(self, u_full: np.ndarray, v_full: np.ndarray) -> np.ndarray:
        """Half-space coefficients of (u . grad) v for batched full inputs (B, M, 3)."""
        ur, ui = split_batch(np.asarray(u_full, dtype=np.complex128))
        if v_full is u_full:
            vr, vi = ur, ui
        else:
            vr, vi = split_batch(np.asarray(v_full, dtype=np.complex128))
        nb = ur.shape[2]
        outr = np.zeros((self.half_count, 3, nb))
        outi = np.zeros((self.half_count, 3, nb))
        _pair_sum(ur, ui, vr, vi, self.ip, self.iq, self.ik, self.q, outr, outi)
        return join_batch(outr, outi)


@lru_cache(maxsize=None)
def pair_table(trunc: Truncation) -> PairTable:
    return PairTable(trunc)


class PaddedGrid:
    """Zero-padded FFT grid on which products of cube-supported fields are exact.

    With L >= 3 n_max + 1 points per axis, aliases of the product support
    [-2n, 2n] never land inside [-n, n], so retained modes are exact.
    """

    def __init__(self, trunc: Truncation, size: int | None = None):
        n = trunc.n_max
        self.size = size if size is not None else 3 * n + 1
        if self.size < 3 * n + 1:
            raise ValueError(f"grid of {self.size} points aliases products at n_max={n}")
        self.trunc = trunc
        self.idx = tuple((trunc.wavevectors % self.size).T)
        self.zero = (0, 0, 0)

    def to_grid(self, full: np.ndarray) -> np.ndarray:
        """(..., M) complex coefficients to real grid values (..., L, L, L)."""
        L = self.size
        spec = np.zeros(full.shape[:-1] + (L, L, L), dtype=np.complex128)
        spec[(Ellipsis,) + self.idx] = full
        return np.fft.ifftn(spec, axes=(-3, -2, -1)).real * L ** 3

    def from_grid(self, values: np.ndarray, with_mean: bool = False):
        """Grid values to cube coefficients (..., M); optionally also the k=0 mean."""
        L = self.size
        spec = np.fft.fftn(values, axes=(-3, -2, -1)) / L ** 3
        coeffs = spec[(Ellipsis,) + self.idx]
        if with_mean:
            return coeffs, spec[(Ellipsis,) + self.zero]
        return coeffs


@lru_cache(maxsize=None)
def padded_grid(trunc: Truncation) -> PaddedGrid:
    return PaddedGrid(trunc)


def convect_fft(trunc: Truncation, u_full: np.ndarray, v_full: np.ndarray) -> np.ndarray:
    """Same contract as :meth:`PairTable.convect` via exact padded products."""
    g = padded_grid(trunc)
    k = trunc.wavevectors.astype(np.float64)
    u = np.moveaxis(np.asarray(u_full), -1, -2)                     # (B, 3, M)
    grad_v = 1j * k.T[:, None, :] * np.moveaxis(v_full, -1, -2)[..., None, :, :]  # (B, j, i, M)
    ur = g.to_grid(u)
    gr = g.to_grid(grad_v)
    prod = np.einsum("bjxyz,bjixyz->bixyz", ur, gr)
    coeffs = g.from_grid(prod)                                       # (B, 3, M)
    return np.moveaxis(coeffs, -2, -1)[..., trunc.half_count:, :]
