"""Truncated divergence-free Fourier fields on the 3-torus.

A field is stored by its coefficients on the half of the wave-vector cube
``max_j |k_j| <= n_max`` that is lexicographically positive. The other half is
the complex conjugate, so reality holds by construction.

The full mode list is sorted lexicographically, which makes it antisymmetric:
``full[j] == -full[M - 1 - j]``. The stored half is ``full[M // 2:]`` and the
full coefficient array is ``concat(conj(half[::-1]), half)``.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass
from functools import cached_property

import numpy as np

__all__ = [
    "Truncation",
    "SpectralField",
    "SamplerError",
    "SnapshotError",
    "leray_project",
    "lambda_pow",
    "sobolev_norm_sq",
    "sobolev_norm",
    "sobolev_inner",
    "galerkin_project",
    "random_field",
    "divergence_residual",
    "reality_residual",
    "to_grid",
    "save_snapshot",
    "load_snapshot",
]


class SamplerError(RuntimeError):
    """Raised when the random field sampler keeps drawing degenerate fields."""


class SnapshotError(ValueError):
    """Raised for malformed snapshot files."""


@dataclass(frozen=True)
class Truncation:
    """Galerkin cut-off: modes with ``max_j |k_j| <= n_max``, ``k != 0``."""

    n_max: int

    def __post_init__(self):
        if int(self.n_max) != self.n_max or self.n_max < 1:
            raise ValueError(f"n_max must be a positive integer, got {self.n_max!r}")
        object.__setattr__(self, "n_max", int(self.n_max))

    @cached_property
    def side(self) -> int:
        return 2 * self.n_max + 1

    @cached_property
    def wavevectors(self) -> np.ndarray:
        """All retained wave vectors, shape (M, 3), lexicographic order."""
        n = self.n_max
        axis = np.arange(-n, n + 1)
        grid = np.stack(np.meshgrid(axis, axis, axis, indexing="ij"), axis=-1).reshape(-1, 3)
        keep = np.any(grid != 0, axis=1)
        k = grid[keep]
        k.setflags(write=False)
        return k

    @property
    def mode_count(self) -> int:
        return len(self.wavevectors)

    @property
    def half_count(self) -> int:
        return self.mode_count // 2

    @cached_property
    def half_wavevectors(self) -> np.ndarray:
        return self.wavevectors[self.half_count:]

    @cached_property
    def k_sq(self) -> np.ndarray:
        """|k|^2 on the full mode list."""
        out = np.sum(self.wavevectors.astype(float) ** 2, axis=1)
        out.setflags(write=False)
        return out

    @cached_property
    def half_k_sq(self) -> np.ndarray:
        return self.k_sq[self.half_count:]

    def index_of(self, k) -> np.ndarray:
        """Full-list index of wave vector(s) ``k``; -1 where outside the cube or zero."""
        k = np.asarray(k, dtype=np.int64)
        n, side = self.n_max, self.side
        inside = np.all(np.abs(k) <= n, axis=-1)
        lin = ((k[..., 0] + n) * side + (k[..., 1] + n)) * side + (k[..., 2] + n)
        zero = (side ** 3 - 1) // 2
        idx = np.where(lin > zero, lin - 1, lin)
        return np.where(inside & (lin != zero), idx, -1)

    def weights(self, s: float, half: bool = False) -> np.ndarray:
        """Mode-wise Sobolev weight |k|^(2s)."""
        ksq = self.half_k_sq if half else self.k_sq
        return ksq ** float(s)


def _expand(half: np.ndarray) -> np.ndarray:
    """Half-space coefficients (..., H, 3) to the full list (..., M, 3)."""
    return np.concatenate([np.conj(half[..., ::-1, :]), half], axis=-2)


def _fold(full: np.ndarray, h: int) -> np.ndarray:
    """Full coefficients to half-space storage, averaging each ±k pair.

    Averaging ``u_k`` with ``conj(u_{-k})`` is the orthogonal projection onto
    real fields, so exact real inputs pass through unchanged.
    """
    upper = full[..., h:, :]
    lower = full[..., :h, :][..., ::-1, :]
    return 0.5 * (upper + np.conj(lower))


def _leray(k: np.ndarray, ksq: np.ndarray, coeffs: np.ndarray) -> np.ndarray:
    """Apply (I - k k^T / |k|^2) mode-wise to (..., n, 3)."""
    kdotu = np.einsum("kj,...kj->...k", k, coeffs)
    return coeffs - (kdotu / ksq)[..., None] * k


class SpectralField:
    """Immutable real vector field on T^3, stored on the positive half-space."""

    __slots__ = ("trunc", "_half")

    def __init__(self, trunc: Truncation, half_coeffs):
        half = np.array(half_coeffs, dtype=np.complex128)
        if half.shape != (trunc.half_count, 3):
            raise ValueError(
                f"expected half-space coefficients of shape {(trunc.half_count, 3)}, got {half.shape}"
            )
        half.setflags(write=False)
        self.trunc = trunc
        self._half = half

    @classmethod
    def zeros(cls, trunc: Truncation) -> "SpectralField":
        return cls(trunc, np.zeros((trunc.half_count, 3), dtype=np.complex128))

    @classmethod
    def from_full(cls, trunc: Truncation, full) -> "SpectralField":
        """Build from a full coefficient list; the ±k pairs are symmetrised."""
        full = np.asarray(full, dtype=np.complex128)
        if full.shape != (trunc.mode_count, 3):
            raise ValueError(f"expected shape {(trunc.mode_count, 3)}, got {full.shape}")
        return cls(trunc, _fold(full, trunc.half_count))

    @classmethod
    def from_modes(cls, trunc: Truncation, modes: dict) -> "SpectralField":
        """Build from ``{k: coefficient}``; the conjugate at ``-k`` is implied.

        Entries given for both ``k`` and ``-k`` must be conjugate to each other.
        """
        half = np.zeros((trunc.half_count, 3), dtype=np.complex128)
        seen = {}
        for k, vec in modes.items():
            idx = int(trunc.index_of(k))
            if idx < 0:
                raise ValueError(f"wave vector {tuple(k)} is outside the truncation or zero")
            vec = np.asarray(vec, dtype=np.complex128)
            h = trunc.half_count
            if idx >= h:
                pos, val = idx - h, vec
            else:
                pos, val = h - 1 - idx, np.conj(vec)
            if pos in seen and not np.allclose(seen[pos], val):
                raise ValueError(f"coefficients at {tuple(k)} and its negative are not conjugate")
            seen[pos] = val
            half[pos] = val
        return cls(trunc, half)

    @property
    def coeffs(self) -> np.ndarray:
        """Read-only half-space coefficients, shape (H, 3)."""
        return self._half

    @property
    def wavevectors(self) -> np.ndarray:
        return self.trunc.half_wavevectors

    def full(self) -> np.ndarray:
        """Coefficients on every retained mode, shape (M, 3)."""
        return _expand(self._half)

    def __getitem__(self, k) -> np.ndarray:
        idx = int(self.trunc.index_of(k))
        if idx < 0:
            raise KeyError(tuple(k))
        h = self.trunc.half_count
        if idx >= h:
            return self._half[idx - h].copy()
        return np.conj(self._half[h - 1 - idx])

    def _check_same(self, other):
        if not isinstance(other, SpectralField):
            return NotImplemented
        if other.trunc != self.trunc:
            raise ValueError(
                f"truncation mismatch: n_max={self.trunc.n_max} vs n_max={other.trunc.n_max}"
            )
        return None

    def __add__(self, other):
        if self._check_same(other) is NotImplemented:
            return NotImplemented
        return SpectralField(self.trunc, self._half + other._half)

    def __sub__(self, other):
        if self._check_same(other) is NotImplemented:
            return NotImplemented
        return SpectralField(self.trunc, self._half - other._half)

    def __mul__(self, scalar):
        if not np.isscalar(scalar) or np.iscomplexobj(scalar):
            return NotImplemented
        return SpectralField(self.trunc, self._half * float(scalar))

    __rmul__ = __mul__

    def __truediv__(self, scalar):
        return self * (1.0 / float(scalar))

    def __neg__(self):
        return SpectralField(self.trunc, -self._half)

    def __eq__(self, other):
        if not isinstance(other, SpectralField):
            return NotImplemented
        return self.trunc == other.trunc and np.array_equal(self._half, other._half)

    __hash__ = None

    def __repr__(self):
        return f"SpectralField(n_max={self.trunc.n_max}, |u|_0={sobolev_norm(self, 0.0):.6g})"


def leray_project(field: SpectralField) -> SpectralField:
    """Mode-wise projection onto divergence-free fields."""
    t = field.trunc
    return SpectralField(t, _leray(t.half_wavevectors, t.half_k_sq, field.coeffs))


def lambda_pow(field: SpectralField, s: float) -> SpectralField:
    """Fractional Laplacian power: multiply mode k by |k|^s."""
    t = field.trunc
    scale = t.half_k_sq ** (0.5 * float(s))
    return SpectralField(t, field.coeffs * scale[:, None])


def sobolev_norm_sq(field: SpectralField, s: float) -> float:
    """sum_k |k|^(2s) |u_k|^2 over the full mode set."""
    w = field.trunc.weights(s, half=True)
    return float(2.0 * np.sum(w * np.sum(np.abs(field.coeffs) ** 2, axis=1)))


def sobolev_norm(field: SpectralField, s: float) -> float:
    return float(np.sqrt(sobolev_norm_sq(field, s)))


def sobolev_inner(f: SpectralField, g: SpectralField, s: float) -> float:
    """(f, g)_s = sum_k |k|^(2s) f_k . g_{-k}; fields are zero-padded to a common cube."""
    if f.trunc != g.trunc:
        big = f.trunc if f.trunc.n_max >= g.trunc.n_max else g.trunc
        f, g = galerkin_project(f, big), galerkin_project(g, big)
    w = f.trunc.weights(s, half=True)
    pair = np.sum(f.coeffs * np.conj(g.coeffs), axis=1)
    return float(2.0 * np.sum(w * pair.real))


def galerkin_project(field: SpectralField, trunc: Truncation) -> SpectralField:
    """Restrict to (or zero-pad into) the cube of ``trunc``."""
    if trunc == field.trunc:
        return field
    idx = field.trunc.index_of(trunc.half_wavevectors)
    out = np.zeros((trunc.half_count, 3), dtype=np.complex128)
    hit = idx >= 0
    # half-space membership is independent of n_max, so hit modes are stored ones
    out[hit] = field.coeffs[idx[hit] - field.trunc.half_count]
    return SpectralField(trunc, out)


def divergence_residual(field: SpectralField) -> float:
    """max_k |k . u_k|."""
    kdotu = np.einsum("kj,kj->k", field.wavevectors, field.coeffs)
    return float(np.max(np.abs(kdotu), initial=0.0))


def reality_residual(full: np.ndarray, trunc: Truncation) -> float:
    """max_k |u_{-k} - conj(u_k)| for a full coefficient list."""
    full = np.asarray(full)
    return float(np.max(np.abs(full[::-1] - np.conj(full)), initial=0.0))


def random_field(
    trunc: Truncation,
    s: float,
    target_norm: float,
    rng=None,
    decay: float = 1.5,
) -> SpectralField:
    """Random divergence-free field with ``|u|_s == target_norm``.

    Coefficients are complex Gaussians with standard deviation ``|k|^-decay``,
    Leray-projected and rescaled.
    """
    if not target_norm > 0:
        raise ValueError(f"target_norm must be positive, got {target_norm!r}")
    rng = np.random.default_rng(rng)
    scale = trunc.half_k_sq ** (-0.5 * decay)
    for _ in range(100):
        raw = rng.standard_normal((trunc.half_count, 3)) + 1j * rng.standard_normal((trunc.half_count, 3))
        field = leray_project(SpectralField(trunc, raw * scale[:, None]))
        norm = sobolev_norm(field, s)
        if norm > 0 and np.isfinite(norm):
            return field * (target_norm / norm)
    raise SamplerError("random_field drew 100 degenerate fields in a row")


def to_grid(field: SpectralField, n_grid: int) -> np.ndarray:
    """Physical-space values on a uniform n_grid^3 grid, shape (3, n, n, n).

    ``n_grid`` must be at least ``2 * n_max + 1`` so no retained mode aliases.
    """
    t = field.trunc
    if n_grid < t.side:
        raise ValueError(f"n_grid={n_grid} aliases modes of n_max={t.n_max}")
    spec = np.zeros((3, n_grid, n_grid, n_grid), dtype=np.complex128)
    k = t.wavevectors % n_grid
    spec[:, k[:, 0], k[:, 1], k[:, 2]] = field.full().T
    return np.fft.ifftn(spec, axes=(1, 2, 3)).real * n_grid ** 3


# -- snapshots ---------------------------------------------------------------

_TEXT_MAGIC = "# stochns-snapshot v1"
_BIN_MAGIC = b"SNSF\x01"
_BIN_HEAD = struct.Struct("<iqdI")
_BIN_REC = np.dtype([("k", "<i2", (3,)), ("re", "<f8", (3,)), ("im", "<f8", (3,))])


def save_snapshot(path, field: SpectralField, seed: int = 0, t: float = 0.0, binary: bool = False):
    """Write the stored half-space modes with an (n_max, seed, t) header."""
    k = field.wavevectors
    c = field.coeffs
    if binary:
        recs = np.zeros(len(k), dtype=_BIN_REC)
        recs["k"] = k
        recs["re"] = c.real
        recs["im"] = c.imag
        with open(path, "wb") as fh:
            fh.write(_BIN_MAGIC)
            fh.write(_BIN_HEAD.pack(field.trunc.n_max, int(seed), float(t), len(k)))
            fh.write(recs.tobytes())
        return
    lines = [
        _TEXT_MAGIC,
        f"n_max = {field.trunc.n_max}",
        f"seed = {int(seed)}",
        f"t = {float(t)!r}",
        "# kx ky kz re_x im_x re_y im_y re_z im_z",
    ]
    for kk, cc in zip(k, c):
        vals = " ".join(f"{float(v.real)!r} {float(v.imag)!r}" for v in cc)
        lines.append(f"{kk[0]} {kk[1]} {kk[2]} {vals}")
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")


def load_snapshot(path):
    """Read a snapshot written by :func:`save_snapshot`; returns (field, seed, t)."""
    with open(path, "rb") as fh:
        raw = fh.read()
    if raw.startswith(_BIN_MAGIC):
        off = len(_BIN_MAGIC)
        n_max, seed, t, count = _BIN_HEAD.unpack_from(raw, off)
        off += _BIN_HEAD.size
        recs = np.frombuffer(raw, dtype=_BIN_REC, count=count, offset=off)
        trunc = Truncation(n_max)
        if count != trunc.half_count or not np.array_equal(recs["k"], trunc.half_wavevectors):
            raise SnapshotError("mode list does not match the declared truncation")
        return SpectralField(trunc, recs["re"] + 1j * recs["im"]), seed, t
    text = raw.decode("utf-8").splitlines()
    if not text or text[0].strip() != _TEXT_MAGIC:
        raise SnapshotError("not a stochns snapshot")
    header, rows = {}, []
    for line in text[1:]:
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        if "=" in line:
            key, _, val = line.partition("=")
            header[key.strip()] = val.strip()
        else:
            rows.append(line.split())
    try:
        trunc = Truncation(int(header["n_max"]))
        seed, t = int(header["seed"]), float(header["t"])
    except (KeyError, ValueError) as exc:
        raise SnapshotError(f"bad snapshot header: {exc}") from exc
    if len(rows) != trunc.half_count:
        raise SnapshotError(f"expected {trunc.half_count} modes, found {len(rows)}")
    ks = np.array([[int(x) for x in r[:3]] for r in rows])
    if not np.array_equal(ks, trunc.half_wavevectors):
        raise SnapshotError("mode list does not match the declared truncation")
    vals = np.array([[float(x) for x in r[3:9]] for r in rows])
    coeffs = vals[:, 0::2] + 1j * vals[:, 1::2]
    return SpectralField(trunc, coeffs), seed, t
