"""Transport noise, Kirchhoff-type nonlocal noise and their certificates.

Transport channels act as ``sigma_i(u) = P((zeta_i . grad) u)`` truncated to
the cube of ``u``. Kirchhoff channels act as ``g_i(u) = alpha_i (1 + |u|_1^2) u``.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from . import _kernels
from .spectral import (
    SpectralField,
    Truncation,
    _leray,
    random_field,
    sobolev_inner,
    sobolev_norm_sq,
)

__all__ = [
    "NoiseConfigError",
    "TransportNoiseBasis",
    "KirchhoffNoise",
    "KirchhoffIdentities",
    "HypothesisCertificate",
    "DEFAULT_COSINES",
    "sigma_apply",
    "sigma_hs_norm_sq",
    "sigma_half_bound",
    "kirchhoff_apply",
    "kirchhoff_identities",
    "kappa_from_deltas",
    "certify_hypotheses",
    "certificate_sample",
]

SIGMA_EXPONENTS = (-1.0, -0.5, 0.5, 1.0)
LINF_OVERSAMPLE = 8
LINF_SAFETY = 1.05

# (k, theta, c): zeta = c * theta * cos(k . xi) with theta orthogonal to k
DEFAULT_COSINES = (
    ((1, 0, 0), (0, 1, 0), 0.15),
    ((0, 1, 0), (0, 0, 1), 0.15),
    ((0, 0, 1), (1, 0, 0), 0.15),
    ((1, 0, 0), (0, 0, 1), 0.15),
)


class NoiseConfigError(ValueError):
    """Raised for a transport basis or Kirchhoff noise that violates a hard precondition."""


def _linf(modes: np.ndarray, coeffs: np.ndarray) -> float:
    """Grid maximum of the pointwise Euclidean norm of a trigonometric vector sum."""
    reach = int(np.max(np.abs(modes), initial=1))
    size = LINF_OVERSAMPLE * (2 * reach + 1)
    spec = np.zeros((3, size, size, size), dtype=np.complex128)
    idx = tuple((modes % size).T)
    np.add.at(spec, (slice(None),) + idx, coeffs.T)
    values = np.fft.ifftn(spec, axes=(1, 2, 3)).real * size ** 3
    return float(np.sqrt(np.max(np.sum(values ** 2, axis=0))))


class TransportNoiseBasis:
    """Finite family of vector fields zeta_i with the constants M0 and N0.

    Each ``zeta_i`` is a trigonometric sum given by integer wave vectors
    ``modes[i]`` (shape (n_i, 3)) and complex coefficients ``coeffs[i]``. The
    set must be closed under negation with conjugate coefficients so that
    zeta_i is real. ``zeta_i`` need not be divergence-free.

    ``M0 = sum |Lambda zeta_i|_inf^2`` and ``N0 = sum |zeta_i|_inf^2`` use
    grid maxima at 8x oversampling times a 1.05 safety factor on each norm.
    Construction fails unless ``N0 < 1/8``.
    """

    def __init__(self, modes, coeffs, labels=None):
        self.modes = [np.asarray(m, dtype=np.int64).reshape(-1, 3) for m in modes]
        self.coeffs = [np.asarray(c, dtype=np.complex128).reshape(-1, 3) for c in coeffs]
        if len(self.modes) != len(self.coeffs):
            raise NoiseConfigError("modes and coeffs must have the same length")
        for i, (m, c) in enumerate(zip(self.modes, self.coeffs)):
            if len(m) != len(c):
                raise NoiseConfigError(f"zeta_{i}: {len(m)} modes but {len(c)} coefficients")
            if np.any(np.all(m == 0, axis=1)):
                # a constant drift is allowed in principle; keep the mode set zero-mean
                raise NoiseConfigError(f"zeta_{i} has a k = 0 mode")
            lookup = {tuple(k): z for k, z in zip(m, c)}
            for k, z in lookup.items():
                partner = lookup.get(tuple(-np.array(k)))
                if partner is None or np.max(np.abs(partner - np.conj(z))) > 1e-14 * (1 + np.max(np.abs(z))):
                    raise NoiseConfigError(f"zeta_{i} is not real: mode {k} lacks a conjugate partner")
        self.labels = list(labels) if labels is not None else [f"zeta_{i}" for i in range(len(self.modes))]
        self.linf = np.array([LINF_SAFETY * _linf(m, c) for m, c in zip(self.modes, self.coeffs)])
        self.linf_grad = np.array([
            LINF_SAFETY * _linf(m, c * np.linalg.norm(m, axis=1)[:, None])
            for m, c in zip(self.modes, self.coeffs)
        ])
        self.N0 = float(np.sum(self.linf ** 2))
        self.M0 = float(np.sum(self.linf_grad ** 2))
        if not self.N0 < 0.125:
            raise NoiseConfigError(f"N0 = {self.N0:.6g} violates N0 < 1/8")
        if not math.isfinite(self.M0):
            raise NoiseConfigError("M0 is not finite")
        self._tables = {}

    @classmethod
    def from_cosines(cls, specs=DEFAULT_COSINES):
        """Fields ``c * theta * cos(k . xi)`` from a list of (k, theta, c)."""
        modes, coeffs, labels = [], [], []
        for k, theta, c in specs:
            k = np.asarray(k, dtype=np.int64)
            theta = np.asarray(theta, dtype=float)
            if not np.any(k):
                raise NoiseConfigError("cosine mode needs k != 0")
            half = 0.5 * float(c) * theta
            modes.append(np.stack([k, -k]))
            coeffs.append(np.stack([half, half]).astype(np.complex128))
            labels.append(f"{float(c):g}*{tuple(theta.tolist())}*cos({tuple(k.tolist())}.x)")
        return cls(modes, coeffs, labels)

    @classmethod
    def empty(cls):
        """No transport channels."""
        return cls([], [])

    def __len__(self):
        return len(self.modes)

    @property
    def sigma_constant(self) -> float:
        """4 M0^2 / (1 - 8 N0), the low-order constant of the H^{1/2} bound."""
        return 4.0 * self.M0 ** 2 / (1.0 - 8.0 * self.N0)

    def _table(self, trunc: Truncation):
        # per channel: list of (source index into the full list, factor (H,) complex)
        if trunc not in self._tables:
            k = trunc.half_wavevectors
            tables = []
            for m, c in zip(self.modes, self.coeffs):
                entries = []
                for p, z in zip(m, c):
                    src = trunc.index_of(k - p)
                    q = (k - p).astype(float)
                    fac = 1j * (q @ z)
                    fac = np.where(src >= 0, fac, 0.0)
                    entries.append((np.where(src >= 0, src, 0), fac))
                tables.append(entries)
            self._tables[trunc] = tables
        return self._tables[trunc]

    def apply_batch(self, trunc: Truncation, u_full: np.ndarray) -> np.ndarray:
        """All channels at once: (B, M, 3) full coefficients to (B, d, H, 3) projected."""
        tables = self._table(trunc)
        out = np.zeros((u_full.shape[0], len(tables), trunc.half_count, 3), dtype=np.complex128)
        for i, entries in enumerate(tables):
            for src, fac in entries:
                out[:, i] += fac[:, None] * u_full[:, src, :]
        return _leray(trunc.half_wavevectors, trunc.half_k_sq, out)

    def _shift_table(self, trunc: Truncation):
        # distinct shifts p over all channels: source indices, q = k - p, and the
        # (d, 3) coefficient of shift p in each channel
        key = ("shifts", trunc)
        if key not in self._tables:
            shifts = sorted({tuple(p) for m in self.modes for p in m})
            k = trunc.half_wavevectors
            entries = []
            for p in shifts:
                src = trunc.index_of(k - np.array(p))
                q = np.where((src >= 0)[:, None], (k - np.array(p)).astype(float), 0.0)
                z = np.zeros((len(self), 3), dtype=np.complex128)
                for i, (m, c) in enumerate(zip(self.modes, self.coeffs)):
                    for pp, zz in zip(m, c):
                        if tuple(pp) == p:
                            z[i] += zz
                entries.append((src, q, z))
            self._tables[key] = entries
        return self._tables[key]

    def drive_batch(self, trunc: Truncation, u_full: np.ndarray, dW: np.ndarray) -> np.ndarray:
        """sum_i dW_i (zeta_i . grad) u before projection, for (B, M, 3) input and dW (B, d).

        Uses linearity in zeta: one combined field per path instead of d channels.
        """
        ur, ui = _kernels.split_batch(u_full)
        nb = ur.shape[2]
        outr = np.zeros((trunc.half_count, 3, nb))
        outi = np.zeros((trunc.half_count, 3, nb))
        for src, q, z in self._shift_table(trunc):
            zb = np.zeros((3, nb), dtype=np.complex128)
            for i in range(len(self)):
                zb += z[i][:, None] * dW[None, :, i]
            _kernels._shift_sum(ur, ui, src, q, np.ascontiguousarray(zb.real),
                                np.ascontiguousarray(zb.imag), outr, outi)
        return _kernels.join_batch(outr, outi)

    def to_dict(self) -> dict:
        return {
            "labels": self.labels,
            "M0": self.M0,
            "N0": self.N0,
            "linf": self.linf.tolist(),
            "linf_grad": self.linf_grad.tolist(),
        }


def sigma_apply(basis: TransportNoiseBasis, u: SpectralField, i: int) -> SpectralField:
    """sigma_i(u) = P((zeta_i . grad) u), truncated to the cube of u."""
    if not 0 <= i < len(basis):
        raise IndexError(f"transport channel {i} out of range for {len(basis)} channels")
    out = basis.apply_batch(u.trunc, u.full()[None])[0, i]
    return SpectralField(u.trunc, out)


def sigma_hs_norm_sq(basis: TransportNoiseBasis, u: SpectralField, s: float) -> float:
    """Hilbert-Schmidt norm squared sum_i |sigma_i(u)|_s^2."""
    if float(s) not in SIGMA_EXPONENTS:
        raise ValueError(f"unsupported exponent s={s!r}; expected one of {SIGMA_EXPONENTS}")
    if len(basis) == 0:
        return 0.0
    out = basis.apply_batch(u.trunc, u.full()[None])[0]
    w = u.trunc.weights(s, half=True)
    return float(2.0 * np.sum(w[None, :, None] * np.abs(out) ** 2))


def sigma_half_bound(basis: TransportNoiseBasis, u: SpectralField) -> float:
    """Right side of the H^{1/2} bound: |u|_{3/2}^2 / 4 + 4 M0^2/(1 - 8 N0) |u|_{1/2}^2."""
    return 0.25 * sobolev_norm_sq(u, 1.5) + basis.sigma_constant * sobolev_norm_sq(u, 0.5)


@dataclass(frozen=True)
class KirchhoffNoise:
    """Amplitudes alpha_i of g_i(u) = alpha_i (1 + |u|_1^2) u.

    ``kappa1`` and ``kappa2`` are the constants the certificates test against;
    the admissibility condition ``rho >= max(kappa1/(gamma - 1), kappa2)`` is
    reported by :func:`certify_hypotheses` rather than enforced here, so that
    infeasible noise can still be certified as failing.
    """

    alphas: tuple
    gamma: float = 1.5
    kappa1: float = 0.0
    kappa2: float = 0.0

    def __post_init__(self):
        object.__setattr__(self, "alphas", tuple(float(a) for a in self.alphas))
        if not 1.0 < self.gamma < 2.0:
            raise NoiseConfigError(f"gamma must lie in (1, 2), got {self.gamma!r}")
        if not all(math.isfinite(a) for a in self.alphas):
            raise NoiseConfigError("alphas must be finite")

    @property
    def rho(self) -> float:
        return float(sum(a * a for a in self.alphas))

    @property
    def rho_required(self) -> float:
        return max(self.kappa1 / (self.gamma - 1.0), self.kappa2)

    @property
    def admissible(self) -> bool:
        return self.rho >= self.rho_required

    @classmethod
    def auto(cls, kappa1: float, kappa2: float, gamma: float = 1.5, channels: int = 4,
             factor: float = 1.05) -> "KirchhoffNoise":
        """Equal amplitudes with rho = factor * max(kappa1/(gamma - 1), kappa2)."""
        rho = factor * max(kappa1 / (gamma - 1.0), kappa2)
        return cls((math.sqrt(rho / channels),) * channels, gamma, kappa1, kappa2)

    def with_kappas(self, kappa1: float, kappa2: float) -> "KirchhoffNoise":
        return replace(self, kappa1=float(kappa1), kappa2=float(kappa2))

    def to_dict(self) -> dict:
        return {"alphas": list(self.alphas), "rho": self.rho, "gamma": self.gamma,
                "kappa1": self.kappa1, "kappa2": self.kappa2}


def kirchhoff_apply(noise: KirchhoffNoise, u: SpectralField, i: int) -> SpectralField:
    """g_i(u) = alpha_i (1 + |u|_1^2) u."""
    if not 0 <= i < len(noise.alphas):
        raise IndexError(f"Kirchhoff channel {i} out of range for {len(noise.alphas)} channels")
    return u * (noise.alphas[i] * (1.0 + sobolev_norm_sq(u, 1.0)))


@dataclass(frozen=True)
class KirchhoffIdentities:
    """Channel sums and their closed forms for the Kirchhoff noise.

    ``hs_s = sum_i |g_i(u)|_s^2`` and ``diag_s = sum_i (g_i(u), u)_s^2`` for
    s = 1/2 and s = 1; the ``closed_*`` fields hold the matching closed forms
    ``rho (1 + |u|_1^2)^2 |u|_s^2`` and ``rho (1 + |u|_1^2)^2 |u|_s^4``.
    """

    hs_half: float
    diag_half: float
    hs_one: float
    diag_one: float
    closed: dict = field(default_factory=dict)

    def max_rel_error(self) -> float:
        worst = 0.0
        for name, value in self.closed.items():
            summed = getattr(self, name)
            scale = max(abs(summed), abs(value))
            if scale > 0:
                worst = max(worst, abs(summed - value) / scale)
        return worst


def kirchhoff_identities(noise: KirchhoffNoise, u: SpectralField) -> KirchhoffIdentities:
    """Summed Hilbert-Schmidt quantities of g(u) next to their closed forms."""
    sums = {}
    for s, tag in ((0.5, "half"), (1.0, "one")):
        hs = diag = 0.0
        for i in range(len(noise.alphas)):
            gi = kirchhoff_apply(noise, u, i)
            hs += sobolev_norm_sq(gi, s)
            diag += sobolev_inner(gi, u, s) ** 2
        sums[f"hs_{tag}"] = hs
        sums[f"diag_{tag}"] = diag
    factor = noise.rho * (1.0 + sobolev_norm_sq(u, 1.0)) ** 2
    closed = {}
    for s, tag in ((0.5, "half"), (1.0, "one")):
        n = sobolev_norm_sq(u, s)
        closed[f"hs_{tag}"] = factor * n
        closed[f"diag_{tag}"] = factor * n * n
    return KirchhoffIdentities(closed=closed, **sums)


@dataclass
class HypothesisCertificate:
    """Verdict for one hypothesis; ``margin`` is the smallest relative slack seen."""

    which: str
    passed: bool
    margin: float
    samples: int
    detail: str = ""

    def to_dict(self) -> dict:
        return asdict(self)


def kappa_from_deltas(basis: TransportNoiseBasis, delta1: float, delta2: float):
    """kappa1 = max(delta1, 4 M0^2/(1 - 8 N0)) and kappa2 = 2 delta2."""
    return max(float(delta1), basis.sigma_constant), 2.0 * float(delta2)


def _rel_slack(lhs, rhs):
    lhs = np.asarray(lhs, dtype=float)
    rhs = np.asarray(rhs, dtype=float)
    scale = np.abs(lhs) + np.abs(rhs)
    return np.where(scale > 0, (rhs - lhs) / np.where(scale > 0, scale, 1.0), 0.0)


def certificate_sample(trunc: Truncation, samples: int, rng=None, low=0.01, high=100.0):
    """Random fields with |u|_{1/2} log-uniform in [low, high] and varied spectral decay."""
    rng = np.random.default_rng(rng)
    out = []
    for _ in range(samples):
        amp = float(np.exp(rng.uniform(np.log(low), np.log(high))))
        decay = float(rng.uniform(0.5, 2.5))
        out.append(random_field(trunc, 0.5, amp, rng, decay=decay))
    return out


TIE_TOLERANCE = 1e-12


def _certificate(which, slack, samples, detail=""):
    margin = float(np.min(slack)) if np.size(slack) else 0.0
    if abs(margin) <= TIE_TOLERANCE:
        # equality up to rounding of the inputs counts as equality
        margin = 0.0
    return HypothesisCertificate(which, bool(margin >= 0.0), margin, int(samples), detail)


def certify_hypotheses(
    basis: TransportNoiseBasis,
    noise: KirchhoffNoise,
    delta1: float,
    delta2: float,
    samples: int = 1000,
    rng=None,
    trunc: Truncation = Truncation(2),
    slack_constant: float = 1.0,
    g3_constant: float | None = None,
    fields=None,
) -> list[HypothesisCertificate]:
    """Certify the noise hypotheses on ``samples`` random fields.

    kappa1 and kappa2 are derived from ``delta1``, ``delta2`` and the basis and
    set into the noise. ``slack_constant`` is the constant C of the
    ``C |u|_{1/2}^{gamma+2}`` term of H_g2; ``g3_constant`` is the constant of
    the H_g3 right side and defaults to rho. Margins are relative:
    ``(rhs - lhs) / (|rhs| + |lhs|)``.
    """
    kappa1, kappa2 = kappa_from_deltas(basis, delta1, delta2)
    noise = noise.with_kappas(kappa1, kappa2)
    gamma, rho = noise.gamma, noise.rho
    c3 = rho if g3_constant is None else float(g3_constant)
    if fields is None:
        fields = certificate_sample(trunc, samples, rng)
    n = len(fields)

    y = np.array([sobolev_norm_sq(u, 0.5) for u in fields])
    x = np.array([sobolev_norm_sq(u, 1.0) for u in fields])
    idents = [kirchhoff_identities(noise, u) for u in fields]
    hs_half = np.array([d.hs_half for d in idents])
    diag_half = np.array([d.diag_half for d in idents])
    hs_one = np.array([d.hs_one for d in idents])
    diag_one = np.array([d.diag_one for d in idents])
    sigma_lhs = np.array([sigma_hs_norm_sq(basis, u, 0.5) for u in fields])
    sigma_rhs = np.array([sigma_half_bound(basis, u) for u in fields])

    g2_lhs = kappa1 * (x ** 2 + 1.0) * y ** 2 + hs_half * y
    g2_rhs_star = gamma * diag_half
    g2_rhs = slack_constant * y ** (0.5 * (gamma + 2.0)) + g2_rhs_star
    g3_lhs = kappa2 * x ** 3 + hs_one
    g3_rhs = c3 * (1.0 + x) + 2.0 * diag_one / (1.0 + x)

    certs = [
        _certificate("Hsigma1", [1.0 if math.isfinite(basis.M0) else -1.0], 0, f"M0={basis.M0:.6g}"),
        _certificate("Hsigma2", [(0.125 - basis.N0) / 0.125], 0, f"N0={basis.N0:.6g}"),
        _certificate("sigma_hs_bound", _rel_slack(sigma_lhs, sigma_rhs), n,
                     f"constant 4M0^2/(1-8N0)={basis.sigma_constant:.6g}"),
        _certificate("Hg2", _rel_slack(g2_lhs, g2_rhs), n, f"C={slack_constant:g}"),
        _certificate("Hg2*", _rel_slack(g2_lhs, g2_rhs_star), n),
        _certificate("Hg3", _rel_slack(g3_lhs, g3_rhs), n, f"C={c3:.6g}"),
        _certificate(
            "rho_admissible",
            [_rel_slack(kappa1 / (gamma - 1.0), rho), _rel_slack(kappa2, rho)],
            0,
            f"rho={rho:.6g} kappa1/(gamma-1)={kappa1 / (gamma - 1.0):.6g} kappa2={kappa2:.6g}",
        ),
    ]
    return certs
