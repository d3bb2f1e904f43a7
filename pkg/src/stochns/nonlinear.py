"""Convective nonlinearity and empirical certificates for its estimates.

``convect(u, v)`` is the Leray-projected, cube-truncated coefficient list of
``(u . grad) v``. The default backend sums every mode pair ``p + q = k``
exactly; ``backend="fft"`` evaluates the same products on a zero-padded grid.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from . import _kernels
from .spectral import (
    SpectralField,
    Truncation,
    _expand,
    _leray,
    lambda_pow,
    random_field,
    sobolev_inner,
    sobolev_norm_sq,
)

__all__ = [
    "ConvectionResult",
    "InequalityReport",
    "convect",
    "convect_raw",
    "trilinear",
    "commutator_norm",
    "commutator_ratio",
    "lp_norm",
    "amplitude_sup_ratio",
    "bes12_terms",
    "Bes12Fitter",
    "verify_bes12",
    "fit_bilinear_bound",
]

BACKENDS = ("direct", "fft")


@dataclass(frozen=True)
class ConvectionResult:
    field: SpectralField
    residual_div: float


@dataclass(frozen=True)
class InequalityReport:
    name: str
    samples: int
    worst_ratio: float
    fitted_constant: float
    passed: bool

    def to_dict(self) -> dict:
        return asdict(self)


def _check_pair(u: SpectralField, v: SpectralField):
    if u.trunc != v.trunc:
        raise ValueError(
            f"truncation mismatch: n_max={u.trunc.n_max} vs n_max={v.trunc.n_max}"
        )


def convect_raw(trunc: Truncation, u_full, v_full, backend: str = "direct") -> np.ndarray:
    """Batched half-space coefficients of (u . grad) v before projection.

    ``u_full`` and ``v_full`` have shape (B, M, 3).
    """
    if backend == "direct":
        return _kernels.pair_table(trunc).convect(u_full, v_full)
    if backend == "fft":
        return _kernels.convect_fft(trunc, u_full, v_full)
    raise ValueError(f"unknown convolution backend {backend!r}; expected one of {BACKENDS}")


def convect(u: SpectralField, v: SpectralField, backend: str = "direct") -> ConvectionResult:
    """B(u, v) = P((u . grad) v), truncated to the shared cube."""
    _check_pair(u, v)
    t = u.trunc
    raw = convect_raw(t, u.full()[None], v.full()[None], backend)[0]
    kdot = np.einsum("kj,kj->k", t.half_wavevectors, raw)
    projected = _leray(t.half_wavevectors, t.half_k_sq, raw)
    return ConvectionResult(SpectralField(t, projected), float(np.max(np.abs(kdot), initial=0.0)))


def trilinear(u: SpectralField, v: SpectralField, w: SpectralField, backend: str = "direct") -> float:
    """b(u, v, w): L2 pairing of (u . grad) v with w."""
    _check_pair(u, v)
    _check_pair(u, w)
    raw = convect_raw(u.trunc, u.full()[None], v.full()[None], backend)[0]
    return sobolev_inner(SpectralField(u.trunc, raw), w, 0.0)


# -- commutator ---------------------------------------------------------------

def _outer_grid(grid, f_full, g_full):
    """Pointwise products f_a g_b on the padded grid, shape (A, C, L, L, L)."""
    fr = grid.to_grid(f_full)
    gr = grid.to_grid(g_full)
    return fr[:, None] * gr[None, :]


def _commutator_sq(trunc, f_full, g_full, s):
    """|Lambda^s(f g) - f Lambda^s g|^2 in L2 for component stacks (A, M), (C, M).

    Products are truncated to the cube, mean mode included.
    """
    grid = _kernels.padded_grid(trunc)
    scale = trunc.k_sq ** (0.5 * s)
    coeffs, mean = grid.from_grid(_outer_grid(grid, f_full, g_full), with_mean=True)
    coeffs2, mean2 = grid.from_grid(_outer_grid(grid, f_full, g_full * scale), with_mean=True)
    diff = coeffs * scale - coeffs2
    # Lambda^s kills the mean mode for s > 0; only f Lambda^s g contributes there
    return float(np.sum(np.abs(diff) ** 2) + np.sum(np.abs(mean2) ** 2))


def commutator_norm(f: SpectralField, g: SpectralField, s: float) -> float:
    """L2 norm of the commutator [Lambda^s, f] g for the outer product f_a g_b."""
    if not s > 0:
        raise ValueError(f"commutator estimate needs s > 0, got {s!r}")
    _check_pair(f, g)
    return float(np.sqrt(_commutator_sq(f.trunc, f.full().T, g.full().T, s)))


def lp_norm(trunc: Truncation, comps: np.ndarray, p: float, oversample: int = 2) -> float:
    """L^p norm (normalised measure) of the pointwise Euclidean norm of a component stack."""
    size = oversample * (2 * trunc.n_max + 1)
    grid = _kernels.PaddedGrid(trunc, size=max(size, 3 * trunc.n_max + 1))
    vals = grid.to_grid(np.asarray(comps))
    mag = np.sqrt(np.sum(vals.reshape((-1,) + vals.shape[-3:]) ** 2, axis=0))
    if np.isinf(p):
        return float(mag.max())
    return float(np.mean(mag ** p) ** (1.0 / p))


def _gradient(trunc, full):
    """Components d_j u_i for a (M, 3) field -> (9, M)."""
    k = trunc.wavevectors.astype(float)
    return (1j * k[:, :, None] * full[:, None, :]).reshape(len(k), 9).T


def commutator_ratio(f: SpectralField, g: SpectralField, s: float = 0.5) -> float:
    """Commutator with G = grad g against its Kato-Ponce majorant at (p1..p4) = (3, 6, 6, 3)."""
    t = f.trunc
    ff, gg = f.full(), g.full()
    G = _gradient(t, gg)
    lhs = np.sqrt(_commutator_sq(t, ff.T, G, s))
    grad_f = _gradient(t, ff)
    lam_s_f = (ff * (t.k_sq ** (0.5 * s))[:, None]).T
    lam_G = G * t.k_sq ** (0.5 * (s - 1.0))
    rhs = lp_norm(t, grad_f, 3) * lp_norm(t, lam_G, 6) + lp_norm(t, lam_s_f, 6) * lp_norm(t, G, 3)
    return float(lhs / rhs) if rhs > 0 else 0.0


# -- bilinear energy inequalities ----------------------------------------------

def bes12_terms(u: SpectralField, backend: str = "direct") -> dict:
    """Ingredients of the two energy inequalities for B at one field.

    ``lhs1 = (B(u), Lambda u)``, ``lhs2 = (B(u), Lambda^2 u)`` together with the
    Sobolev norms they are compared against.
    """
    bu = convect(u, u, backend).field
    return {
        "lhs1": sobolev_inner(bu, lambda_pow(u, 1.0), 0.0),
        "lhs2": sobolev_inner(bu, lambda_pow(u, 2.0), 0.0),
        "h_half": sobolev_norm_sq(u, 0.5),
        "h_one": sobolev_norm_sq(u, 1.0),
        "h_three_half": sobolev_norm_sq(u, 1.5),
        "h_two": sobolev_norm_sq(u, 2.0),
    }


def direct_ratio(terms: dict, which: int) -> float:
    """(lhs - |u|^2/2) / majorant at the sampled amplitude, clipped at 0."""
    if which == 1:
        lhs, quad, denom = terms["lhs1"], terms["h_three_half"], terms["h_one"] ** 2 * terms["h_half"]
    else:
        lhs, quad, denom = terms["lhs2"], terms["h_two"], terms["h_one"] ** 3
    if denom == 0:
        return 0.0
    return max(0.0, (lhs - 0.5 * quad) / denom)


def amplitude_sup_ratio(terms: dict, which: int) -> float:
    """sup over scalings u -> lam u of :func:`direct_ratio`.

    Under scaling the three terms go as lam^3 a, lam^2 c / 2 and lam^6 d, so
    the sup of (lam^3 a - lam^2 c / 2) / (lam^6 d) is 27 a^4 / (32 c^3 d),
    attained at |lam| = 2c / (3|a|); negative lam covers a < 0.
    """
    if which == 1:
        a, c, d = terms["lhs1"], terms["h_three_half"], terms["h_one"] ** 2 * terms["h_half"]
    else:
        a, c, d = terms["lhs2"], terms["h_two"], terms["h_one"] ** 3
    if d == 0 or c == 0:
        return 0.0
    return 27.0 * a ** 4 / (32.0 * c ** 3 * d)


def _grid_product_coeffs(grid, a, b, contract):
    """Cube coefficients of a pointwise contraction of two grid stacks."""
    return grid.from_grid(np.einsum(contract, a, b))


def log_ratio_and_grad(trunc: Truncation, half: np.ndarray, which: int):
    """log of :func:`amplitude_sup_ratio` at ``half`` and its L2 gradient (H, 3).

    The cubic term a(u) = b(u, u, w), w = Lambda^m u, m = which, has gradient
    P[(grad u)^T w - (u . grad) w + Lambda^m ((u . grad) u)]; all products are
    evaluated exactly on the padded grid.
    """
    grid = _kernels.padded_grid(trunc)
    m = float(which)
    k = trunc.wavevectors.astype(float)
    full = _expand(half)
    lam = trunc.k_sq ** (0.5 * m)
    w = full * lam[:, None]
    grad = lambda f: 1j * k.T[:, None, :] * f.T[None, :, :]        # (j, i, M): d_j f_i
    U, W = grid.to_grid(full.T), grid.to_grid(w.T)
    dU, dW = grid.to_grid(grad(full)), grid.to_grid(grad(w))
    adv_u = _grid_product_coeffs(grid, U, dU, "jxyz,jixyz->ixyz").T   # (u . grad) u
    a = float(np.sum(adv_u * np.conj(w)).real)
    if a == 0.0:
        return -np.inf, np.zeros_like(half)
    g_a = (_grid_product_coeffs(grid, dU, W, "jixyz,ixyz->jxyz").T
           - _grid_product_coeffs(grid, U, dW, "jxyz,jixyz->ixyz").T
           + adv_u * lam[:, None])
    h = trunc.half_count
    g_a = _leray(trunc.half_wavevectors, trunc.half_k_sq, g_a[h:])
    ksq = trunc.half_k_sq[:, None]
    c_pow, d_terms = (1.5, ((2.0, 1.0), (1.0, 0.5))) if which == 1 else (2.0, ((3.0, 1.0),))
    nsq = lambda s: 2.0 * float(np.sum(trunc.half_k_sq ** s * np.sum(np.abs(half) ** 2, axis=1)))
    c = nsq(c_pow)
    value = np.log(27.0 / 32.0) + 4.0 * np.log(abs(a)) - 3.0 * np.log(c)
    g = 4.0 * g_a / a - 3.0 * (2.0 * ksq ** c_pow * half) / c
    for mult, s in d_terms:
        ns = nsq(s)
        value -= mult * np.log(ns)
        g = g - mult * (2.0 * ksq ** s * half) / ns
    return float(value), g


def ascend_ratio(u: SpectralField, which: int, maxiter: int = 200) -> SpectralField:
    """Locally maximise the scale-free ratio of inequality ``which`` from ``u``."""
    from scipy.optimize import minimize

    t = u.trunc
    shape = u.coeffs.shape

    def unpack(x):
        z = x[: x.size // 2] + 1j * x[x.size // 2:]
        return _leray(t.half_wavevectors, t.half_k_sq, z.reshape(shape))

    def objective(x):
        half = unpack(x)
        scale = np.sqrt(2.0 * np.sum(np.abs(half) ** 2))
        val, g = log_ratio_and_grad(t, half / scale, which)
        if not np.isfinite(val):
            return 1e3, np.zeros_like(x)
        # dL = 2 Re sum conj(g) dz on the half space; the map to x is the projection
        g = _leray(t.half_wavevectors, t.half_k_sq, g) / scale
        return -val, -2.0 * np.concatenate([g.real.ravel(), g.imag.ravel()])

    x0 = np.concatenate([u.coeffs.real.ravel(), u.coeffs.imag.ravel()])
    res = minimize(objective, x0, jac=True, method="L-BFGS-B", options={"maxiter": maxiter})
    best = unpack(res.x)
    return SpectralField(t, best / np.sqrt(2.0 * np.sum(np.abs(best) ** 2)))


def _draw_terms(trunc, samples, rng, backend):
    rng = np.random.default_rng(rng)
    return [bes12_terms(random_field(trunc, 0.5, 1.0, rng), backend) for _ in range(samples)]


class Bes12Fitter(BaseEstimator):
    """Fit delta1, delta2 on one random draw; verify with a margin on another.

    Every sample is scored at its best amplitude (see
    :func:`amplitude_sup_ratio`), then the ``n_ascent`` best samples are
    refined by gradient ascent over directions. The fitted constant is the
    largest ratio seen.

    Parameters
    ----------
    n_max : int
        Working truncation.
    samples : int
        Size of each draw.
    margin : float
        Verification multiplies the fitted constants by ``1 + margin``.
    n_ascent : int
        Number of top samples refined by ascent; 0 keeps the plain sample max.
    random_state : int or None
        Seed for the fitting draw; verification draws use their own seed.
    """

    def __init__(self, n_max=2, samples=1000, margin=0.1, n_ascent=4, random_state=0,
                 backend="direct"):
        self.n_max = n_max
        self.samples = samples
        self.margin = margin
        self.n_ascent = n_ascent
        self.random_state = random_state
        self.backend = backend

    def fit(self, X=None, y=None):
        """Fit on the fields ``X`` if given, else on a fresh random draw."""
        trunc = Truncation(self.n_max)
        rng = np.random.default_rng(self.random_state)
        fields = list(X) if X is not None else [
            random_field(trunc, 0.5, 1.0, rng) for _ in range(self.samples)]
        terms = [bes12_terms(u, self.backend) for u in fields]
        self.ratios1_ = np.array([amplitude_sup_ratio(t, 1) for t in terms])
        self.ratios2_ = np.array([amplitude_sup_ratio(t, 2) for t in terms])
        best = []
        for which, ratios in ((1, self.ratios1_), (2, self.ratios2_)):
            top = np.argsort(ratios)[::-1][: self.n_ascent]
            refined = [amplitude_sup_ratio(bes12_terms(ascend_ratio(fields[i], which), self.backend), which)
                       for i in top]
            best.append(float(max([ratios.max(initial=0.0)] + refined)))
        self.delta1_, self.delta2_ = best
        self.n_fit_ = len(terms)
        return self

    def verify(self, X=None, random_state=None) -> list[InequalityReport]:
        """Check both inequalities with the inflated constants on independent fields."""
        check_is_fitted(self, ["delta1_", "delta2_"])
        trunc = Truncation(self.n_max)
        if X is None:
            seed = random_state if random_state is not None else _independent_seed(self.random_state)
            terms = _draw_terms(trunc, self.samples, seed, self.backend)
        else:
            terms = [bes12_terms(u, self.backend) for u in X]
        reports = []
        for which, delta in ((1, self.delta1_), (2, self.delta2_)):
            ratios = np.array([amplitude_sup_ratio(t, which) for t in terms])
            const = (1.0 + self.margin) * delta
            worst = float(ratios.max(initial=0.0) / const) if const > 0 else (
                0.0 if ratios.max(initial=0.0) == 0 else np.inf)
            reports.append(InequalityReport(f"bes12_delta{which}", len(terms), worst, const, worst <= 1.0))
        return reports


def _independent_seed(seed):
    # a child stream of the fitting seed, distinct from the fitting stream itself
    return np.random.SeedSequence(0 if seed is None else seed).spawn(1)[0]


def verify_bes12(samples: int, trunc: Truncation, rng=None, margin: float = 0.1):
    """Two-phase fit/verify; returns (delta1_hat, delta2_hat, reports)."""
    if samples < 1:
        raise ValueError("samples must be >= 1")
    fit_seed, check_seed = (int(x) for x in np.random.default_rng(rng).integers(2 ** 63, size=2))
    fitter = Bes12Fitter(trunc.n_max, samples, margin, random_state=fit_seed).fit()
    reports = fitter.verify(random_state=check_seed)
    return fitter.delta1_, fitter.delta2_, reports


def fit_bilinear_bound(samples: int, trunc: Truncation, rng=None, backend="direct") -> float:
    """max over random pairs of |B(u, v)|_{-1} / (|u|_1 |v|_1)."""
    rng = np.random.default_rng(rng)
    worst = 0.0
    for _ in range(samples):
        u = random_field(trunc, 1.0, 1.0, rng)
        v = random_field(trunc, 1.0, 1.0, rng)
        worst = max(worst, np.sqrt(sobolev_norm_sq(convect(u, v, backend).field, -1.0)))
    return float(worst)


__all__ += ["direct_ratio", "BACKENDS", "ascend_ratio", "log_ratio_and_grad"]
