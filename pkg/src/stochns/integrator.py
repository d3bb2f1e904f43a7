"""Time stepping of the Galerkin SDE with stopping times and shared-noise coupling.

The state of a path is its half-space coefficient array (H, 3). Ensembles are
advanced together as (G, B, H, 3): G start groups, B paths per group. Path j
of every group draws from the same stream, which is the shared-noise coupling
used for continuity experiments.
"""
from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from .nonlinear import convect_raw
from .noise import KirchhoffNoise, TransportNoiseBasis
from .spectral import SpectralField, Truncation, _expand, _leray

__all__ = [
    "SCHEMES",
    "IntegratorConfig",
    "IntegratorFault",
    "NoiseIncrement",
    "SdeRun",
    "EnsembleResult",
    "TrajectoryRecord",
    "path_streams",
    "draw_increments",
    "step",
    "run_path",
    "simulate",
    "ConvergenceStudy",
    "self_convergence",
]

log = logging.getLogger(__name__)

SCHEMES = ("exponential_em", "semi_implicit_em", "exponential_geometric_em")
BLOWUP_CAP = 1e6


class IntegratorFault(RuntimeError):
    """Non-finite or runaway state; ``partial`` holds what was computed so far."""

    def __init__(self, message, partial=None, t=None, path=None):
        super().__init__(message)
        self.partial = partial
        self.t = t
        self.path = path


@dataclass(frozen=True)
class IntegratorConfig:
    dt: float = 1e-3
    t_end: float = 1.0
    scheme: str = "exponential_em"
    snapshot_stride: int = 10
    r_threshold: float = math.inf
    seed: int = 0
    backend: str = "direct"
    chunk: int = 256

    def __post_init__(self):
        if not self.dt > 0:
            raise ValueError(f"dt must be positive, got {self.dt!r}")
        if not self.t_end >= 0:
            raise ValueError(f"t_end must be non-negative, got {self.t_end!r}")
        if self.scheme not in SCHEMES:
            raise ValueError(f"unknown scheme {self.scheme!r}; expected one of {SCHEMES}")
        if int(self.snapshot_stride) < 1:
            raise ValueError("snapshot_stride must be >= 1")
        if not self.r_threshold > 0:
            raise ValueError("r_threshold must be positive")
        if int(self.chunk) < 1:
            raise ValueError("chunk must be >= 1")

    @property
    def n_steps(self) -> int:
        return int(round(self.t_end / self.dt))

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass(frozen=True)
class NoiseIncrement:
    """Brownian increments for one step: transport channels and Kirchhoff channels."""

    dW: np.ndarray
    dWhat: np.ndarray


@dataclass
class SdeRun:
    state: SpectralField
    t: float = 0.0
    stopped: bool = False
    stop_reason: str | None = None
    wiener_dim_transport: int = 0
    wiener_dim_kirchhoff: int = 0
    accumulators: dict = field(default_factory=lambda: {"h32": 0.0, "weighted": 0.0})


def path_streams(seed: int, n_paths: int) -> list[np.random.Generator]:
    """Independent per-path generators derived from one master seed."""
    return [np.random.Generator(np.random.PCG64(s)) for s in np.random.SeedSequence(seed).spawn(n_paths)]


def draw_increments(gen: np.random.Generator, n_steps: int, dim: int, dt: float) -> np.ndarray:
    """(n_steps, dim) N(0, dt) draws; the stream is consumed row by row."""
    return gen.standard_normal((n_steps, dim)) * math.sqrt(dt)


class _Dynamics:
    """Per-step arithmetic shared by every entry point."""

    def __init__(self, trunc, cfg, basis, noise):
        self.trunc = trunc
        self.cfg = cfg
        self.basis = basis if basis is not None else TransportNoiseBasis.empty()
        self.noise = noise if noise is not None else KirchhoffNoise(())
        self.d_w = len(self.basis)
        self.d_k = len(self.noise.alphas)
        self.alphas = np.array(self.noise.alphas, dtype=float)
        self.rho = float(np.sum(self.alphas ** 2))
        self.geometric = cfg.scheme == "exponential_geometric_em"
        self.k = trunc.half_wavevectors
        self.ksq = trunc.half_k_sq
        if cfg.scheme in ("exponential_em", "exponential_geometric_em"):
            self.factor = np.exp(-self.ksq * cfg.dt)
        else:
            self.factor = 1.0 / (1.0 + self.ksq * cfg.dt)
        self.w = {s: trunc.weights(s, half=True) for s in (0.5, 1.0, 1.5, 2.0)}
        self.alpha = 1.0 - 0.5 * self.noise.gamma
        heuristic = cfg.dt * trunc.n_max ** 4
        if heuristic > 1.0:
            log.info("dt * n_max^4 = %.3g exceeds 1 (%s)", heuristic, cfg.scheme)

    def norm_sq(self, u, s):
        return 2.0 * np.einsum("h,...hj->...", self.w[s], (u * np.conj(u)).real)

    def advance(self, u, h1, dW, dWh):
        """One step for a flat batch u (B, H, 3); h1 = |u|_1^2 (B,)."""
        dt = self.cfg.dt
        full = _expand(u)
        incr = -dt * convect_raw(self.trunc, full, full, self.cfg.backend)
        if self.d_w:
            incr += self.basis.drive_batch(self.trunc, full, dW)
        if self.d_k:
            # explicit channel loop: BLAS reductions reorder sums with the batch shape
            drive = np.zeros(len(u))
            for i in range(self.d_k):
                drive += self.alphas[i] * dWh[:, i]
            beta = 1.0 + h1
            if self.geometric:
                # exact step of du = beta u dZ with beta frozen at the left endpoint
                u = np.exp(beta * drive - 0.5 * beta ** 2 * self.rho * dt)[:, None, None] * u
            else:
                incr += (beta * drive)[:, None, None] * u
        # u is divergence-free and the factor is scalar per mode, so a single
        # projection after the step projects every term
        return _leray(self.k, self.ksq, self.factor[:, None] * (u + incr))


@dataclass
class EnsembleResult:
    """Snapshots and path functionals for G start groups of B coupled paths.

    Norm arrays are squared Sobolev norms of shape (G, B, S) at ``times``.
    ``integrals`` hold cumulative left-endpoint time integrals at the same
    times: ``h32`` (|u|_{3/2}^2), ``weighted`` (the tau-2 integrand),
    ``frac`` (|u|_{3/2}^{2-gamma}) and ``boot`` (|u|_2^2 / (1 + |u|_1^2)).
    ``diff_sup`` and ``diff_int`` compare each group with group 0 path by
    path: sup_t |u_g - u_0|_{1/2} and the integral of |u_g - u_0|_{3/2}^2.
    """

    times: np.ndarray
    norms: dict
    integrals: dict
    stopped: np.ndarray
    stop_time: np.ndarray
    stop_reason: np.ndarray
    diff_sup: np.ndarray
    diff_int: np.ndarray
    final: np.ndarray
    gamma: float
    states: np.ndarray | None = None
    completed_steps: int = 0

    @property
    def n_groups(self):
        return self.stopped.shape[0]

    @property
    def n_paths(self):
        return self.stopped.shape[1]

    def half_power(self) -> np.ndarray:
        """|u|_{1/2}^{2-gamma} as (|u|_{1/2}^2)^{(2-gamma)/2}."""
        return self.norms["h_half"] ** (0.5 * (2.0 - self.gamma))

    def final_fields(self, trunc: Truncation, group: int = 0) -> list[SpectralField]:
        return [SpectralField(trunc, c) for c in self.final[group]]


def _as_starts(x0) -> list[SpectralField]:
    if isinstance(x0, SpectralField):
        return [x0]
    starts = list(x0)
    if not starts:
        raise ValueError("need at least one start")
    for s in starts[1:]:
        if s.trunc != starts[0].trunc:
            raise ValueError("all starts must share one truncation")
    return starts


def simulate(
    x0,
    cfg: IntegratorConfig,
    basis: TransportNoiseBasis | None,
    noise: KirchhoffNoise | None,
    n_paths: int = 1,
    *,
    increments: np.ndarray | None = None,
    streams: list | None = None,
    keep_states: bool = False,
) -> EnsembleResult:
    """Integrate ``n_paths`` coupled paths from each start in ``x0``.

    Increments come from ``streams`` (default: :func:`path_streams` of
    ``cfg.seed``) in chunks of ``cfg.chunk`` steps, or from an explicit
    array ``increments`` of shape (n_paths, n_steps, d_W + d_K).
    """
    starts = _as_starts(x0)
    trunc = starts[0].trunc
    dyn = _Dynamics(trunc, cfg, basis, noise)
    G, B, H = len(starts), int(n_paths), trunc.half_count
    if B < 1:
        raise ValueError("n_paths must be >= 1")
    dim = dyn.d_w + dyn.d_k
    n_steps = cfg.n_steps
    if increments is not None:
        increments = np.asarray(increments, dtype=float)
        if increments.shape != (B, n_steps, dim):
            raise ValueError(f"increments shape {increments.shape} != {(B, n_steps, dim)}")
    elif streams is None:
        streams = path_streams(cfg.seed, B)
    elif len(streams) != B:
        raise ValueError(f"{len(streams)} streams for {B} paths")

    stride = int(cfg.snapshot_stride)
    snap_steps = sorted(set(range(0, n_steps + 1, stride)) | {n_steps})
    S = len(snap_steps)
    snap_index = {s: i for i, s in enumerate(snap_steps)}
    times = np.array([s * cfg.dt for s in snap_steps])

    u = np.broadcast_to(np.stack([s.coeffs for s in starts])[:, None], (G, B, H, 3)).copy()
    u = u.reshape(G * B, H, 3)
    norms = {name: np.zeros((G * B, S)) for name in ("h_half", "h_one", "h_three_half", "h_two")}
    integrals = {name: np.zeros((G * B, S)) for name in ("h32", "weighted", "frac", "boot")}
    running = {name: np.zeros(G * B) for name in integrals}
    stopped = np.zeros(G * B, dtype=bool)
    stop_time = np.full(G * B, np.nan)
    stop_reason = np.full(G * B, "", dtype=object)
    diff_sup = np.zeros((G, B))
    diff_int = np.zeros((G, B))
    states = np.zeros((G * B, S, H, 3), dtype=np.complex128) if keep_states else None
    radius_sq = cfg.r_threshold ** 2
    power = 0.5 * (2.0 - dyn.noise.gamma)

    def measure(v):
        return {s: dyn.norm_sq(v, s) for s in (0.5, 1.0, 1.5, 2.0)}

    def record(i, m):
        norms["h_half"][:, i] = m[0.5]
        norms["h_one"][:, i] = m[1.0]
        norms["h_three_half"][:, i] = m[1.5]
        norms["h_two"][:, i] = m[2.0]
        for name in integrals:
            integrals[name][:, i] = running[name]
        if keep_states:
            states[:, i] = u

    def diff_of(v):
        grouped = v.reshape(G, B, H, 3)
        return grouped - grouped[:1]

    def track_sup(v):
        if G > 1:
            np.maximum(diff_sup, np.sqrt(dyn.norm_sq(diff_of(v), 0.5)), out=diff_sup)

    def partial(i_done):
        return _pack(times[:i_done], norms, integrals, i_done, stopped, stop_time, stop_reason,
                     diff_sup, diff_int, u, G, B, H, dyn.noise.gamma, states, step_no)

    m = measure(u)
    at_radius = m[0.5] >= radius_sq
    stopped |= at_radius
    stop_time[at_radius] = 0.0
    stop_reason[at_radius] = "h_half_radius"
    step_no = 0
    record(0, m)
    track_sup(u)

    chunk = None
    for step_no in range(1, n_steps + 1):
        j = (step_no - 1) % cfg.chunk
        if increments is not None:
            inc = increments[:, step_no - 1]
        else:
            if j == 0:
                rows = min(cfg.chunk, n_steps - step_no + 1)
                chunk = np.stack([draw_increments(g, rows, dim, cfg.dt) for g in streams], axis=1)
            inc = chunk[j]
        inc = np.broadcast_to(inc[None], (G, B, dim)).reshape(G * B, dim)
        active = ~stopped

        new = dyn.advance(u, m[1.0], inc[:, :dyn.d_w], inc[:, dyn.d_w:])
        new[stopped] = u[stopped]
        dt_active = np.where(active, cfg.dt, 0.0)
        running["h32"] += dt_active * m[1.5]
        running["weighted"] += dt_active * m[1.5] / (1.0 + m[0.5]) ** (1.0 - dyn.alpha)
        running["frac"] += dt_active * m[1.5] ** power
        running["boot"] += dt_active * m[2.0] / (1.0 + m[1.0])
        if G > 1:
            diff_int += cfg.dt * dyn.norm_sq(diff_of(u), 1.5)

        u = new
        m = measure(u)
        t_new = step_no * cfg.dt
        bad = active & ~(np.isfinite(m[0.5]) & (m[0.5] <= BLOWUP_CAP ** 2))
        if np.any(bad):
            path = int(np.flatnonzero(bad)[0])
            raise IntegratorFault(
                f"path {path % B} of group {path // B}: |u|_1/2 left [0, {BLOWUP_CAP:g}] at t={t_new:.6g}",
                partial=partial(_filled(snap_steps, step_no - 1)), t=t_new, path=path)
        hit1 = active & (m[0.5] >= radius_sq)
        hit2 = active & ~hit1 & (running["weighted"] >= cfg.r_threshold)
        for hit, reason in ((hit1, "h_half_radius"), (hit2, "integral_radius")):
            stopped |= hit
            stop_time[hit] = t_new
            stop_reason[hit] = reason
        track_sup(u)
        if step_no in snap_index:
            record(snap_index[step_no], m)

    return _pack(times, norms, integrals, S, stopped, stop_time, stop_reason, diff_sup, diff_int,
                 u, G, B, H, dyn.noise.gamma, states, n_steps)


def _filled(snap_steps, last_step):
    return sum(1 for s in snap_steps if s <= last_step)


def _pack(times, norms, integrals, n_snap, stopped, stop_time, stop_reason, diff_sup, diff_int,
          u, G, B, H, gamma, states, steps):
    def shape(a):
        return a[:, :n_snap].reshape(G, B, n_snap).copy()

    return EnsembleResult(
        times=np.asarray(times[:n_snap]).copy(),
        norms={k: shape(v) for k, v in norms.items()},
        integrals={k: shape(v) for k, v in integrals.items()},
        stopped=stopped.reshape(G, B).copy(),
        stop_time=stop_time.reshape(G, B).copy(),
        stop_reason=stop_reason.reshape(G, B).copy(),
        diff_sup=diff_sup.copy(),
        diff_int=diff_int.copy(),
        final=u.reshape(G, B, H, 3).copy(),
        gamma=gamma,
        states=None if states is None else states[:, :n_snap].reshape(G, B, n_snap, H, 3).copy(),
        completed_steps=steps,
    )


def step(run: SdeRun, cfg: IntegratorConfig, basis: TransportNoiseBasis | None,
         noise: KirchhoffNoise | None, inc: NoiseIncrement) -> SdeRun:
    """Advance a single path by one step with the given increments."""
    if run.stopped:
        raise ValueError("cannot step a stopped run")
    trunc = run.state.trunc
    dyn = _Dynamics(trunc, cfg, basis, noise)
    dW = np.asarray(inc.dW, dtype=float).reshape(1, -1)
    dWh = np.asarray(inc.dWhat, dtype=float).reshape(1, -1)
    if dW.shape[1] != dyn.d_w or dWh.shape[1] != dyn.d_k:
        raise ValueError(f"increment dims ({dW.shape[1]}, {dWh.shape[1]}) != channels ({dyn.d_w}, {dyn.d_k})")
    u = run.state.coeffs[None]
    m = {s: dyn.norm_sq(u, s)[0] for s in (0.5, 1.0, 1.5)}
    new = dyn.advance(u, np.array([m[1.0]]), dW, dWh)[0]
    h_half = float(dyn.norm_sq(new, 0.5))
    if not (math.isfinite(h_half) and h_half <= BLOWUP_CAP ** 2):
        raise IntegratorFault(f"|u|_1/2 left [0, {BLOWUP_CAP:g}] at t={run.t + cfg.dt:.6g}",
                              partial=run, t=run.t + cfg.dt)
    acc = dict(run.accumulators)
    acc["h32"] = acc.get("h32", 0.0) + cfg.dt * m[1.5]
    acc["weighted"] = acc.get("weighted", 0.0) + cfg.dt * m[1.5] / (1.0 + m[0.5]) ** (1.0 - dyn.alpha)
    out = SdeRun(SpectralField(trunc, new), run.t + cfg.dt, False, None, dyn.d_w, dyn.d_k, acc)
    if h_half >= cfg.r_threshold ** 2:
        out.stopped, out.stop_reason = True, "h_half_radius"
    elif acc["weighted"] >= cfg.r_threshold:
        out.stopped, out.stop_reason = True, "integral_radius"
    return out


@dataclass
class TrajectoryRecord:
    """One path's time series with its stopping information."""

    times: np.ndarray
    h_half_sq: np.ndarray
    h_one_sq: np.ndarray
    h_three_half_sq: np.ndarray
    gamma: float
    stopped: bool
    stop_time: float
    stop_reason: str
    final: SpectralField
    snapshots: list = field(default_factory=list)

    COLUMNS = ("t", "h_half_sq", "h_one_sq", "h_three_half_sq", "h_half_pow", "log1p_h_one", "stopped")

    @classmethod
    def from_ensemble(cls, res: EnsembleResult, trunc: Truncation, group: int = 0, path: int = 0):
        snaps = []
        if res.states is not None:
            snaps = [SpectralField(trunc, c) for c in res.states[group, path]]
        return cls(
            times=res.times,
            h_half_sq=res.norms["h_half"][group, path],
            h_one_sq=res.norms["h_one"][group, path],
            h_three_half_sq=res.norms["h_three_half"][group, path],
            gamma=res.gamma,
            stopped=bool(res.stopped[group, path]),
            stop_time=float(res.stop_time[group, path]),
            stop_reason=str(res.stop_reason[group, path]),
            final=SpectralField(trunc, res.final[group, path]),
            snapshots=snaps,
        )

    @property
    def h_half_pow(self):
        return self.h_half_sq ** (0.5 * (2.0 - self.gamma))

    def stopped_flags(self) -> np.ndarray:
        if not self.stopped:
            return np.zeros(len(self.times), dtype=int)
        return (self.times >= self.stop_time - 1e-12).astype(int)

    def rows(self):
        flags = self.stopped_flags()
        pw = self.h_half_pow
        for i, t in enumerate(self.times):
            yield (t, self.h_half_sq[i], self.h_one_sq[i], self.h_three_half_sq[i], pw[i],
                   math.log1p(self.h_one_sq[i]), int(flags[i]))


def run_path(x0: SpectralField, cfg: IntegratorConfig, basis: TransportNoiseBasis | None,
             noise: KirchhoffNoise | None, rng_stream=None, keep_states: bool = False) -> TrajectoryRecord:
    """Integrate one path; the default stream is path 0 of ``cfg.seed``.

    On a fault the partial record is attached to the raised
    :class:`IntegratorFault` as a TrajectoryRecord.
    """
    streams = [rng_stream] if rng_stream is not None else path_streams(cfg.seed, 1)
    try:
        res = simulate(x0, cfg, basis, noise, 1, streams=streams, keep_states=keep_states)
    except IntegratorFault as exc:
        if exc.partial is not None:
            exc.partial = TrajectoryRecord.from_ensemble(exc.partial, x0.trunc)
        raise
    return TrajectoryRecord.from_ensemble(res, x0.trunc)


@dataclass
class ConvergenceStudy:
    dts: list
    errors: list
    stderr: list
    slope: float
    reference_dt: float


def self_convergence(x0: SpectralField, cfg: IntegratorConfig, basis, noise, dts, n_paths: int = 20,
                     refine: int = 32) -> ConvergenceStudy:
    """Strong error at ``cfg.t_end`` against a shared-noise reference at min(dts)/refine.

    Coarse increments are sums of the reference increments. The error of a
    path is |u_dt(T) - u_ref(T)|_{L2}; the slope is fitted on log RMS error
    against log dt.
    """
    dts = sorted(float(d) for d in dts)
    dt_ref = dts[0] / refine
    n_ref = int(round(cfg.t_end / dt_ref))
    for d in dts:
        ratio = d / dt_ref
        if abs(ratio - round(ratio)) > 1e-9 or n_ref % int(round(ratio)):
            raise ValueError(f"dt={d:g} is not a multiple of the reference step {dt_ref:g}")
    dyn = _Dynamics(x0.trunc, cfg, basis, noise)
    dim = dyn.d_w + dyn.d_k
    streams = path_streams(cfg.seed, n_paths)
    fine = np.stack([draw_increments(g, n_ref, dim, dt_ref) for g in streams])
    ref_cfg = replace(cfg, dt=dt_ref, snapshot_stride=n_ref)
    ref = simulate(x0, ref_cfg, basis, noise, n_paths, increments=fine).final[0]
    errors, stderr = [], []
    for d in dts:
        r = int(round(d / dt_ref))
        coarse = fine.reshape(n_paths, n_ref // r, r, dim).sum(axis=2)
        c = replace(cfg, dt=d, snapshot_stride=n_ref // r)
        out = simulate(x0, c, basis, noise, n_paths, increments=coarse).final[0]
        e2 = 2.0 * np.sum(np.abs(out - ref) ** 2, axis=(1, 2))
        errors.append(float(np.sqrt(e2.mean())))
        stderr.append(float(e2.std(ddof=1) / np.sqrt(n_paths) / (2.0 * max(errors[-1], 1e-300))))
    slope = float(np.polyfit(np.log(dts), np.log(errors), 1)[0])
    return ConvergenceStudy(dts, errors, stderr, slope, dt_ref)
