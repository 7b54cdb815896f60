"""Compactly supported kick noise on a space-time window.

Each kick is a finite sum sum_j b_j xi_j psi_j where psi_j multiplies a
smooth product bump by a tensor sine mode of the window and the xi_j are
i.i.d. with a polynomial density vanishing at +-1.  The construction
keeps the force supported strictly inside the window, so the no-slip
walls never see it.
"""

from dataclasses import dataclass, field
from math import comb
from typing import Optional, Sequence, Tuple

import numpy as np

from .errors import GeometryError, NoiseModelError
from .stats import wilson_interval

__all__ = [
    "NoiseModel",
    "KickRealization",
    "build_model",
    "power_law_amplitudes",
    "sample_kick",
    "sample_kick_batch",
    "eval_kick",
    "kick_radius",
    "kick_ball_probability",
    "kick_l2_distance",
    "kick_h1_norm",
    "coefficient_density",
    "coefficient_cdf",
    "coefficient_quantile",
    "KickForcingEvaluator",
]


def _bump(s: np.ndarray, sharpness: float) -> np.ndarray:
    """C-infinity bump: exp(sharpness*(1 - 1/(1-s^2))) inside |s|<1, 0 outside."""
    s = np.asarray(s, dtype=np.float64)
    inside = np.abs(s) < 1.0
    out = np.zeros_like(s)
    ss = np.where(inside, s, 0.0)
    out[inside] = np.exp(sharpness * (1.0 - 1.0 / (1.0 - ss * ss)))[inside]
    return out


def _mode_table(n_modes: int) -> np.ndarray:
    """(a, b, c, component) rows sorted by total frequency, ties by axis order."""
    rows = []
    total = 3
    while len(rows) < n_modes:
        for a in range(1, total - 1):
            for b in range(1, total - a):
                c = total - a - b
                rows.append((a, b, c))
        total += 1
    rows = rows[:n_modes]
    table = np.zeros((n_modes, 4), dtype=np.int64)
    for j, (a, b, c) in enumerate(rows):
        table[j] = (a, b, c, j % 2)
    return table


@dataclass(frozen=True)
class NoiseModel:
    """Kick-noise structure: window, mode count, amplitudes, density shape.

    Derived quantities (mode table, window-quadrature Gram matrices, mode
    norms) are computed once at construction.
    """

    window: Tuple[float, float, float, float, float, float]
    n_modes: int
    amplitudes: np.ndarray
    density_exponent: int = 2
    cutoff_sharpness: float = 1.0
    quad_cells: int = 64
    modes: np.ndarray = field(init=False, repr=False)
    psi_l2: np.ndarray = field(init=False, repr=False)
    psi_h1: np.ndarray = field(init=False, repr=False)
    gram_l2: np.ndarray = field(init=False, repr=False)
    gram_h1: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        t0, t1, x0, x1, y0, y1 = (float(w) for w in self.window)
        for lo, hi, name in ((t0, t1, "time"), (x0, x1, "x"), (y0, y1, "y")):
            if not (0.0 < lo < hi < 1.0):
                raise GeometryError(
                    f"{name} window ({lo}, {hi}) must satisfy 0 < lo < hi < 1"
                )
        object.__setattr__(self, "window", (t0, t1, x0, x1, y0, y1))
        b = np.asarray(self.amplitudes, dtype=np.float64)
        if b.shape != (self.n_modes,):
            raise NoiseModelError(f"expected {self.n_modes} amplitudes, got {b.shape}")
        if np.any(b <= 0.0) or not np.all(np.isfinite(b)):
            raise NoiseModelError("every mode amplitude must be strictly positive")
        if self.n_modes < 1:
            raise NoiseModelError("need at least one mode")
        if int(self.density_exponent) < 2 or self.density_exponent != int(self.density_exponent):
            raise NoiseModelError("density exponent must be an integer >= 2")
        if self.cutoff_sharpness <= 0.0:
            raise NoiseModelError("cutoff sharpness must be positive")
        if self.quad_cells < 16:
            raise NoiseModelError("window quadrature needs at least 16 cells per axis")
        b = b.copy()
        b.setflags(write=False)
        object.__setattr__(self, "amplitudes", b)
        object.__setattr__(self, "modes", _mode_table(self.n_modes))
        self.modes.setflags(write=False)
        if self.quad_cells <= 2 * int(np.max(self.modes[:, :3])):
            raise NoiseModelError("window quadrature too coarse for the mode frequencies")
        self._build_norm_tables()

    # -- window-quadrature machinery -------------------------------------

    def _axis(self, k: int):
        lo, hi = self.window[2 * k], self.window[2 * k + 1]
        n = self.quad_cells
        h = (hi - lo) / n
        pts = lo + (np.arange(n) + 0.5) * h
        return lo, hi, pts, h

    def _axis_factor(self, k: int, freq: np.ndarray, pts: np.ndarray) -> np.ndarray:
        """(n_freq, n_pts) values of sqrt(2/L) sin(a pi (s-lo)/L)."""
        lo, hi = self.window[2 * k], self.window[2 * k + 1]
        L = hi - lo
        ph = np.pi * (pts - lo) / L
        return np.sqrt(2.0 / L) * np.sin(np.outer(freq, ph))

    def _axis_bump(self, k: int, pts: np.ndarray) -> np.ndarray:
        lo, hi = self.window[2 * k], self.window[2 * k + 1]
        s = (2.0 * pts - (lo + hi)) / (hi - lo)
        return _bump(s, self.cutoff_sharpness)

    def _build_norm_tables(self):
        """Per-axis value/derivative Gram tables -> mode Gram matrices.

        Finite-difference derivatives on the refined window grid; the
        separable structure keeps everything one-dimensional.
        """
        J = self.n_modes
        maxf = int(np.max(self.modes[:, :3]))
        freqs = np.arange(1, maxf + 1)
        V = []  # value Grams per axis
        D = []  # derivative Grams per axis
        for k in range(3):
            _, _, pts, h = self._axis(k)
            g = self._axis_factor(k, freqs, pts) * self._axis_bump(k, pts)[None, :]
            V.append((g * h) @ g.T)
            dg = np.gradient(g, h, axis=1)
            D.append((dg * h) @ dg.T)
        a = self.modes[:, 0] - 1
        bx = self.modes[:, 1] - 1
        cy = self.modes[:, 2] - 1
        comp = self.modes[:, 3]
        same = (comp[:, None] == comp[None, :]).astype(np.float64)
        Vt = V[0][np.ix_(a, a)]
        Vx = V[1][np.ix_(bx, bx)]
        Vy = V[2][np.ix_(cy, cy)]
        Dt = D[0][np.ix_(a, a)]
        Dx = D[1][np.ix_(bx, bx)]
        Dy = D[2][np.ix_(cy, cy)]
        g_l2 = same * (Vt * Vx * Vy)
        g_h1 = same * (Vt * Vx * Vy + Dt * Vx * Vy + Vt * Dx * Vy + Vt * Vx * Dy)
        for M, name in ((g_l2, "gram_l2"), (g_h1, "gram_h1")):
            M = np.ascontiguousarray(M)
            M.setflags(write=False)
            object.__setattr__(self, name, M)
        psi_l2 = np.sqrt(np.diag(self.gram_l2))
        psi_h1 = np.sqrt(np.diag(self.gram_h1))
        psi_l2.setflags(write=False)
        psi_h1.setflags(write=False)
        object.__setattr__(self, "psi_l2", psi_l2)
        object.__setattr__(self, "psi_h1", psi_h1)

    # -- derived scales ---------------------------------------------------

    @property
    def truncation_bound(self) -> float:
        """sum_j b_j ||psi_j||_H1, the finite H1 mass of the expansion."""
        return float(np.dot(self.amplitudes, self.psi_h1))

    @property
    def radius(self) -> float:
        """sum_j b_j ||psi_j||_L2(Q): almost-sure L2 bound on one kick."""
        return float(np.dot(self.amplitudes, self.psi_l2))


@dataclass(frozen=True)
class KickRealization:
    """Coefficient vector of one kick; sampled vectors satisfy |xi|<=1."""

    xi: np.ndarray

    def __post_init__(self):
        xi = np.asarray(self.xi, dtype=np.float64).copy()
        if xi.ndim != 1 or not np.all(np.isfinite(xi)):
            raise NoiseModelError("kick coefficients must be a finite vector")
        xi.setflags(write=False)
        object.__setattr__(self, "xi", xi)


def power_law_amplitudes(n_modes: int, scale: float = 0.1, power: float = 2.0) -> np.ndarray:
    """Default amplitude profile b_j = scale * j^-power."""
    j = np.arange(1, n_modes + 1, dtype=np.float64)
    return scale * j ** (-power)


def build_model(window=(0.25, 0.75, 0.25, 0.5, 0.25, 0.5), n_modes: int = 16,
                amplitudes: Optional[Sequence[float]] = None, density_exponent: int = 2,
                cutoff_sharpness: float = 1.0, quad_cells: int = 64) -> NoiseModel:
    """Construct a validated NoiseModel; defaults follow the package baseline."""
    if amplitudes is None:
        amplitudes = power_law_amplitudes(n_modes)
    return NoiseModel(tuple(window), n_modes, np.asarray(amplitudes, dtype=np.float64),
                      density_exponent, cutoff_sharpness, quad_cells)


# ---------------------------------------------------------------------------
# coefficient density rho(x) ~ (1 - x^2)^p on [-1, 1]


def _cdf_raw(x: np.ndarray, p: int) -> np.ndarray:
    out = np.zeros_like(np.asarray(x, dtype=np.float64))
    for k in range(p + 1):
        out = out + comb(p, k) * (-1.0) ** k * np.asarray(x) ** (2 * k + 1) / (2 * k + 1)
    return out


def coefficient_density(x, p: int = 2):
    x = np.asarray(x, dtype=np.float64)
    c = 1.0 / (2.0 * _cdf_raw(np.array(1.0), p))
    val = c * np.where(np.abs(x) <= 1.0, (1.0 - x ** 2) ** p, 0.0)
    return val


def coefficient_cdf(x, p: int = 2):
    x = np.clip(np.asarray(x, dtype=np.float64), -1.0, 1.0)
    top = _cdf_raw(np.array(1.0), p)
    return (_cdf_raw(x, p) + top) / (2.0 * top)


def coefficient_quantile(u, p: int = 2, tol: float = 1e-12) -> np.ndarray:
    """Inverse CDF by bisection to absolute tolerance tol."""
    u = np.asarray(u, dtype=np.float64)
    lo = np.full_like(u, -1.0)
    hi = np.full_like(u, 1.0)
    # 2 / 2^k < tol  =>  k > log2(2/tol)
    iters = int(np.ceil(np.log2(2.0 / tol))) + 2
    for _ in range(iters):
        mid = 0.5 * (lo + hi)
        below = coefficient_cdf(mid, p) < u
        lo = np.where(below, mid, lo)
        hi = np.where(below, hi, mid)
    return 0.5 * (lo + hi)


def sample_kick(m: NoiseModel, rng: np.random.Generator) -> KickRealization:
    """One kick: i.i.d. coefficients by inverse-CDF from the given stream.

    Coefficients are drawn in mode order, so (stream, mode index) fully
    determines each value.
    """
    u = rng.random(m.n_modes)
    return KickRealization(coefficient_quantile(u, m.density_exponent))


def sample_kick_batch(m: NoiseModel, rngs: Sequence[np.random.Generator]) -> np.ndarray:
    """(k, J) coefficient rows, one independent stream per row."""
    u = np.stack([rng.random(m.n_modes) for rng in rngs])
    return coefficient_quantile(u, m.density_exponent)


# ---------------------------------------------------------------------------
# evaluation on a staggered grid


class KickForcingEvaluator:
    """Precomputed per-mode face arrays for fast forcing evaluation.

    Spatial factors are evaluated once per (model, domain); per time the
    forcing is a small weighted sum over modes restricted to the window's
    bounding box of faces.
    """

    def __init__(self, m: NoiseModel, domain):
        self.model = m
        self.domain = domain
        d = domain
        t0, t1, x0, x1, y0, y1 = m.window
        self.t0, self.t1 = t0, t1
        xu = np.arange(d.nx + 1) * d.dx
        yu = (np.arange(d.ny) + 0.5) * d.dy
        xv = (np.arange(d.nx) + 0.5) * d.dx
        yv = np.arange(d.ny + 1) * d.dy
        self.u_cols = np.where((xu > x0) & (xu < x1))[0]
        self.u_rows = np.where((yu > y0) & (yu < y1))[0]
        self.v_cols = np.where((xv > x0) & (xv < x1))[0]
        self.v_rows = np.where((yv > y0) & (yv < y1))[0]

        def spatial(pts_x, pts_y, b_freq, c_freq):
            sx = (2.0 * pts_x - (x0 + x1)) / (x1 - x0)
            sy = (2.0 * pts_y - (y0 + y1)) / (y1 - y0)
            fx = np.sqrt(2.0 / (x1 - x0)) * np.sin(b_freq * np.pi * (pts_x - x0) / (x1 - x0))
            fy = np.sqrt(2.0 / (y1 - y0)) * np.sin(c_freq * np.pi * (pts_y - y0) / (y1 - y0))
            gx = _bump(sx, m.cutoff_sharpness) * fx
            gy = _bump(sy, m.cutoff_sharpness) * fy
            return np.outer(gy, gx)

        su, sv = [], []
        for j in range(m.n_modes):
            a, b, c, comp = m.modes[j]
            if comp == 0:
                su.append(spatial(xu[self.u_cols], yu[self.u_rows], b, c))
                sv.append(None)
            else:
                su.append(None)
                sv.append(spatial(xv[self.v_cols], yv[self.v_rows], b, c))
        self.u_modes = np.stack([s for s in su if s is not None]) if any(s is not None for s in su) else None
        self.v_modes = np.stack([s for s in sv if s is not None]) if any(s is not None for s in sv) else None
        self.u_mode_ids = np.array([j for j in range(m.n_modes) if m.modes[j, 3] == 0])
        self.v_mode_ids = np.array([j for j in range(m.n_modes) if m.modes[j, 3] == 1])

    def temporal(self, t: float) -> np.ndarray:
        """(J,) time factors; exactly zero outside the open time window."""
        m = self.model
        if not (self.t0 < t < self.t1):
            return np.zeros(m.n_modes)
        L = self.t1 - self.t0
        s = (2.0 * t - (self.t0 + self.t1)) / L
        chi = float(_bump(np.array(s), m.cutoff_sharpness))
        a = m.modes[:, 0].astype(np.float64)
        return chi * np.sqrt(2.0 / L) * np.sin(a * np.pi * (t - self.t0) / L)

    def add_forcing(self, coeffs: np.ndarray, t: float, fu: np.ndarray, fv: np.ndarray):
        """Accumulate forcing for coefficient rows (k, J) into face arrays.

        fu, fv carry a leading batch axis matching coeffs.
        """
        g = self.temporal(t)
        if not np.any(g):
            return
        w = coeffs * (self.model.amplitudes * g)[None, :]
        if self.u_modes is not None and self.u_rows.size and self.u_cols.size:
            wu = w[:, self.u_mode_ids]
            fu[np.ix_(np.arange(fu.shape[0]), self.u_rows, self.u_cols)] += np.einsum(
                "kj,jrc->krc", wu, self.u_modes)
        if self.v_modes is not None and self.v_rows.size and self.v_cols.size:
            wv = w[:, self.v_mode_ids]
            fv[np.ix_(np.arange(fv.shape[0]), self.v_rows, self.v_cols)] += np.einsum(
                "kj,jrc->krc", wv, self.v_modes)


def eval_kick(m: NoiseModel, kick: KickRealization, t: float, domain):
    """Body-force field of one kick at time t, exactly zero off the window."""
    from .grid_field import VelocityField

    if kick.xi.shape != (m.n_modes,):
        raise NoiseModelError("kick coefficient count does not match the model")
    ev = KickForcingEvaluator(m, domain)
    fu = np.zeros((1,) + domain.u_shape)
    fv = np.zeros((1,) + domain.v_shape)
    ev.add_forcing(kick.xi[None, :], t, fu, fv)
    return VelocityField(domain, fu[0], fv[0])


# ---------------------------------------------------------------------------
# kick geometry helpers


def kick_l2_distance(m: NoiseModel, xi_a: np.ndarray, xi_b: np.ndarray) -> float:
    """L2(Q) distance between two kicks given by coefficient vectors."""
    c = m.amplitudes * (np.asarray(xi_a) - np.asarray(xi_b))
    return float(np.sqrt(max(c @ (m.gram_l2 @ c), 0.0)))


def kick_h1_norm(m: NoiseModel, xi: np.ndarray) -> float:
    c = m.amplitudes * np.asarray(xi)
    return float(np.sqrt(max(c @ (m.gram_h1 @ c), 0.0)))


def kick_radius(m: NoiseModel) -> float:
    """Almost-sure L2(Q) bound on a single sampled kick."""
    return m.radius


def kick_ball_probability(m: NoiseModel, targets: np.ndarray, radius: float,
                          n_mc: int, rng: np.random.Generator):
    """Monte-Carlo estimate of P(all M kicks land within radius of targets).

    targets: (M, J) coefficient rows.  Returns (p_hat, (lo, hi)) with a
    Wilson 95% interval.  The product structure over the M slots makes
    the truth the product of single-kick probabilities.
    """
    targets = np.atleast_2d(np.asarray(targets, dtype=np.float64))
    M = targets.shape[0]
    if targets.shape[1] != m.n_modes:
        raise NoiseModelError("target coefficient count does not match the model")
    if radius <= 0.0:
        raise NoiseModelError("ball radius must be positive")
    u = rng.random((n_mc, M, m.n_modes))
    xi = coefficient_quantile(u, m.density_exponent)
    diff = (xi - targets[None, :, :]) * m.amplitudes[None, None, :]
    d2 = np.einsum("nmj,jk,nmk->nm", diff, m.gram_l2, diff)
    hits = np.all(d2 <= radius * radius, axis=1)
    k = int(np.sum(hits))
    return k / n_mc, wilson_interval(k, n_mc)
