"""Staggered-grid velocity fields on the unit square.

Velocity components live on cell faces (u on vertical faces, v on
horizontal faces), pressure-like scalars on cell centers.  With this
layout the discrete divergence of a discrete gradient is exactly the
five-point Laplacian, so the projection step can zero the divergence to
solver precision.  No-slip walls: normal face values are identically
zero and tangential ghosts reflect with a sign flip.
"""

from dataclasses import dataclass, field
from typing import Tuple

import numpy as np
import scipy.sparse as sp
from scipy.sparse.linalg import splu

from .errors import EigenSolverError, FieldFormatError, GeometryError, SolverError
from .streams import TAG_EIGEN, substream

__all__ = [
    "DomainSpec",
    "VelocityField",
    "StokesBasis",
    "divergence",
    "relative_divergence",
    "field_norms",
    "inner",
    "leray_project",
    "stokes_basis",
    "random_solenoidal_field",
    "save_field",
    "load_field",
    "MAX_STOKES_MODES",
]

MAX_STOKES_MODES = 64

_SNAPSHOT_MAGIC = b"KFLD"
_SNAPSHOT_VERSION = 1


@dataclass(frozen=True)
class DomainSpec:
    """Unit-square domain resolved by nx-by-ny cells with viscosity nu."""

    nx: int
    ny: int
    viscosity: float

    def __post_init__(self):
        if self.nx < 8 or self.ny < 8:
            raise GeometryError(f"grid must be at least 8x8, got {self.nx}x{self.ny}")
        if not (self.viscosity > 0.0 and np.isfinite(self.viscosity)):
            raise GeometryError(f"viscosity must be positive, got {self.viscosity}")

    @property
    def dx(self) -> float:
        return 1.0 / self.nx

    @property
    def dy(self) -> float:
        return 1.0 / self.ny

    @property
    def u_shape(self) -> Tuple[int, int]:
        return (self.ny, self.nx + 1)

    @property
    def v_shape(self) -> Tuple[int, int]:
        return (self.ny + 1, self.nx)

    @property
    def p_shape(self) -> Tuple[int, int]:
        return (self.ny, self.nx)


def _freeze(a: np.ndarray) -> np.ndarray:
    out = np.array(a, dtype=np.float64, order="C", copy=True)
    out.setflags(write=False)
    return out


@dataclass(frozen=True)
class VelocityField:
    """Immutable face-centered velocity pair on a DomainSpec.

    Normal components on the walls are exactly zero; all values finite.
    """

    domain: DomainSpec
    u: np.ndarray = field(repr=False)
    v: np.ndarray = field(repr=False)

    def __post_init__(self):
        d = self.domain
        u = np.asarray(self.u, dtype=np.float64)
        v = np.asarray(self.v, dtype=np.float64)
        if u.shape != d.u_shape or v.shape != d.v_shape:
            raise FieldFormatError(
                f"face array shapes {u.shape}/{v.shape} do not match domain "
                f"{d.u_shape}/{d.v_shape}"
            )
        if not (np.all(np.isfinite(u)) and np.all(np.isfinite(v))):
            raise FieldFormatError("field contains non-finite values")
        scale = max(np.max(np.abs(u)), np.max(np.abs(v)), 1.0)
        if max(np.max(np.abs(u[:, 0])), np.max(np.abs(u[:, -1])),
               np.max(np.abs(v[0, :])), np.max(np.abs(v[-1, :]))) > 1e-14 * scale:
            raise FieldFormatError("normal velocity on the boundary must vanish")
        object.__setattr__(self, "u", _freeze(u))
        object.__setattr__(self, "v", _freeze(v))

    @classmethod
    def zero(cls, domain: DomainSpec) -> "VelocityField":
        return cls(domain, np.zeros(domain.u_shape), np.zeros(domain.v_shape))

    @classmethod
    def from_faces(cls, domain: DomainSpec, u, v) -> "VelocityField":
        return cls(domain, u, v)

    def __add__(self, other: "VelocityField") -> "VelocityField":
        _check_same_domain(self, other)
        return VelocityField(self.domain, self.u + other.u, self.v + other.v)

    def __sub__(self, other: "VelocityField") -> "VelocityField":
        _check_same_domain(self, other)
        return VelocityField(self.domain, self.u - other.u, self.v - other.v)

    def __mul__(self, c: float) -> "VelocityField":
        return VelocityField(self.domain, c * self.u, c * self.v)

    __rmul__ = __mul__


def _check_same_domain(a: VelocityField, b: VelocityField):
    if a.domain != b.domain:
        raise GeometryError("fields live on different domains")


# ---------------------------------------------------------------------------
# discrete operators, cached per grid size


class _Workspace:
    """Sparse operators and factorizations for one grid size."""

    def __init__(self, d: DomainSpec):
        self.nx, self.ny = d.nx, d.ny
        self.dx, self.dy = d.dx, d.dy
        self.lap_u = _laplacian_interior(d.ny, d.nx - 1, d.dx, d.dy, ghost_axis="y")
        self.lap_v = _laplacian_interior(d.ny - 1, d.nx, d.dx, d.dy, ghost_axis="x")
        self.poisson = _pressure_poisson(d.nx, d.ny, d.dx, d.dy)
        self.poisson_lu = splu(self.poisson.tocsc())


def _laplacian_interior(nrow: int, ncol: int, dx: float, dy: float, ghost_axis: str) -> sp.csr_matrix:
    """Negative of the five-point Laplacian on an interior face block.

    Along the wall-parallel axis the ghost value reflects with a sign
    flip (no-slip), which adds one inverse-square to the diagonal; along
    the wall-normal axis the first dropped neighbor is a zero Dirichlet
    value.  Returns the positive-definite matrix -Lap.
    """
    n = nrow * ncol
    ix2, iy2 = 1.0 / dx ** 2, 1.0 / dy ** 2
    main = np.full(n, 2.0 * ix2 + 2.0 * iy2)
    idx = np.arange(n).reshape(nrow, ncol)
    rows, cols, vals = [], [], []
    # horizontal neighbors
    r = idx[:, :-1].ravel()
    c = idx[:, 1:].ravel()
    rows += [r, c]
    cols += [c, r]
    vals += [np.full(r.size, -ix2), np.full(r.size, -ix2)]
    # vertical neighbors
    r = idx[:-1, :].ravel()
    c = idx[1:, :].ravel()
    rows += [r, c]
    cols += [c, r]
    vals += [np.full(r.size, -iy2), np.full(r.size, -iy2)]
    diag_extra = np.zeros(n)
    if ghost_axis == "y":
        # walls above and below: ghost = -value doubles the wall-side term
        diag_extra[idx[0, :]] += iy2
        diag_extra[idx[-1, :]] += iy2
    else:
        diag_extra[idx[:, 0]] += ix2
        diag_extra[idx[:, -1]] += ix2
    rows.append(np.arange(n))
    cols.append(np.arange(n))
    vals.append(main + diag_extra)
    A = sp.coo_matrix((np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))), shape=(n, n))
    return A.tocsr()


def _pressure_poisson(nx: int, ny: int, dx: float, dy: float) -> sp.csr_matrix:
    """Cell-centered Neumann Laplacian with cell (0,0) pinned to zero."""
    n = nx * ny
    ix2, iy2 = 1.0 / dx ** 2, 1.0 / dy ** 2
    idx = np.arange(n).reshape(ny, nx)
    rows, cols, vals = [], [], []
    diag = np.zeros(n)
    r = idx[:, :-1].ravel(); c = idx[:, 1:].ravel()
    rows += [r, c]; cols += [c, r]
    vals += [np.full(r.size, -ix2)] * 2
    np.add.at(diag, r, ix2); np.add.at(diag, c, ix2)
    r = idx[:-1, :].ravel(); c = idx[1:, :].ravel()
    rows += [r, c]; cols += [c, r]
    vals += [np.full(r.size, -iy2)] * 2
    np.add.at(diag, r, iy2); np.add.at(diag, c, iy2)
    rows.append(np.arange(n)); cols.append(np.arange(n)); vals.append(diag)
    A = sp.coo_matrix((np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
                      shape=(n, n)).tolil()
    A.rows[0] = [0]
    A.data[0] = [1.0]
    return A.tocsr()


_WORKSPACES: dict = {}


def _workspace(d: DomainSpec) -> _Workspace:
    key = (d.nx, d.ny)
    ws = _WORKSPACES.get(key)
    if ws is None:
        ws = _Workspace(d)
        _WORKSPACES[key] = ws
    return ws


# ---------------------------------------------------------------------------
# core operations


def divergence(f: VelocityField) -> np.ndarray:
    """Per-cell flux balance (u_x + v_y) on the MAC stencil."""
    d = f.domain
    return (f.u[:, 1:] - f.u[:, :-1]) / d.dx + (f.v[1:, :] - f.v[:-1, :]) / d.dy


def relative_divergence(f: VelocityField) -> float:
    """Max per-cell divergence relative to the field's own gradient scale."""
    d = f.domain
    scale = max(np.max(np.abs(f.u)), np.max(np.abs(f.v)))
    if scale == 0.0:
        return 0.0
    return float(np.max(np.abs(divergence(f))) * min(d.dx, d.dy) / scale)


def inner(f: VelocityField, g: VelocityField) -> float:
    """Midpoint-quadrature L2 inner product of two fields."""
    _check_same_domain(f, g)
    d = f.domain
    return float((np.vdot(f.u, g.u) + np.vdot(f.v, g.v)) * d.dx * d.dy)


def field_norms(f: VelocityField) -> Tuple[float, float]:
    """Return (L2 norm, H1 seminorm).

    The seminorm is the square root of the discrete Dirichlet form of the
    no-slip Laplacian, so <L e, e> = nu * |e|_H1^2 holds exactly for the
    operator used everywhere else in the package.
    """
    d = f.domain
    ws = _workspace(d)
    l2 = np.sqrt(max(inner(f, f), 0.0))
    ui = f.u[:, 1:-1].ravel()
    vi = f.v[1:-1, :].ravel()
    h1sq = (ui @ (ws.lap_u @ ui) + vi @ (ws.lap_v @ vi)) * d.dx * d.dy
    return float(l2), float(np.sqrt(max(h1sq, 0.0)))


def _solve_columns(lu, rhs: np.ndarray) -> np.ndarray:
    """Multi-column sparse LU solve whose per-column bits do not depend on
    the column count.

    SuperLU walks the right-hand sides in panels of four columns and uses a
    different kernel, with different rounding, for a partial tail panel.
    Padding the column count to a multiple of four keeps every column inside
    a full panel, so a member of an ensemble gets bitwise the same result
    whatever the batch width or its position in the batch.
    """
    k = rhs.shape[1]
    rem = k % 4
    if rem == 0:
        return lu.solve(rhs)
    padded = np.zeros((rhs.shape[0], k + 4 - rem))
    padded[:, :k] = rhs
    return lu.solve(padded)[:, :k]


def _project_arrays(d: DomainSpec, u: np.ndarray, v: np.ndarray, ws: _Workspace,
                    tol: float = 1e-12):
    """Remove the discrete gradient part from stacked face arrays.

    Accepts arrays with an optional leading batch axis and returns the
    corrected pair.  Raises SolverError if the pressure solve misses its
    relative residual tolerance.
    """
    batched = u.ndim == 3
    if not batched:
        u = u[None]
        v = v[None]
    k = u.shape[0]
    # solve (-Lap) phi = -div so that div(u - grad phi) vanishes
    div = (u[:, :, 1:] - u[:, :, :-1]) / d.dx + (v[:, 1:, :] - v[:, :-1, :]) / d.dy
    rhs = -div.reshape(k, -1).T.copy()
    rhs[0, :] = 0.0  # pinned cell
    phi = _solve_columns(ws.poisson_lu, rhs)
    res = ws.poisson @ phi - rhs
    rhs_scale = np.max(np.abs(rhs)) if rhs.size else 0.0
    if rhs_scale > 0 and np.max(np.abs(res)) > max(tol, 1e-13) * rhs_scale * 1e3:
        raise SolverError("pressure solve residual exceeded tolerance")
    phi = phi.T.reshape(k, d.ny, d.nx)
    un = u.copy()
    vn = v.copy()
    un[:, :, 1:-1] -= (phi[:, :, 1:] - phi[:, :, :-1]) / d.dx
    vn[:, 1:-1, :] -= (phi[:, 1:, :] - phi[:, :-1, :]) / d.dy
    if batched:
        return un, vn
    return un[0], vn[0]


def leray_project(f: VelocityField) -> VelocityField:
    """L2-orthogonal projection onto discretely divergence-free fields."""
    d = f.domain
    un, vn = _project_arrays(d, f.u, f.v, _workspace(d))
    return VelocityField(d, un, vn)


def random_solenoidal_field(d: DomainSpec, norm: float, rng: np.random.Generator) -> VelocityField:
    """Random divergence-free field rescaled to the requested L2 norm."""
    u = rng.standard_normal(d.u_shape)
    v = rng.standard_normal(d.v_shape)
    u[:, 0] = u[:, -1] = 0.0
    v[0, :] = v[-1, :] = 0.0
    f = leray_project(VelocityField(d, u, v))
    l2, _ = field_norms(f)
    if l2 == 0.0:
        raise SolverError("degenerate random field draw")
    return f * (norm / l2)


# ---------------------------------------------------------------------------
# Stokes eigenbasis


@dataclass(frozen=True)
class StokesBasis:
    """Leading eigenpairs of the projected no-slip diffusion operator."""

    domain: DomainSpec
    eigenvalues: np.ndarray
    modes: Tuple[VelocityField, ...]

    def __post_init__(self):
        ev = _freeze(np.asarray(self.eigenvalues, dtype=np.float64))
        object.__setattr__(self, "eigenvalues", ev)
        if ev.ndim != 1 or len(self.modes) != ev.size:
            raise EigenSolverError("eigenvalue/mode count mismatch")
        if not np.all(np.diff(ev) >= -1e-12 * max(1.0, abs(ev[-1]))):
            raise EigenSolverError("eigenvalues must be sorted ascending")
        if ev[0] <= 0.0:
            raise EigenSolverError("smallest eigenvalue must be positive")

    @property
    def n_modes(self) -> int:
        return int(self.eigenvalues.size)

    def coefficients(self, f: VelocityField) -> np.ndarray:
        """Projections of f onto the basis modes."""
        return np.array([inner(f, e) for e in self.modes])


def _curl_matrix(d: DomainSpec) -> sp.csr_matrix:
    """Sparse map from interior stream nodes to stacked interior faces.

    Its range is exactly the discretely divergence-free subspace with
    vanishing normal boundary values.
    """
    nx, ny = d.nx, d.ny
    npsi = (nx - 1) * (ny - 1)
    psi_idx = np.arange(npsi).reshape(ny - 1, nx - 1)

    def node(j, i):
        # full node grid (ny+1, nx+1), zero on the boundary ring
        inside = (0 < j) & (j < ny) & (0 < i) & (i < nx)
        jj = np.clip(j - 1, 0, ny - 2)
        ii = np.clip(i - 1, 0, nx - 2)
        return np.where(inside, psi_idx[jj, ii], -1), inside

    rows, cols, vals = [], [], []
    # u faces, interior columns i=1..nx-1, rows j=0..ny-1
    n_u = ny * (nx - 1)
    u_idx = np.arange(n_u).reshape(ny, nx - 1)
    jj, ii = np.meshgrid(np.arange(ny), np.arange(1, nx), indexing="ij")
    for dj, s in ((1, 1.0 / d.dy), (0, -1.0 / d.dy)):
        pid, ok = node(jj + dj, ii)
        rows.append(u_idx[jj, ii - 1][ok])
        cols.append(pid[ok])
        vals.append(np.full(int(ok.sum()), s))
    # v faces, interior rows j=1..ny-1, cols i=0..nx-1
    n_v = (ny - 1) * nx
    v_idx = np.arange(n_v).reshape(ny - 1, nx) + n_u
    jj, ii = np.meshgrid(np.arange(1, ny), np.arange(nx), indexing="ij")
    for di, s in ((1, -1.0 / d.dx), (0, 1.0 / d.dx)):
        pid, ok = node(jj, ii + di)
        rows.append(v_idx[jj - 1, ii][ok])
        cols.append(pid[ok])
        vals.append(np.full(int(ok.sum()), s))
    return sp.coo_matrix(
        (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
        shape=(n_u + n_v, npsi),
    ).tocsr()


def stokes_stiffness(d: DomainSpec):
    """(A, M) of the generalized eigenproblem in stream-node coordinates."""
    ws = _workspace(d)
    C = _curl_matrix(d)
    scale = d.dx * d.dy
    Avec = sp.block_diag([ws.lap_u, ws.lap_v], format="csr")
    A = (C.T @ (Avec @ C)) * (d.viscosity * scale)
    M = (C.T @ C) * scale
    return A.tocsc(), M.tocsr(), C


def _field_from_interior(d: DomainSpec, w: np.ndarray) -> VelocityField:
    n_u = d.ny * (d.nx - 1)
    u = np.zeros(d.u_shape)
    v = np.zeros(d.v_shape)
    u[:, 1:-1] = w[:n_u].reshape(d.ny, d.nx - 1)
    v[1:-1, :] = w[n_u:].reshape(d.ny - 1, d.nx)
    return VelocityField(d, u, v)


def stokes_basis(d: DomainSpec, n_modes: int, seed: int = 0,
                 tol: float = 1e-11, max_iter: int = 400) -> StokesBasis:
    """Leading Stokes eigenpairs by inverse subspace iteration.

    Works in stream-node coordinates where the divergence-free constraint
    is built into the parametrization, then lifts eigenvectors back to
    face arrays.  The iteration is seeded deterministically.
    """
    dim = (d.nx - 1) * (d.ny - 1)
    if not (1 <= n_modes <= min(MAX_STOKES_MODES, dim)):
        raise EigenSolverError(
            f"mode count must lie in [1, {min(MAX_STOKES_MODES, dim)}], got {n_modes}"
        )
    A, M, C = stokes_stiffness(d)
    lu = splu(A)
    guard = min(dim, max(2 * n_modes, n_modes + 4))
    rng = substream(seed, TAG_EIGEN, d.nx, d.ny)
    X = rng.standard_normal((dim, guard))
    theta = None
    for _ in range(max_iter):
        Y = lu.solve(M @ X)
        # M-orthonormalize
        G = Y.T @ (M @ Y)
        L = np.linalg.cholesky((G + G.T) / 2.0)
        Y = np.linalg.solve(L, Y.T).T
        H = Y.T @ (A @ Y)
        theta, W = np.linalg.eigh((H + H.T) / 2.0)
        X = Y @ W
        R = A @ X[:, :n_modes] - (M @ X[:, :n_modes]) * theta[:n_modes]
        rel = np.linalg.norm(R, axis=0) / np.maximum(theta[:n_modes], 1e-300)
        if np.max(rel) < tol:
            break
    else:
        raise EigenSolverError("stokes eigeniteration did not converge")
    lam = theta[:n_modes]
    modes = []
    for j in range(n_modes):
        f = _field_from_interior(d, C @ X[:, j])
        # fix an arbitrary sign for reproducibility
        w = np.concatenate([f.u.ravel(), f.v.ravel()])
        nz = w[np.argmax(np.abs(w) > 1e-12 * np.max(np.abs(w)))]
        if nz < 0:
            f = f * -1.0
        modes.append(f)
    basis = StokesBasis(d, lam, tuple(modes))
    _validate_stokes(d, basis)
    return basis


def _validate_stokes(d: DomainSpec, basis: StokesBasis):
    ws = _workspace(d)
    for j, e in enumerate(basis.modes):
        lam = basis.eigenvalues[j]
        ui = e.u[:, 1:-1].ravel()
        vi = e.v[1:-1, :].ravel()
        lap_u = np.zeros(d.u_shape)
        lap_v = np.zeros(d.v_shape)
        lap_u[:, 1:-1] = (ws.lap_u @ ui).reshape(d.ny, d.nx - 1)
        lap_v[1:-1, :] = (ws.lap_v @ vi).reshape(d.ny - 1, d.nx)
        Lu, Lv = _project_arrays(d, d.viscosity * lap_u, d.viscosity * lap_v, ws)
        res = np.sqrt((np.sum((Lu - lam * e.u) ** 2) + np.sum((Lv - lam * e.v) ** 2)) * d.dx * d.dy)
        if res > 1e-8:
            raise EigenSolverError(f"eigenpair {j} residual {res:.3e} exceeds 1e-8")
    for i in range(basis.n_modes):
        for j in range(i, basis.n_modes):
            g = inner(basis.modes[i], basis.modes[j])
            if abs(g - (1.0 if i == j else 0.0)) > 1e-10:
                raise EigenSolverError("stokes modes are not orthonormal to 1e-10")


# ---------------------------------------------------------------------------
# snapshot file format


def save_field(path, f: VelocityField):
    """Write a field snapshot: magic, version, nx, ny, nu, then faces."""
    d = f.domain
    header = np.array([d.nx, d.ny], dtype="<u4")
    with open(path, "wb") as fh:
        fh.write(_SNAPSHOT_MAGIC)
        fh.write(np.array([_SNAPSHOT_VERSION], dtype="<u4").tobytes())
        fh.write(header.tobytes())
        fh.write(np.array([d.viscosity], dtype="<f8").tobytes())
        fh.write(np.ascontiguousarray(f.u, dtype="<f8").tobytes())
        fh.write(np.ascontiguousarray(f.v, dtype="<f8").tobytes())


def load_field(path) -> VelocityField:
    with open(path, "rb") as fh:
        raw = fh.read()
    if raw[:4] != _SNAPSHOT_MAGIC:
        raise FieldFormatError("not a field snapshot (bad magic)")
    ver = int(np.frombuffer(raw, dtype="<u4", count=1, offset=4)[0])
    if ver != _SNAPSHOT_VERSION:
        raise FieldFormatError(f"unsupported snapshot version {ver}")
    nx, ny = (int(x) for x in np.frombuffer(raw, dtype="<u4", count=2, offset=8))
    nu = float(np.frombuffer(raw, dtype="<f8", count=1, offset=16)[0])
    d = DomainSpec(nx, ny, nu)
    n_u = d.u_shape[0] * d.u_shape[1]
    n_v = d.v_shape[0] * d.v_shape[1]
    expected = 24 + 8 * (n_u + n_v)
    if len(raw) != expected:
        raise FieldFormatError(f"snapshot length {len(raw)} != expected {expected}")
    u = np.frombuffer(raw, dtype="<f8", count=n_u, offset=24).reshape(d.u_shape)
    v = np.frombuffer(raw, dtype="<f8", count=n_v, offset=24 + 8 * n_u).reshape(d.v_shape)
    return VelocityField(d, u, v)
