"""The kicked chain, its occupation measures, attainability clouds, and
Monte-Carlo irreducibility diagnostics.

One chain step advances the field through a full forcing period with a
freshly sampled kick.  All randomness is drawn from counter-based streams
keyed by (seed, step, member), so every trajectory and every ensemble is
replayable exactly.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Dict, Optional, Sequence, Tuple

import numpy as np

from .errors import ChainFormatError, ControllabilityError, KickflowError
from .features import FeatureBinning, FeatureMap, SparseHistogram, coverage_fraction, pairwise_sq_dists
from .grid_field import DomainSpec, VelocityField, field_norms, random_solenoidal_field, stokes_basis
from .noise import NoiseModel, coefficient_quantile, sample_kick_batch
from .ns_solver import FieldBatch, SolverConfig, solve_period, solve_period_batch
from .stats import wilson_interval
from .streams import TAG_INIT, TAG_KICK, substream


@dataclass(frozen=True)
class InitialSpec:
    """How to construct the chain's starting state."""

    kind: str = "zero"
    norm: float = 0.0

    def __post_init__(self):
        if self.kind not in ("zero", "random", "mode1"):
            raise ChainFormatError(f"unknown initial state kind {self.kind!r}")
        if self.kind != "zero" and self.norm <= 0:
            raise ChainFormatError("nonzero initial state needs a positive norm")

    def resolve(self, d: DomainSpec, seed: int) -> VelocityField:
        if self.kind == "zero":
            return VelocityField.zero(d)
        if self.kind == "mode1":
            mode = stokes_basis(d, 1).modes[0]
            return mode * self.norm
        return random_solenoidal_field(d, self.norm, substream(seed, TAG_INIT))


@dataclass(frozen=True)
class ChainConfig:
    n: int
    seed: int
    initial: InitialSpec = field(default_factory=InitialSpec)
    n_features: int = 8
    target: Optional[VelocityField] = None  # None means the zero field

    def __post_init__(self):
        if self.n < 1:
            raise ChainFormatError("chain length must be >= 1")
        if self.n_features + 1 < 1:
            raise ChainFormatError("feature dimension must be >= 1")


@dataclass(frozen=True)
class Trajectory:
    """A sample path u_0..u_n with its kick log.

    Full states are kept every `stride` steps (endpoints always included);
    the feature track covers every step.  Kick row k-1 produced state k.
    """

    config: ChainConfig
    domain: DomainSpec
    stride: int
    stored_steps: Tuple[int, ...]
    states: Tuple[VelocityField, ...]
    kicks: np.ndarray
    features: np.ndarray

    @property
    def n(self) -> int:
        return self.kicks.shape[0]

    def state_at(self, step: int) -> VelocityField:
        try:
            return self.states[self.stored_steps.index(step)]
        except ValueError:
            raise ChainFormatError(f"step {step} not stored (stride {self.stride})")

    def replay_deviation(self, m: NoiseModel, scfg: SolverConfig) -> float:
        """Max L2 gap between stored states and a re-run from u_0."""
        u = self.states[0]
        worst = 0.0
        lookup = {s: f for s, f in zip(self.stored_steps, self.states)}
        for k in range(1, self.n + 1):
            u = solve_period(u, self.kicks[k - 1], m, scfg)
            if k in lookup:
                diff = u + lookup[k] * (-1.0)
                worst = max(worst, field_norms(diff)[0])
        return worst


def _chain_rngs(seed: int, step: int, width: int, offset: int = 0):
    return [substream(seed, TAG_KICK, step, offset + i) for i in range(width)]


def run_chain(cfg: ChainConfig, m: NoiseModel, scfg: SolverConfig,
              fm: Optional[FeatureMap] = None,
              stride: Optional[int] = None) -> Trajectory:
    """Sample the n-step chain. Deterministic given cfg.seed."""
    if fm is None:
        raise ChainFormatError("run_chain needs the feature map of the domain")
    d = fm.domain
    u = cfg.initial.resolve(d, cfg.seed)
    if stride is None:
        stride = max(1, cfg.n // 256)
    feats = np.empty((cfg.n + 1, fm.dim))
    feats[0] = fm(u)
    kicks = np.empty((cfg.n, m.n_modes))
    stored = [0]
    states = [u]
    for k in range(1, cfg.n + 1):
        xi = sample_kick_batch(m, _chain_rngs(cfg.seed, k, 1))[0]
        kicks[k - 1] = xi
        try:
            u = solve_period(u, xi, m, scfg)
        except KickflowError as e:
            raise type(e)(f"chain step {k}: {e}") from e
        feats[k] = fm(u)
        if k % stride == 0 or k == cfg.n:
            stored.append(k)
            states.append(u)
    return Trajectory(config=cfg, domain=d, stride=stride,
                      stored_steps=tuple(stored), states=tuple(states),
                      kicks=kicks, features=feats)


def run_ensemble(initial: FieldBatch, n_steps: int, m: NoiseModel, scfg: SolverConfig,
                 seed: int, member_offset: int = 0,
                 record_steps: Sequence[int] = ()) -> Tuple[FieldBatch, Dict[int, np.ndarray]]:
    """Propagate a batch of states n_steps periods with independent kicks.

    Member j of the batch consumes the stream (seed, step, member_offset+j),
    so ensembles chunked across calls reproduce a single wide run.
    Returns the final batch and L2-weighted flat snapshots at the requested
    steps (step 0 allowed).
    """
    records: Dict[int, np.ndarray] = {}
    want = set(record_steps)
    if 0 in want:
        records[0] = initial.flat()
    batch = initial
    for k in range(1, n_steps + 1):
        rngs = _chain_rngs(seed, k, batch.size, member_offset)
        coeffs = sample_kick_batch(m, rngs)
        try:
            batch = solve_period_batch(batch, coeffs, m, scfg)
        except KickflowError as e:
            raise type(e)(f"ensemble step {k}: {e}") from e
        if k in want:
            records[k] = batch.flat()
    return batch, records


@dataclass(frozen=True)
class OccupationMeasure:
    """Empirical feature-space law of the first k chain states."""

    count: int
    points: np.ndarray
    histogram: SparseHistogram
    mean: np.ndarray
    second_moment: np.ndarray

    def moment_gap(self) -> float:
        """Deviation between stored running moments and the point cloud."""
        gap1 = np.max(np.abs(self.mean - self.points.mean(axis=0)))
        gap2 = np.max(np.abs(self.second_moment - (self.points ** 2).mean(axis=0)))
        return max(float(gap1), float(gap2))

    def mixed_with(self, other: "OccupationMeasure") -> "OccupationMeasure":
        """Length-weighted mixture, the occupation of the concatenated path."""
        total = self.count + other.count
        a = self.count / total
        b = other.count / total
        return OccupationMeasure(
            count=total,
            points=np.concatenate([self.points, other.points]),
            histogram=self.histogram.mixed_with(other.histogram, self.count, other.count),
            mean=a * self.mean + b * other.mean,
            second_moment=a * self.second_moment + b * other.second_moment,
        )


def default_binning(points: np.ndarray, n_bins: int = 16) -> FeatureBinning:
    """Binning sized to the ball containing the observed energies."""
    energy = float(np.max(points[:, -1])) if points.size else 0.0
    radius = max(math.sqrt(2.0 * max(energy, 0.0)) * 1.05, 1e-9)
    return FeatureBinning.for_ball(points.shape[1], radius, n_bins=n_bins)


def occupation_measure(t: Trajectory, binning: Optional[FeatureBinning] = None) -> OccupationMeasure:
    """Empirical measure of u_0..u_{n-1} in feature space."""
    points = t.features[: t.n]
    return occupation_from_points(points, binning)


def occupation_from_points(points: np.ndarray, binning: Optional[FeatureBinning] = None) -> OccupationMeasure:
    points = np.atleast_2d(points)
    if points.shape[0] < 1:
        raise ChainFormatError("occupation measure needs at least one state")
    if binning is None:
        binning = default_binning(points)
    # running moments accumulated sequentially, kept alongside the cloud
    mean = np.zeros(points.shape[1])
    second = np.zeros(points.shape[1])
    for i, row in enumerate(points, start=1):
        mean += (row - mean) / i
        second += (row * row - second) / i
    return OccupationMeasure(
        count=points.shape[0],
        points=points,
        histogram=SparseHistogram.from_points(binning, points),
        mean=mean,
        second_moment=second,
    )


def check_controllability(v: VelocityField, eps: float, m: NoiseModel, scfg: SolverConfig,
                          kappa_hat: Optional[float] = None, margin: int = 2) -> int:
    """Smallest number of zero-kick periods driving v into the eps-ball
    around the zero target state.

    The decay-rate cap comes from the slowest Stokes mode unless a measured
    contraction factor is supplied.
    """
    if eps <= 0:
        raise ControllabilityError("target tolerance must be positive")
    norm = field_norms(v)[0]
    if norm <= eps:
        return 0
    if kappa_hat is None:
        d = v.domain
        kappa_hat = math.exp(-stokes_basis(d, 1).eigenvalues[0])
    if not (0 < kappa_hat < 1):
        raise ControllabilityError(f"contraction factor {kappa_hat} outside (0,1)")
    cap = math.ceil(math.log(eps / norm) / math.log(kappa_hat)) + margin
    u = v
    trace = [norm]
    for ell in range(1, cap + 1):
        u = solve_period(u, None, m, scfg)
        trace.append(field_norms(u)[0])
        if trace[-1] <= eps:
            return ell
    raise ControllabilityError(
        f"no decay to {eps:g} within {cap} unforced periods; norms {np.array2string(np.array(trace), precision=3)}")


@dataclass(frozen=True)
class AttainabilityCloud:
    """States reachable from the zero target in at most `depth` kicks.

    Clouds are cumulative: every point carries the depth at which it first
    appeared, and the depth-k restriction is a prefix of the arrays, which
    makes the nesting across depths exact by construction.
    """

    domain: DomainSpec
    depth: int
    u: np.ndarray
    v: np.ndarray
    features: np.ndarray
    depths: np.ndarray

    @property
    def size(self) -> int:
        return self.u.shape[0]

    def batch(self) -> FieldBatch:
        return FieldBatch(self.domain, self.u, self.v)

    def flat(self) -> np.ndarray:
        return self.batch().flat()

    def state(self, i: int) -> VelocityField:
        return VelocityField.from_faces(self.domain, self.u[i], self.v[i])

    def restricted(self, depth: int) -> "AttainabilityCloud":
        if depth > self.depth:
            raise ChainFormatError(f"cloud only reaches depth {self.depth}")
        mask = self.depths <= depth
        return AttainabilityCloud(self.domain, depth, self.u[mask], self.v[mask],
                                  self.features[mask], self.depths[mask])

    def diameter(self) -> float:
        sq = pairwise_sq_dists(self.flat(), self.flat())
        return float(np.sqrt(sq.max()))


def _stratified_controls(m: NoiseModel, budget: int, rng: np.random.Generator) -> np.ndarray:
    """Kick coefficients covering the control set: the zero kick, cube
    corners, and interior draws."""
    J = m.n_modes
    rows = [np.zeros(J)]
    n_corner = max(budget // 4, 1)
    for _ in range(n_corner):
        rows.append(rng.integers(0, 2, size=J) * 2.0 - 1.0)
    while len(rows) < budget:
        rows.append(coefficient_quantile(rng.random(J), p=m.density_exponent))
    return np.stack(rows[:budget])


def attainability_sample(depth: int, n_samples: int, m: NoiseModel, d: DomainSpec,
                         scfg: SolverConfig, seed: int,
                         fm: Optional[FeatureMap] = None) -> AttainabilityCloud:
    """Grow the attainability cloud from the zero state by sampled controls."""
    if depth < 0:
        raise ChainFormatError("cloud depth must be >= 0")
    if fm is None:
        fm = FeatureMap.build(d)
    zero = VelocityField.zero(d)
    u_rows = [zero.u[None]]
    v_rows = [zero.v[None]]
    depth_rows = [np.zeros(1, dtype=np.int64)]
    rng = substream(seed, TAG_INIT, depth)
    count = 1
    per_level = max(n_samples // depth, 1) if depth > 0 else 0
    for level in range(1, depth + 1):
        controls = _stratified_controls(m, per_level, rng)
        parents = rng.integers(0, count, size=per_level)
        pu = np.concatenate(u_rows)[parents]
        pv = np.concatenate(v_rows)[parents]
        out = solve_period_batch(FieldBatch(d, pu, pv), controls, m, scfg)
        u_rows.append(out.u)
        v_rows.append(out.v)
        depth_rows.append(np.full(per_level, level, dtype=np.int64))
        count += per_level
    u_all = np.concatenate(u_rows)
    v_all = np.concatenate(v_rows)
    feats = fm.apply_flat(FieldBatch(d, u_all, v_all).flat())
    return AttainabilityCloud(domain=d, depth=depth, u=u_all, v=v_all,
                              features=feats, depths=np.concatenate(depth_rows))


@dataclass(frozen=True)
class IrreducibilityEstimate:
    m_steps: int
    radius: float
    n_mc: int
    hits: int
    p_hat: float
    wilson_low: float
    wilson_high: float


def estimate_irreducibility(m_steps: int, x: VelocityField, a: VelocityField,
                            r: float, n_mc: int, m: NoiseModel, scfg: SolverConfig,
                            seed: int, chunk: int = 256) -> IrreducibilityEstimate:
    """Monte-Carlo frequency of the m-step chain from x landing in the
    L2 ball of radius r around a."""
    if n_mc < 1:
        raise ChainFormatError("need at least one replicate")
    a_flat = FieldBatch.replicate(a, 1).flat()[0]
    hits = 0
    done = 0
    while done < n_mc:
        width = min(chunk, n_mc - done)
        batch = FieldBatch.replicate(x, width)
        final, _ = run_ensemble(batch, m_steps, m, scfg, seed, member_offset=done)
        dists = np.linalg.norm(final.flat() - a_flat, axis=1)
        hits += int(np.count_nonzero(dists <= r))
        done += width
    lo, hi = wilson_interval(hits, n_mc)
    return IrreducibilityEstimate(m_steps=m_steps, radius=r, n_mc=n_mc, hits=hits,
                                  p_hat=hits / n_mc, wilson_low=lo, wilson_high=hi)


@dataclass(frozen=True)
class SupportReport:
    radius: float
    occupation_covered: float
    cloud_covered: float


def stationary_support_check(occupation_points: np.ndarray, cloud: AttainabilityCloud,
                             r: float) -> SupportReport:
    """Two-sided feature-space coverage between a long-run occupation cloud
    and an attainability cloud."""
    occ = np.atleast_2d(occupation_points)
    return SupportReport(
        radius=r,
        occupation_covered=coverage_fraction(occ, cloud.features, r),
        cloud_covered=coverage_fraction(cloud.features, occ, r),
    )


# ---------------------------------------------------------------------------
# trajectory log round-trip

_LOG_MAGIC = "# kicked-chain trajectory log v1"


def write_trajectory_log(t: Trajectory, path: str) -> None:
    J = t.kicks.shape[1]
    D = t.features.shape[1]
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(_LOG_MAGIC + "\n")
        fh.write(f"# n={t.n} stride={t.stride} n_modes={J} feature_dim={D} seed={t.config.seed}\n")
        cols = ["step"] + [f"xi_{j}" for j in range(J)] + [f"f_{j}" for j in range(D)] + ["snapshot"]
        fh.write("\t".join(cols) + "\n")
        for k in range(t.n + 1):
            xi = np.zeros(J) if k == 0 else t.kicks[k - 1]
            snap = str(k) if k in t.stored_steps else "-"
            row = [str(k)] + [format(x, ".17g") for x in xi] \
                + [format(x, ".17g") for x in t.features[k]] + [snap]
            fh.write("\t".join(row) + "\n")


def read_trajectory_log(path: str):
    """Returns (kicks, features, stored_steps, meta dict)."""
    with open(path, "r", encoding="utf-8") as fh:
        lines = [ln.rstrip("\n") for ln in fh]
    if not lines or lines[0] != _LOG_MAGIC:
        raise ChainFormatError(f"{path}: not a trajectory log")
    meta = {}
    for tok in lines[1].lstrip("# ").split():
        key, val = tok.split("=")
        meta[key] = int(val)
    J, D, n = meta["n_modes"], meta["feature_dim"], meta["n"]
    kicks = np.zeros((n, J))
    feats = np.zeros((n + 1, D))
    stored = []
    for ln in lines[3:]:
        parts = ln.split("\t")
        k = int(parts[0])
        vals = np.array([float(x) for x in parts[1:-1]])
        if k > 0:
            kicks[k - 1] = vals[:J]
        feats[k] = vals[J:J + D]
        if parts[-1] != "-":
            stored.append(k)
    return kicks, feats, tuple(stored), meta
