"""Weighted-semigroup estimators: growth rate, rate function, and the
uniform-Feller diagnostic.

Everything here runs against a kernel backend, which is either the kicked
flow chain or the finite oracle chain.  Backends expose batch propagation
with counter-based randomness and the evaluation of potentials and
observables on their states, so each estimator has exactly one
implementation validated against the oracle's dense linear algebra.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Callable, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

from .errors import ChainFormatError, DegeneracyError, KickflowError
from .features import FeatureMap, SparseHistogram
from .grid_field import VelocityField
from .noise import NoiseModel, sample_kick_batch
from .ns_solver import FieldBatch, SolverConfig, solve_period_batch
from .oracle import FiniteChain, exact_fk_apply
from .stats import batch_means_stderr, logmeanexp
from .streams import TAG_CLOUD, TAG_FK, substream


# ---------------------------------------------------------------------------
# potentials on feature space


@dataclass(frozen=True)
class Potential:
    """A potential evaluated on feature vectors (or, for the table kind, on
    finite-chain state indices).

    sup_bound and lipschitz cache the bounds the contraction theory needs;
    they are filled by bounded_over and default to +inf until then.
    """

    kind: str
    linear: Optional[np.ndarray] = None
    quad: Optional[np.ndarray] = None
    offset: float = 0.0
    table: Optional[np.ndarray] = None
    label: str = ""
    sup_bound: float = math.inf
    lipschitz: float = math.inf

    def __post_init__(self):
        if self.kind not in ("affine", "quadratic", "table", "constant"):
            raise ChainFormatError(f"unknown potential kind {self.kind!r}")
        if self.kind in ("affine", "quadratic") and self.linear is None:
            raise ChainFormatError(f"{self.kind} potential needs linear coefficients")
        if self.kind == "quadratic" and self.quad is None:
            raise ChainFormatError("quadratic potential needs quadratic coefficients")
        if self.kind == "table" and self.table is None:
            raise ChainFormatError("table potential needs per-state values")

    @classmethod
    def constant(cls, c: float, label: str = "") -> "Potential":
        return cls(kind="constant", offset=float(c), label=label or f"const({c:g})",
                   sup_bound=abs(float(c)), lipschitz=0.0)

    @classmethod
    def affine(cls, linear, offset: float = 0.0, label: str = "") -> "Potential":
        return cls(kind="affine", linear=np.asarray(linear, dtype=float),
                   offset=float(offset), label=label)

    @classmethod
    def quadratic(cls, quad, linear, offset: float = 0.0, label: str = "") -> "Potential":
        return cls(kind="quadratic", quad=np.asarray(quad, dtype=float),
                   linear=np.asarray(linear, dtype=float), offset=float(offset),
                   label=label)

    @classmethod
    def from_table(cls, table, label: str = "") -> "Potential":
        table = np.asarray(table, dtype=float)
        return cls(kind="table", table=table, label=label,
                   sup_bound=float(np.max(np.abs(table))))

    def evaluate(self, features: np.ndarray) -> np.ndarray:
        x = np.atleast_2d(features)
        if self.kind == "constant":
            return np.full(x.shape[0], self.offset)
        if self.kind == "table":
            raise ChainFormatError("table potentials evaluate on state indices only")
        out = x @ self.linear + self.offset
        if self.kind == "quadratic":
            out = out + (x * x) @ self.quad
        return out

    def gradient(self, features: np.ndarray) -> np.ndarray:
        x = np.atleast_2d(features)
        if self.kind in ("constant", "table"):
            return np.zeros_like(x)
        g = np.broadcast_to(self.linear, x.shape).copy()
        if self.kind == "quadratic":
            g += 2.0 * x * self.quad
        return g

    def bounded_over(self, probes: np.ndarray) -> "Potential":
        """Cache sup |V| and sup |grad V| over a probe point set."""
        vals = self.evaluate(probes)
        grads = self.gradient(probes)
        return replace(self, sup_bound=float(np.max(np.abs(vals))),
                       lipschitz=float(np.max(np.linalg.norm(grads, axis=1))))

    def shifted(self, c: float) -> "Potential":
        sup = self.sup_bound + abs(c) if math.isfinite(self.sup_bound) else math.inf
        if self.kind == "table":
            return replace(self, table=self.table + c, sup_bound=float(np.max(np.abs(self.table + c))),
                           label=f"{self.label}+{c:g}")
        return replace(self, offset=self.offset + c, sup_bound=sup,
                       label=f"{self.label}+{c:g}")


def potential_dictionary(dim: int, scales: Sequence[float] = (0.5, 2.0),
                         energy_scales: Sequence[float] = (4.0,),
                         n_active: Optional[int] = None) -> List[Potential]:
    """Affine plus diagonal-quadratic potentials on a small coefficient grid,
    the default dictionary for the Legendre transform.

    n_active caps how many leading coordinate directions get their own
    potentials; the energy coordinate always participates.
    """
    pots: List[Potential] = [Potential.constant(0.0, label="zero")]
    active = dim - 1 if n_active is None else min(n_active, dim - 1)
    for s in scales:
        for j in range(active):
            e = np.zeros(dim)
            e[j] = s
            pots.append(Potential.affine(e, label=f"lin{j}@{s:g}"))
            pots.append(Potential.affine(-e, label=f"lin{j}@-{s:g}"))
    for s in energy_scales:
        e = np.zeros(dim)
        e[-1] = s
        pots.append(Potential.affine(e, label=f"energy@{s:g}"))
        pots.append(Potential.affine(-e, label=f"energy@-{s:g}"))
        q = np.full(dim, s * 0.5)
        q[-1] = 0.0
        pots.append(Potential.quadratic(q, np.zeros(dim), label=f"quad@{s:g}"))
        pots.append(Potential.quadratic(-q, np.zeros(dim), label=f"quad@-{s:g}"))
    return pots


# ---------------------------------------------------------------------------
# kernel backends

Observable = Union[Potential, np.ndarray, Callable[[np.ndarray], np.ndarray]]


class NSEBackend:
    """Kernel backend wrapping the kicked-flow period map."""

    def __init__(self, m: NoiseModel, scfg: SolverConfig, fm: FeatureMap,
                 tag: int = TAG_FK):
        self.m = m
        self.scfg = scfg
        self.fm = fm
        self.tag = tag

    def replicate(self, u0: VelocityField, n: int) -> FieldBatch:
        return FieldBatch.replicate(u0, n)

    def size(self, states: FieldBatch) -> int:
        return states.size

    def propagate(self, states: FieldBatch, step: int, seed: int,
                  member_offset: int = 0) -> FieldBatch:
        rngs = [substream(seed, self.tag, step, member_offset + i)
                for i in range(states.size)]
        coeffs = sample_kick_batch(self.m, rngs)
        return solve_period_batch(states, coeffs, self.m, self.scfg)

    def feature_values(self, states: FieldBatch) -> np.ndarray:
        return self.fm.apply_flat(states.flat())

    def values(self, g: Observable, states: FieldBatch) -> np.ndarray:
        feats = self.feature_values(states)
        if isinstance(g, Potential):
            return g.evaluate(feats)
        if callable(g):
            return np.asarray(g(feats), dtype=float)
        raise ChainFormatError("flow backend needs feature-space observables")

    def select(self, states: FieldBatch, idx: np.ndarray) -> FieldBatch:
        return FieldBatch(states.domain, states.u[idx].copy(), states.v[idx].copy())

    def distance(self, a: VelocityField, b: VelocityField) -> float:
        diff = a + b * (-1.0)
        from .grid_field import field_norms
        return field_norms(diff)[0]


class OracleBackend:
    """Kernel backend over a finite chain; states are index arrays."""

    def __init__(self, chain: FiniteChain, tag: int = TAG_FK):
        self.chain = chain
        self.tag = tag
        self._cum = np.cumsum(chain.P, axis=1)

    def replicate(self, state: int, n: int) -> np.ndarray:
        return np.full(n, int(state), dtype=np.int64)

    def size(self, states: np.ndarray) -> int:
        return len(states)

    def propagate(self, states: np.ndarray, step: int, seed: int,
                  member_offset: int = 0) -> np.ndarray:
        rng = substream(seed, self.tag, step)
        draws = rng.random(member_offset + len(states))[member_offset:]
        nxt = (draws[:, None] > self._cum[states]).sum(axis=1)
        return np.minimum(nxt, self.chain.size - 1).astype(np.int64)

    def feature_values(self, states: np.ndarray) -> np.ndarray:
        return self.chain.coords[states]

    def values(self, g: Observable, states: np.ndarray) -> np.ndarray:
        if isinstance(g, Potential):
            if g.kind == "table":
                return g.table[states]
            return g.evaluate(self.chain.coords[states])
        if isinstance(g, np.ndarray):
            return g[states]
        if callable(g):
            return np.asarray(g(self.chain.coords[states]), dtype=float)
        raise ChainFormatError("unsupported observable type")

    def state_table(self, g: Observable) -> np.ndarray:
        """Per-state values of g, for exact matrix computations."""
        return self.values(g, np.arange(self.chain.size))

    def select(self, states: np.ndarray, idx: np.ndarray) -> np.ndarray:
        return states[idx].copy()

    def distance(self, a: int, b: int) -> float:
        return float(np.linalg.norm(self.chain.coords[a] - self.chain.coords[b]))


# ---------------------------------------------------------------------------
# Feynman-Kac ensembles


@dataclass
class FKEnsemble:
    """Particle cloud with normalized log-weights and the per-step
    log-normalizers accumulated so far."""

    states: object
    log_weights: np.ndarray
    step: int = 0
    normalizers: List[float] = field(default_factory=list)
    resample_steps: List[int] = field(default_factory=list)

    @property
    def n_particles(self) -> int:
        return len(self.log_weights)


def make_ensemble(backend, u0, n_particles: int) -> FKEnsemble:
    if n_particles < 1:
        raise ChainFormatError("need at least one particle")
    states = backend.replicate(u0, n_particles)
    return FKEnsemble(states=states, log_weights=np.zeros(n_particles))


def fk_evolve(backend, e: FKEnsemble, V: Observable, steps: int, seed: int,
              ess_fraction: float = 0.5) -> FKEnsemble:
    """Advance the weighted cloud; one normalizer per step.

    After each propagation the potential joins the log-weights, the mean
    weight is logged and removed, and the cloud is multinomially resampled
    whenever the effective sample size drops below ess_fraction * N.
    """
    states = e.states
    logw = e.log_weights.copy()
    normalizers = list(e.normalizers)
    resamples = list(e.resample_steps)
    n = e.n_particles
    for k in range(e.step + 1, e.step + steps + 1):
        states = backend.propagate(states, k, seed)
        logw = logw + backend.values(V, states)
        if not np.any(np.isfinite(logw)):
            raise DegeneracyError(f"all particle weights collapsed at step {k}")
        c_k = float(logmeanexp(logw))
        normalizers.append(c_k)
        logw = logw - c_k
        p = np.exp(logw)
        p = p / p.sum()
        ess = 1.0 / float(p @ p)
        if ess < ess_fraction * n:
            rng = substream(seed, TAG_CLOUD, k)
            idx = rng.choice(n, size=n, p=p)
            states = backend.select(states, np.sort(idx))
            logw = np.zeros(n)
            resamples.append(k)
    return FKEnsemble(states=states, log_weights=logw, step=e.step + steps,
                      normalizers=normalizers, resample_steps=resamples)


def fk_apply_track(backend, f: Observable, V: Observable, u0,
                   n_list: Sequence[int], n_mc: int,
                   seed: int) -> Dict[int, Tuple[float, float]]:
    """Direct Monte-Carlo estimates of the weighted semigroup image at u0
    for every depth in n_list, from one shared propagation.

    Returns {n: (estimate, standard error)}.  Exact at n = 0.  The weight
    accumulates in log space; the exponential moment makes this estimator
    useless beyond a few dozen steps, use the cloning path there.
    """
    n_list = sorted(set(int(n) for n in n_list))
    if n_list and n_list[0] < 0:
        raise ChainFormatError("step count must be >= 0")
    out: Dict[int, Tuple[float, float]] = {}
    if n_list and n_list[0] == 0:
        states = backend.replicate(u0, 1)
        out[0] = (float(backend.values(f, states)[0]), 0.0)
        n_list = n_list[1:]
    if not n_list:
        return out
    if n_mc < 2:
        raise ChainFormatError("need at least two chains for a standard error")
    states = backend.replicate(u0, n_mc)
    log_acc = np.zeros(n_mc)
    want = set(n_list)
    for k in range(1, n_list[-1] + 1):
        states = backend.propagate(states, k, seed)
        log_acc += backend.values(V, states)
        if k in want:
            fvals = backend.values(f, states)
            m = float(np.max(log_acc))
            scaled = np.exp(log_acc - m) * fvals
            mean = float(np.mean(scaled))
            se = float(np.std(scaled, ddof=1) / math.sqrt(n_mc))
            scale = math.exp(m)
            out[k] = (mean * scale, se * scale)
    return out


def fk_apply(backend, f: Observable, V: Observable, u0, n: int, n_mc: int,
             seed: int) -> Tuple[float, float]:
    """Single-depth front end of fk_apply_track."""
    return fk_apply_track(backend, f, V, u0, [n], n_mc, seed)[n]


@dataclass(frozen=True)
class QEstimate:
    estimate: float
    stderr: float
    per_initial: Tuple[Tuple[str, float, float], ...]
    method: str
    n_steps: int
    n_particles: int

    def __post_init__(self):
        if self.method in ("cloning", "direct") and not self.stderr > 0:
            raise ChainFormatError("Monte-Carlo growth-rate estimates need a positive stderr")


def estimate_Q(backend, V: Observable, initial_states: Sequence, n: int,
               n_particles: int, seed: int, method: str = "cloning",
               burn_in: Optional[int] = None) -> QEstimate:
    """Growth rate of the weighted semigroup, pooled over initial states.

    The cloning path averages the per-step log-normalizers after burn-in
    (default: the first half); the spread across initial states is the
    initial-point-independence diagnostic.
    """
    if method not in ("cloning", "direct"):
        raise ChainFormatError(f"unknown method {method!r}")
    if not initial_states:
        raise ChainFormatError("need at least one initial state")
    if burn_in is None:
        burn_in = n // 2
    if burn_in >= n:
        raise ChainFormatError("burn-in swallows every step")
    rows = []
    for s_idx, u0 in enumerate(initial_states):
        if method == "cloning":
            ens = fk_evolve(backend, make_ensemble(backend, u0, n_particles), V,
                            n, seed + s_idx)
            tail = np.asarray(ens.normalizers[burn_in:])
            q = float(tail.mean())
            se = batch_means_stderr(tail) if len(tail) > 1 else 0.0
        else:
            if n > 30:
                raise ChainFormatError("direct growth-rate estimation is confined to n <= 30")
            val, vse = fk_apply(backend, Potential.constant(1.0), V, u0, n,
                                n_particles, seed + s_idx)
            if val <= 0:
                raise DegeneracyError("nonpositive direct semigroup estimate")
            q = math.log(val) / n
            se = vse / (val * n)
        rows.append((f"state{s_idx}", q, max(se, 1e-300)))
    qs = np.array([r[1] for r in rows])
    ses = np.array([r[2] for r in rows])
    pooled_se = float(np.sqrt(np.sum(ses ** 2)) / len(rows))
    spread = float(qs.std(ddof=1)) if len(rows) > 1 else 0.0
    return QEstimate(estimate=float(qs.mean()),
                     stderr=max(pooled_se, spread / math.sqrt(len(rows)), 1e-300),
                     per_initial=tuple(rows), method=method,
                     n_steps=n, n_particles=n_particles)


@dataclass(frozen=True)
class RateFunctionEstimate:
    value: float
    argmax_label: str
    brackets: Tuple[Tuple[str, float, float], ...]  # (label, bracket, Q stderr)
    pooled_stderr: float


def estimate_rate_function(sigma: SparseHistogram, dictionary: Sequence[Potential],
                           q_table: Dict[str, QEstimate]) -> RateFunctionEstimate:
    """Legendre bracket maximized over the dictionary: sup <V,sigma> - Q(V)."""
    if not dictionary:
        raise ChainFormatError("empty potential dictionary")
    rows = []
    best = -math.inf
    arg = ""
    best_se = 0.0
    for pot in dictionary:
        if pot.label not in q_table:
            raise ChainFormatError(f"no growth-rate estimate for potential {pot.label!r}")
        qe = q_table[pot.label]
        mean_v = sigma.expect(lambda c: pot.evaluate(c))
        bracket = mean_v - qe.estimate
        rows.append((pot.label, bracket, qe.stderr))
        if bracket > best:
            best, arg, best_se = bracket, pot.label, qe.stderr
    return RateFunctionEstimate(value=best, argmax_label=arg,
                                brackets=tuple(rows), pooled_stderr=best_se)


def implied_gamma(q: float, sup_v: float) -> float:
    """Decay exponent left over once the potential's sup-norm eats into the
    coupling contraction: gamma with q * e^{sup V} = e^{-gamma}."""
    if not (0 < q < 1):
        raise ChainFormatError("contraction factor must lie in (0,1)")
    return -math.log(q) - sup_v


# ---------------------------------------------------------------------------
# uniform-Feller diagnostic


@dataclass(frozen=True)
class UfpRow:
    n: int
    ratio: float
    noise_floor: float


def ufp_diagnostic_exact(c: FiniteChain, V: np.ndarray, f: np.ndarray,
                         pairs: Sequence[Tuple[int, int]],
                         n_list: Sequence[int]) -> List[List[UfpRow]]:
    """Exact R_n table per pair on the oracle: normalized semigroup
    difference over the embedded distance."""
    tables: List[List[UfpRow]] = []
    ones = np.ones(c.size)
    for (i, j) in pairs:
        dist = float(np.linalg.norm(c.coords[i] - c.coords[j]))
        if dist < 1e-12:
            raise ChainFormatError("pair states coincide; ratio undefined")
        rows = []
        for n in n_list:
            bn_f = exact_fk_apply(c, V, f, n)
            bn_one = exact_fk_apply(c, V, ones, n)
            ratio = abs(bn_f[i] - bn_f[j]) / (float(np.max(bn_one)) * dist)
            rows.append(UfpRow(n=n, ratio=ratio, noise_floor=0.0))
        tables.append(rows)
    return tables


def ufp_diagnostic(backend, V: Observable, f: Observable,
                   pairs: Sequence[Tuple[object, object]],
                   n_list: Sequence[int], n_mc: int, seed: int,
                   probe_states: Sequence = ()) -> List[List[UfpRow]]:
    """Monte-Carlo R_n table per pair, with a propagated noise floor.

    The sup of the weighted survival image is approximated by its max over
    the pair states plus the probe set.
    """
    n_list = sorted(set(int(n) for n in n_list))
    one = Potential.constant(1.0)
    # survival normalizers over the probe union, one propagation per probe
    sup_by_n: Dict[int, float] = {n: 0.0 for n in n_list}
    probe_list = list(probe_states) + [p for pair in pairs for p in pair]
    for p_idx, probe in enumerate(probe_list):
        track = fk_apply_track(backend, one, V, probe, n_list, n_mc, seed + 7919 + p_idx)
        for n in n_list:
            sup_by_n[n] = max(sup_by_n[n], abs(track[n][0]))
    tables: List[List[UfpRow]] = []
    for pair_idx, (ua, ub) in enumerate(pairs):
        dist = backend.distance(ua, ub)
        if dist < 1e-12:
            raise ChainFormatError("pair states coincide; ratio undefined")
        ta = fk_apply_track(backend, f, V, ua, n_list, n_mc, seed + 2 * pair_idx)
        tb = fk_apply_track(backend, f, V, ub, n_list, n_mc, seed + 2 * pair_idx + 1)
        rows = []
        for n in n_list:
            sup = sup_by_n[n]
            if sup <= 0:
                raise DegeneracyError("vanishing survival normalizer")
            (fa, sa), (fb, sb) = ta[n], tb[n]
            rows.append(UfpRow(n=n, ratio=abs(fa - fb) / (sup * dist),
                               noise_floor=math.sqrt(sa * sa + sb * sb) / (sup * dist)))
        tables.append(rows)
    return tables
