"""Experiment driver.

One flat YAML config with per-module blocks feeds every subcommand; the
seed is mandatory and fully determines the run, so a repeated invocation
with the same config writes byte-identical reports.  Unknown keys are
rejected with their dotted path.
"""

import argparse
import os
import sys
from dataclasses import dataclass
from typing import Dict, Optional, Sequence

import numpy as np
import yaml

from .coupling import CouplingConfig, verify_contraction
from .errors import ConfigError, KickflowError
from .features import FeatureMap
from .grid_field import DomainSpec, VelocityField, random_solenoidal_field, save_field
from .ldp import (
    NSEBackend,
    OracleBackend,
    Potential,
    estimate_Q,
    estimate_rate_function,
    fk_apply,
    fk_evolve,
    make_ensemble,
    potential_dictionary,
    ufp_diagnostic,
    ufp_diagnostic_exact,
)
from .markov_chain import (
    ChainConfig,
    InitialSpec,
    attainability_sample,
    estimate_irreducibility,
    occupation_measure,
    run_chain,
    write_trajectory_log,
)
from .noise import build_model, power_law_amplitudes
from .ns_solver import SolverConfig, estimate_dissipation, validate_dissipation
from .oracle import (
    FiniteChain,
    bundled_five_state,
    eigen_deviation_curve,
    exact_Q,
    exact_fk_apply,
    exact_rate_function,
    load_chain,
    two_state_rate_at_point_mass,
)
from .report import ReportWriter, config_hash
from .stats import batch_means_stderr
from .streams import TAG_GENERIC, substream

# ---------------------------------------------------------------------------
# config schema

# type tags: int / float / str / bool / float_list / int_list
_SCHEMA: Dict[str, Dict[str, tuple]] = {
    "domain": {
        "nx": ("int", 32),
        "ny": ("int", 32),
        "viscosity": ("float", 0.05),
    },
    "noise": {
        "window": ("float_list", [0.25, 0.75, 0.25, 0.5, 0.25, 0.5]),
        "n_modes": ("int", 16),
        "amplitude_scale": ("float", 0.1),
        "amplitude_power": ("float", 2.0),
        "density_exponent": ("int", 2),
        "cutoff_sharpness": ("float", 1.0),
        "quad_cells": ("int", 64),
    },
    "solver": {
        "dt": ("float", 0.025),
        "cfl_safety": ("float", 0.5),
        "poisson_tol": ("float", 1e-12),
        "advection_order": ("int", 2),
        "dissipation_samples": ("int", 128),
        "validation_pairs": ("int", 256),
    },
    "chain": {
        "n_steps": ("int", 200),
        "initial": ("str", "zero"),
        "initial_norm": ("float", 0.0),
        "stride": ("int", 0),  # 0 means automatic thinning
        "n_features": ("int", 8),
        "cloud_depth": ("int", 12),
        "cloud_samples": ("int", 240),
        "pairs": ("int", 6),
        "radius_factor": ("float", 0.1),
        "hit_steps": ("int", 3),
        "hit_mc": ("int", 200),
    },
    "coupling": {
        "q": ("float", 0.5),
        "d_list": ("float_list", [0.02, 0.01, 0.005]),
        "n_mc": ("int", 200),
        "threshold_d": ("float", 0.02),
        "m_control": ("int", 8),
    },
    "ldp": {
        "backend": ("str", "flow"),
        "potential_kind": ("str", "affine"),
        "potential_coeffs": ("float_list", []),
        "potential_quad": ("float_list", []),
        "potential_value": ("float", 0.0),
        "n_steps": ("int", 60),
        "n_particles": ("int", 128),
        "burn_in": ("int", 0),  # 0 means half the steps
        "method": ("str", "cloning"),
        "dict_scales": ("float_list", [0.5, 2.0]),
        "dict_energy_scales": ("float_list", [4.0]),
        "dict_dims": ("int", 1),
        "ufp_n_max": ("int", 40),
        "ufp_n_mc": ("int", 64),
        "ufp_pair_gap": ("float", 0.005),
    },
    "oracle": {
        "file": ("str", ""),
        "n_steps": ("int", 200),
        "n_particles": ("int", 512),
        "n_mc": ("int", 4000),
        "fk_depths": ("int_list", [1, 5, 20]),
    },
}

_TOP_KEYS = ("seed", "output") + tuple(_SCHEMA)


@dataclass(frozen=True)
class ExperimentConfig:
    seed: int
    output: str
    domain: Dict[str, object]
    noise: Dict[str, object]
    solver: Dict[str, object]
    chain: Dict[str, object]
    coupling: Dict[str, object]
    ldp: Dict[str, object]
    oracle: Dict[str, object]


def _coerce(value, type_tag: str, path: str):
    if type_tag == "int":
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"expected an integer, got {value!r}", path)
        return value
    if type_tag == "float":
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"expected a number, got {value!r}", path)
        return float(value)
    if type_tag == "str":
        if not isinstance(value, str):
            raise ConfigError(f"expected a string, got {value!r}", path)
        return value
    if type_tag == "bool":
        if not isinstance(value, bool):
            raise ConfigError(f"expected a boolean, got {value!r}", path)
        return value
    if type_tag in ("float_list", "int_list"):
        if not isinstance(value, (list, tuple)):
            raise ConfigError(f"expected a list, got {value!r}", path)
        out = []
        for i, item in enumerate(value):
            out.append(_coerce(item, type_tag.split("_")[0], f"{path}[{i}]"))
        return out
    raise ConfigError(f"internal schema tag {type_tag}", path)


def parse_config(raw: object) -> ExperimentConfig:
    """Validate a loaded YAML document against the schema."""
    if not isinstance(raw, dict):
        raise ConfigError("config top level must be a mapping", "")
    for key in raw:
        if key not in _TOP_KEYS:
            raise ConfigError(f"unknown key {key!r}", str(key))
    if "seed" not in raw:
        raise ConfigError("seed is mandatory", "seed")
    seed = _coerce(raw["seed"], "int", "seed")
    output = _coerce(raw.get("output", "reports"), "str", "output")
    blocks = {}
    for block, fields in _SCHEMA.items():
        given = raw.get(block, {})
        if given is None:
            given = {}
        if not isinstance(given, dict):
            raise ConfigError("block must be a mapping", block)
        merged = {}
        for key, (tag, default) in fields.items():
            if key in given:
                merged[key] = _coerce(given[key], tag, f"{block}.{key}")
            else:
                merged[key] = default
        for key in given:
            if key not in fields:
                raise ConfigError(f"unknown key {key!r}", f"{block}.{key}")
        blocks[block] = merged
    return ExperimentConfig(seed=seed, output=output, **blocks)


def load_config(path: str) -> ExperimentConfig:
    try:
        with open(path, "r", encoding="utf-8") as fh:
            raw = yaml.safe_load(fh)
    except OSError as e:
        raise ConfigError(f"cannot read config: {e}", "")
    except yaml.YAMLError as e:
        raise ConfigError(f"config is not valid YAML: {e}", "")
    return parse_config(raw)


# ---------------------------------------------------------------------------
# builders

def build_domain(cfg: ExperimentConfig) -> DomainSpec:
    b = cfg.domain
    return DomainSpec(b["nx"], b["ny"], b["viscosity"])


def build_noise(cfg: ExperimentConfig):
    b = cfg.noise
    if len(b["window"]) != 6:
        raise ConfigError("window needs 6 entries (t0,t1,x0,x1,y0,y1)", "noise.window")
    amps = power_law_amplitudes(b["n_modes"], b["amplitude_scale"], b["amplitude_power"])
    return build_model(window=tuple(b["window"]), n_modes=b["n_modes"], amplitudes=amps,
                       density_exponent=b["density_exponent"],
                       cutoff_sharpness=b["cutoff_sharpness"], quad_cells=b["quad_cells"])


def build_solver(cfg: ExperimentConfig) -> SolverConfig:
    b = cfg.solver
    return SolverConfig(dt=b["dt"], cfl_safety=b["cfl_safety"],
                        poisson_tol=b["poisson_tol"], advection_order=b["advection_order"])


def build_features(cfg: ExperimentConfig, d: DomainSpec) -> FeatureMap:
    return FeatureMap.build(d, n_coeffs=cfg.chain["n_features"])


def build_potential(cfg: ExperimentConfig, dim: int) -> Potential:
    b = cfg.ldp
    kind = b["potential_kind"]
    coeffs = list(b["potential_coeffs"])
    if kind == "constant":
        return Potential.constant(b["potential_value"], label="config")
    if not coeffs:
        # default direction: weight the energy coordinate
        vec = np.zeros(dim)
        vec[-1] = 1.0
    else:
        if len(coeffs) != dim:
            raise ConfigError(f"need {dim} coefficients, got {len(coeffs)}",
                              "ldp.potential_coeffs")
        vec = np.asarray(coeffs, dtype=float)
    if kind == "affine":
        return Potential.affine(vec, offset=b["potential_value"], label="config")
    if kind == "quadratic":
        quad = list(b["potential_quad"])
        if len(quad) != dim:
            raise ConfigError(f"need {dim} quadratic coefficients, got {len(quad)}",
                              "ldp.potential_quad")
        return Potential.quadratic(np.asarray(quad, dtype=float), vec,
                                   offset=b["potential_value"], label="config")
    raise ConfigError(f"unknown potential kind {kind!r}", "ldp.potential_kind")


def build_oracle(cfg: ExperimentConfig) -> FiniteChain:
    path = cfg.oracle["file"]
    if path:
        return load_chain(path)
    return bundled_five_state()


# ---------------------------------------------------------------------------
# subcommands

def run_simulate(cfg: ExperimentConfig, w: ReportWriter) -> None:
    d = build_domain(cfg)
    m = build_noise(cfg)
    scfg = build_solver(cfg)
    fm = build_features(cfg, d)
    b = cfg.chain
    ccfg = ChainConfig(n=b["n_steps"], seed=cfg.seed,
                       initial=InitialSpec(b["initial"], b["initial_norm"]),
                       n_features=b["n_features"])
    stride = b["stride"] if b["stride"] > 0 else None
    t = run_chain(ccfg, m, scfg, fm, stride=stride)
    occ = occupation_measure(t)

    write_trajectory_log(t, w.path("trajectory.tsv"))
    save_field(w.path("state_final.kfld"), t.states[-1])
    dim = fm.dim
    centers = occ.histogram.support_centers()
    masses = occ.histogram.masses()
    w.table("occupation.tsv", [f"c{j}" for j in range(dim)] + ["mass"],
            [list(centers[i]) + [masses[i]] for i in range(len(masses))])
    steps = np.arange(t.features.shape[0])
    w.series("energy_series.dat", steps, t.features[:, -1], "step", "energy")
    w.summary("summary.txt", {
        "n_steps": t.n,
        "stride": t.stride,
        "occupation_count": occ.count,
        "moment_gap": occ.moment_gap(),
        "final_energy": float(t.features[-1, -1]),
        "histogram_bins": len(masses),
    })


def run_dissipation(cfg: ExperimentConfig, w: ReportWriter) -> None:
    d = build_domain(cfg)
    m = build_noise(cfg)
    scfg = build_solver(cfg)
    est = estimate_dissipation(d, m, scfg, n_samples=cfg.solver["dissipation_samples"],
                               seed=cfg.seed)
    val = validate_dissipation(est, d, m, scfg, cfg.solver["validation_pairs"],
                               seed=cfg.seed)
    w.table("validation.tsv", ["pre_norm", "kick_norm", "post_norm", "bound"],
            [list(r) for r in val.rows])
    order = np.argsort(val.rows[:, 0], kind="stable")
    w.series("response_series.dat", val.rows[order, 0], val.rows[order, 2],
             "pre_norm", "post_norm")
    w.summary("summary.txt", {
        "kappa": est.kappa,
        "forcing_gain": est.forcing_gain,
        "ball_radius": est.ball_radius,
        "fit_samples": est.n_samples,
        "fit_satisfied_fraction": est.satisfied_fraction,
        "fresh_pairs": val.n_pairs,
        "fresh_satisfied_fraction": val.satisfied_fraction,
        "fresh_worst_margin": val.worst_margin,
        "ok": val.ok,
    })


def run_irreducibility(cfg: ExperimentConfig, w: ReportWriter) -> None:
    d = build_domain(cfg)
    m = build_noise(cfg)
    scfg = build_solver(cfg)
    fm = build_features(cfg, d)
    b = cfg.chain
    cloud = attainability_sample(b["cloud_depth"], b["cloud_samples"], m, d, scfg,
                                 seed=cfg.seed, fm=fm)
    diam = cloud.diameter()
    r = b["radius_factor"] * diam
    rng = substream(cfg.seed, TAG_GENERIC)
    rows = []
    worst = 1.0
    for p in range(b["pairs"]):
        i, j = rng.integers(0, cloud.size, size=2)
        est = estimate_irreducibility(b["hit_steps"], cloud.state(int(i)),
                                      cloud.state(int(j)), r, b["hit_mc"], m, scfg,
                                      seed=cfg.seed + 1000 + p)
        rows.append([p, int(i), int(j), est.m_steps, est.radius, est.hits, est.n_mc,
                     est.p_hat, est.wilson_low, est.wilson_high])
        worst = min(worst, est.wilson_low)
    w.table("hits.tsv", ["pair", "from_idx", "to_idx", "m_steps", "radius", "hits",
                         "n_mc", "p_hat", "wilson_low", "wilson_high"], rows)
    w.summary("summary.txt", {
        "cloud_depth": b["cloud_depth"],
        "cloud_size": cloud.size,
        "cloud_diameter": diam,
        "ball_radius": r,
        "pairs": b["pairs"],
        "min_wilson_low": worst,
        "all_reachable": worst > 0.0,
    })


def run_attainability(cfg: ExperimentConfig, w: ReportWriter) -> None:
    d = build_domain(cfg)
    m = build_noise(cfg)
    scfg = build_solver(cfg)
    fm = build_features(cfg, d)
    b = cfg.chain
    cloud = attainability_sample(b["cloud_depth"], b["cloud_samples"], m, d, scfg,
                                 seed=cfg.seed, fm=fm)
    depths = np.arange(b["cloud_depth"] + 1)
    growth = []
    for k in depths:
        sub = cloud.restricted(int(k))
        growth.append([int(k), sub.size, sub.diameter()])
    w.table("growth.tsv", ["depth", "points", "diameter"], growth)
    w.table("points.tsv", ["depth"] + [f"c{j}" for j in range(fm.dim)],
            [[int(cloud.depths[i])] + list(cloud.features[i])
             for i in range(cloud.size)])
    w.series("diameter_series.dat", depths, [g[2] for g in growth],
             "depth", "diameter")
    sizes = [g[1] for g in growth]
    w.summary("summary.txt", {
        "depth": b["cloud_depth"],
        "points": cloud.size,
        "diameter": growth[-1][2],
        "nested": all(sizes[k] <= sizes[k + 1] for k in range(len(sizes) - 1)),
    })


def run_couple(cfg: ExperimentConfig, w: ReportWriter) -> None:
    d = build_domain(cfg)
    m = build_noise(cfg)
    scfg = build_solver(cfg)
    b = cfg.coupling
    ccfg = CouplingConfig(q=b["q"], m_control=b["m_control"], threshold_d=b["threshold_d"])
    rows = verify_contraction(b["d_list"], b["q"], b["n_mc"], m, d, scfg, ccfg,
                              seed=cfg.seed)
    w.table("contraction.tsv",
            ["gap", "n_mc", "failures", "frequency", "ratio", "wilson_low", "wilson_high"],
            [[r.gap, r.n_mc, r.failures, r.frequency, r.ratio, r.wilson_low, r.wilson_high]
             for r in rows])
    w.series("ratio_series.dat", [r.gap for r in rows], [r.ratio for r in rows],
             "gap", "failure_ratio")
    ratios = [r.ratio for r in rows]
    w.summary("summary.txt", {
        "q": b["q"],
        "n_mc": b["n_mc"],
        "total_failures": sum(r.failures for r in rows),
        "max_ratio": max(ratios) if ratios else 0.0,
    })


def run_estimate_q(cfg: ExperimentConfig, w: ReportWriter) -> None:
    b = cfg.ldp
    if b["backend"] == "oracle":
        chain = build_oracle(cfg)
        backend = OracleBackend(chain)
        dim = chain.coords.shape[1]
        u0 = 0
    elif b["backend"] == "flow":
        d = build_domain(cfg)
        m = build_noise(cfg)
        scfg = build_solver(cfg)
        fm = build_features(cfg, d)
        backend = NSEBackend(m, scfg, fm)
        dim = fm.dim
        u0 = VelocityField.zero(d)
    else:
        raise ConfigError(f"unknown backend {b['backend']!r}", "ldp.backend")
    V = build_potential(cfg, dim)
    n = b["n_steps"]
    burn = b["burn_in"] if b["burn_in"] > 0 else n // 2
    if b["method"] == "cloning":
        ens = fk_evolve(backend, make_ensemble(backend, u0, b["n_particles"]), V, n,
                        cfg.seed)
        normalizers = np.asarray(ens.normalizers)
        running = np.cumsum(normalizers) / np.arange(1, n + 1)
        tail = normalizers[burn:]
        q_hat = float(tail.mean())
        stderr = batch_means_stderr(tail) if len(tail) > 1 else 0.0
        resamples = len(ens.resample_steps)
    elif b["method"] == "direct":
        est = estimate_Q(backend, V, [u0], n, b["n_particles"], cfg.seed,
                         method="direct", burn_in=burn)
        q_hat, stderr = est.estimate, est.stderr
        running = np.full(n, q_hat)
        resamples = 0
    else:
        raise ConfigError(f"unknown method {b['method']!r}", "ldp.method")
    w.series("q_series.dat", np.arange(1, n + 1), running, "n", "running_q")
    w.summary("summary.txt", {
        "method": b["method"],
        "backend": b["backend"],
        "potential": V.label,
        "n_steps": n,
        "n_particles": b["n_particles"],
        "burn_in": burn,
        "resamples": resamples,
        "q_hat": q_hat,
        "stderr": stderr,
    })


def run_rate_function(cfg: ExperimentConfig, w: ReportWriter) -> None:
    b = cfg.ldp
    if b["backend"] != "flow":
        raise ConfigError("rate-function runs on the flow backend; oracle rate "
                          "checks live under oracle-validate", "ldp.backend")
    d = build_domain(cfg)
    m = build_noise(cfg)
    scfg = build_solver(cfg)
    fm = build_features(cfg, d)
    backend = NSEBackend(m, scfg, fm)
    cb = cfg.chain
    ccfg = ChainConfig(n=cb["n_steps"], seed=cfg.seed,
                       initial=InitialSpec(cb["initial"], cb["initial_norm"]),
                       n_features=cb["n_features"])
    t = run_chain(ccfg, m, scfg, fm)
    occ = occupation_measure(t)
    dictionary = potential_dictionary(fm.dim, tuple(b["dict_scales"]),
                                      tuple(b["dict_energy_scales"]),
                                      n_active=b["dict_dims"])
    burn = b["burn_in"] if b["burn_in"] > 0 else None
    q_table = {}
    u0 = VelocityField.zero(d)
    for idx, pot in enumerate(dictionary):
        q_table[pot.label] = estimate_Q(backend, pot, [u0], b["n_steps"],
                                        b["n_particles"], cfg.seed + 37 * idx,
                                        burn_in=burn)
    est = estimate_rate_function(occ.histogram, dictionary, q_table)
    rows = [[label, bracket, q_table[label].estimate, stderr]
            for label, bracket, stderr in est.brackets]
    w.table("brackets.tsv", ["potential", "bracket", "q_hat", "q_stderr"], rows)
    w.series("bracket_series.dat", np.arange(len(rows)),
             [r[1] for r in rows], "potential_index", "bracket")
    w.summary("summary.txt", {
        "rate_value": est.value,
        "argmax": est.argmax_label,
        "pooled_stderr": est.pooled_stderr,
        "n_potentials": len(dictionary),
        "occupation_steps": cb["n_steps"],
    })


def run_ufp(cfg: ExperimentConfig, w: ReportWriter) -> None:
    b = cfg.ldp
    d = build_domain(cfg)
    m = build_noise(cfg)
    scfg = build_solver(cfg)
    fm = build_features(cfg, d)
    backend = NSEBackend(m, scfg, fm)
    V = build_potential(cfg, fm.dim)
    f_vec = np.zeros(fm.dim)
    f_vec[0] = 1.0
    f = Potential.affine(f_vec, label="coeff0")
    gap = b["ufp_pair_gap"]
    zero = VelocityField.zero(d)
    pairs = [
        (zero, random_solenoidal_field(d, gap, substream(cfg.seed, TAG_GENERIC, 1))),
        (random_solenoidal_field(d, gap, substream(cfg.seed, TAG_GENERIC, 2)),
         random_solenoidal_field(d, 2 * gap, substream(cfg.seed, TAG_GENERIC, 3))),
    ]
    n_list = np.unique(np.round(np.geomspace(1, b["ufp_n_max"], 10)).astype(int))
    tables = ufp_diagnostic(backend, V, f, pairs, n_list, b["ufp_n_mc"], cfg.seed,
                            probe_states=[zero])
    rows = []
    for p_idx, table in enumerate(tables):
        for r in table:
            rows.append([p_idx, r.n, r.ratio, r.noise_floor])
    w.table("ufp.tsv", ["pair", "n", "ratio", "noise_floor"], rows)
    max_by_n = {int(n): max(t[i].ratio for t in tables)
                for i, n in enumerate(n_list)}
    w.series("ratio_series.dat", list(max_by_n), list(max_by_n.values()),
             "n", "max_ratio")
    vals = list(max_by_n.values())
    w.summary("summary.txt", {
        "n_max": int(n_list[-1]),
        "max_ratio": max(vals),
        "first_ratio": vals[0],
        "last_ratio": vals[-1],
    })


def run_oracle_validate(cfg: ExperimentConfig, w: ReportWriter) -> None:
    """Estimator-vs-oracle battery; any failed comparison is an error."""
    b = cfg.oracle
    chain = build_oracle(cfg)
    backend = OracleBackend(chain)
    V_tab = chain.potential if chain.potential is not None else np.zeros(chain.size)
    V = Potential.from_table(V_tab, label="bundled")
    f_tab = np.linspace(0.5, 1.5, chain.size)
    rows = []

    def check(name: str, value: float, bound: float) -> None:
        rows.append([name, value, bound, bool(value <= bound)])

    # weighted-semigroup estimates against matrix powers, z-scores
    for n in b["fk_depths"]:
        exact_val = float(exact_fk_apply(chain, V_tab, f_tab, n)[0])
        mc, se = fk_apply(backend, f_tab, V, 0, n, b["n_mc"], cfg.seed + n)
        check(f"fk_z_n{n}", abs(mc - exact_val) / max(se, 1e-300), 3.0)

    # growth rate of the normalizers against the log Perron root
    q_exact = exact_Q(chain, V_tab)
    q_est = estimate_Q(backend, V, [0], b["n_steps"], b["n_particles"], cfg.seed)
    check("cloning_q_z", abs(q_est.estimate - q_exact) / q_est.stderr, 3.0)

    # projective convergence of the rescaled semigroup
    curve = eigen_deviation_curve(chain, V_tab, f_tab, 50)
    check("eigen_endpoint_rel", float(curve[-1] / max(curve[0], 1e-300)), 1e-8)
    nz = curve[curve > 0]
    if len(nz) > 2:
        fit = float(np.exp(np.polyfit(np.arange(len(nz)), np.log(nz), 1)[0]))
        check("eigen_fitted_ratio", fit, 1.0)

    # rate function at the stationary law, with the zero potential in the grid
    mu = chain.stationary()
    V_grid = np.vstack([np.zeros(chain.size), np.eye(chain.size), V_tab])
    rate_val, _ = exact_rate_function(chain, mu, V_grid)
    check("rate_stationary", abs(rate_val), 1e-8)

    # two-state closed form
    two = FiniteChain.from_matrix(np.array([[0.7, 0.3], [0.4, 0.6]]))
    point_mass = np.array([1.0, 0.0])
    t_grid = np.linspace(0.0, 25.0, 2501)
    grid = np.stack([t_grid, np.zeros_like(t_grid)], axis=1)
    approx, _ = exact_rate_function(two, point_mass, grid)
    check("two_state_gap", abs(approx - two_state_rate_at_point_mass(0.7)), 1e-6)

    # uniform-in-n boundedness of the normalized difference table
    pairs = [(0, chain.size - 1)]
    t100 = ufp_diagnostic_exact(chain, V_tab, f_tab, pairs, range(1, 101))
    vals = [r.ratio for r in t100[0]]
    m50, m100 = max(vals[:50]), max(vals)
    check("ufp_growth", m100 / max(m50, 1e-300) - 1.0, 0.10)

    # convexity of the growth rate in the potential
    rng = substream(cfg.seed, TAG_GENERIC, 9)
    worst = 0.0
    for _ in range(20):
        va = rng.normal(0, 0.5, chain.size)
        vb = rng.normal(0, 0.5, chain.size)
        lam = rng.uniform(0.2, 0.8)
        mix = exact_Q(chain, lam * va + (1 - lam) * vb)
        hull = lam * exact_Q(chain, va) + (1 - lam) * exact_Q(chain, vb)
        worst = max(worst, mix - hull)
    check("q_convexity_excess", worst, 1e-10)

    w.table("checks.tsv", ["check", "value", "bound", "ok"], rows)
    failed = [r[0] for r in rows if not r[3]]
    w.summary("summary.txt", {
        "states": chain.size,
        "checks": len(rows),
        "failed": len(failed),
        "all_ok": not failed,
    })
    if failed:
        raise KickflowError(f"oracle validation failed: {', '.join(failed)}")


_SUBCOMMANDS = {
    "simulate": run_simulate,
    "dissipation": run_dissipation,
    "irreducibility": run_irreducibility,
    "attainability": run_attainability,
    "couple": run_couple,
    "estimate-q": run_estimate_q,
    "rate-function": run_rate_function,
    "ufp": run_ufp,
    "oracle-validate": run_oracle_validate,
}


def _parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="kickflow",
                                description="Kicked-flow chain experiments")
    sub = p.add_subparsers(dest="subcommand", required=True)
    for name in _SUBCOMMANDS:
        sp = sub.add_parser(name)
        sp.add_argument("--config", required=True, help="YAML experiment config")
        sp.add_argument("--seed", type=int, default=None, help="override the config seed")
        sp.add_argument("--threads", type=int, default=None,
                        help="cap numeric worker threads (default: all cores)")
        sp.add_argument("--out", default=None, help="override the output directory")
    return p


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = _parser().parse_args(argv)
    try:
        cfg = load_config(args.config)
        seed = args.seed if args.seed is not None else cfg.seed
        if seed != cfg.seed:
            cfg = ExperimentConfig(seed=seed, output=cfg.output,
                                   **{k: getattr(cfg, k) for k in _SCHEMA})
        out_dir = args.out or os.environ.get("KICKFLOW_OUT") or cfg.output
        writer = ReportWriter(out_dir, args.subcommand, config_hash(args.config), seed)
        runner = _SUBCOMMANDS[args.subcommand]
        if args.threads is not None:
            if args.threads < 1:
                raise ConfigError("thread cap must be >= 1", "--threads")
            from threadpoolctl import threadpool_limits
            with threadpool_limits(limits=args.threads):
                runner(cfg, writer)
        else:
            runner(cfg, writer)
        writer.finish()
    except ConfigError as e:
        loc = f" at {e.key_path}" if e.key_path else ""
        print(f"config error{loc}: {e}", file=sys.stderr)
        return 2
    except KickflowError as e:
        print(f"{type(e).__name__}: {e}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
