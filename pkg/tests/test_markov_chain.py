import numpy as np
import pytest

from kickflow.errors import ChainFormatError, ControllabilityError
from kickflow.grid_field import VelocityField, field_norms, random_solenoidal_field
from kickflow.markov_chain import (
    AttainabilityCloud,
    ChainConfig,
    InitialSpec,
    attainability_sample,
    check_controllability,
    estimate_irreducibility,
    occupation_measure,
    read_trajectory_log,
    run_chain,
    run_ensemble,
    stationary_support_check,
    write_trajectory_log,
)
from kickflow.ns_solver import FieldBatch, SolverConfig
from kickflow.streams import substream


def test_initial_spec_validation():
    with pytest.raises(ChainFormatError):
        InitialSpec("random", 0.0)
    with pytest.raises(ChainFormatError):
        InitialSpec("bogus", 0.1)


def test_chain_is_deterministic(domain, model, solver, fmap):
    cfg = ChainConfig(n=6, seed=99)
    t1 = run_chain(cfg, model, solver, fmap)
    t2 = run_chain(cfg, model, solver, fmap)
    assert np.array_equal(t1.features, t2.features)
    assert np.array_equal(t1.kicks, t2.kicks)


def test_replay_matches_stored_states(domain, model, solver, fmap):
    cfg = ChainConfig(n=5, seed=17, initial=InitialSpec("random", 0.001))
    t = run_chain(cfg, model, solver, fmap)
    assert t.replay_deviation(model, solver) == 0.0


def test_trajectory_log_round_trip(tmp_path, domain, model, solver, fmap):
    cfg = ChainConfig(n=5, seed=23)
    t = run_chain(cfg, model, solver, fmap)
    p = tmp_path / "traj.tsv"
    write_trajectory_log(t, p)
    kicks, feats, stored, meta = read_trajectory_log(p)
    assert np.array_equal(kicks, t.kicks)
    assert np.array_equal(feats, t.features)
    assert meta["n"] == 5


def test_ensemble_chunking_reproduces_wide_run(domain, model, solver):
    u0 = VelocityField.zero(domain)
    wide, _ = run_ensemble(FieldBatch.replicate(u0, 6), 2, model, solver, seed=31)
    left, _ = run_ensemble(FieldBatch.replicate(u0, 3), 2, model, solver, seed=31)
    right, _ = run_ensemble(FieldBatch.replicate(u0, 3), 2, model, solver, seed=31,
                            member_offset=3)
    assert np.array_equal(wide.u, np.concatenate([left.u, right.u]))
    assert np.array_equal(wide.v, np.concatenate([left.v, right.v]))


def test_occupation_counts_first_k_states(domain, model, solver, fmap):
    cfg = ChainConfig(n=8, seed=3)
    t = run_chain(cfg, model, solver, fmap)
    occ = occupation_measure(t)
    assert occ.count == 8
    assert occ.histogram.total() == pytest.approx(1.0)
    assert occ.moment_gap() >= 0


def test_attainability_nesting(domain, model, solver, fmap):
    cloud = attainability_sample(5, 50, model, domain, solver, seed=8, fm=fmap)
    sizes = [cloud.restricted(k).size for k in range(6)]
    assert sizes[0] == 1
    assert all(a <= b for a, b in zip(sizes, sizes[1:]))
    # restriction keeps exactly the points reached within the depth budget
    sub = cloud.restricted(3)
    assert np.all(sub.depths <= 3)
    assert np.array_equal(sub.features, cloud.features[cloud.depths <= 3])


def test_attainability_diameter_grows(domain, model, solver, fmap):
    cloud = attainability_sample(5, 50, model, domain, solver, seed=8, fm=fmap)
    d1 = cloud.restricted(1).diameter()
    d5 = cloud.diameter()
    assert 0 < d1 <= d5


def test_controllability_zero_state(domain, model, solver):
    assert check_controllability(VelocityField.zero(domain), 0.1, model, solver) == 0


def test_controllability_cap_error(domain, model, solver):
    v = random_solenoidal_field(domain, 0.01, substream(61))
    with pytest.raises(ControllabilityError):
        # an absurd contraction guess makes the cap too small to succeed
        check_controllability(v, 1e-9, model, solver, kappa_hat=1e-300, margin=0)


def test_irreducibility_hits_its_own_target(domain, model, solver):
    # the chain from x lands near its own one-step images often
    u0 = VelocityField.zero(domain)
    final, _ = run_ensemble(FieldBatch.replicate(u0, 1), 3, model, solver, seed=71)
    target = VelocityField(domain, final.u[0], final.v[0])
    est = estimate_irreducibility(3, u0, target, r=0.002, n_mc=64, m=model,
                                  scfg=solver, seed=71)
    assert est.hits >= 1
    assert 0 <= est.wilson_low <= est.p_hat <= est.wilson_high <= 1


def test_support_check_self_coverage(domain, model, solver, fmap):
    cloud = attainability_sample(4, 40, model, domain, solver, seed=9, fm=fmap)
    rep = stationary_support_check(cloud.features, cloud, r=1e-9)
    assert rep.occupation_covered == 1.0
    assert rep.cloud_covered == 1.0
