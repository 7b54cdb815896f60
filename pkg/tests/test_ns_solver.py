import numpy as np
import pytest

from kickflow.errors import CflError, GeometryError
from kickflow.grid_field import (
    VelocityField,
    field_norms,
    random_solenoidal_field,
    relative_divergence,
)
from kickflow.noise import sample_kick
from kickflow.ns_solver import (
    FieldBatch,
    SolverConfig,
    solve_period,
    solve_period_batch,
    validate_dissipation,
)
from kickflow.streams import substream


def test_config_requires_period_divisor():
    with pytest.raises(GeometryError):
        SolverConfig(dt=0.03)
    with pytest.raises(GeometryError):
        SolverConfig(dt=0.7)


def test_zero_state_zero_kick_is_fixed_point(domain, model, solver):
    out = solve_period(VelocityField.zero(domain), None, model, solver)
    assert field_norms(out)[0] == 0.0


def test_period_preserves_divergence(domain, model, solver):
    u0 = random_solenoidal_field(domain, 0.02, substream(31))
    kick = sample_kick(model, substream(32))
    out = solve_period(u0, kick, model, solver)
    assert relative_divergence(out) < 1e-10


def test_batch_matches_single(domain, model, solver):
    rng = substream(33)
    fields = [random_solenoidal_field(domain, 0.01, rng) for _ in range(3)]
    kicks = np.stack([sample_kick(model, rng).xi for _ in range(3)])
    batch = solve_period_batch(FieldBatch.from_fields(fields), kicks, model, solver)
    for i, f in enumerate(fields):
        single = solve_period(f, kicks[i], model, solver)
        assert np.array_equal(batch.u[i], single.u)
        assert np.array_equal(batch.v[i], single.v)


def test_unforced_flow_decays(domain, model, solver):
    u0 = random_solenoidal_field(domain, 0.05, substream(34))
    out = solve_period(u0, None, model, solver)
    assert field_norms(out)[0] < field_norms(u0)[0]


def test_cfl_guard_triggers(domain, model):
    cfg = SolverConfig(dt=0.05)
    wild = random_solenoidal_field(domain, 5.0, substream(35))
    with pytest.raises(CflError):
        solve_period(wild, None, model, cfg)


def test_dissipation_fit(domain, model, solver_fine, dissipation):
    est = dissipation
    assert 0 < est.kappa < 1
    assert est.forcing_gain > 0
    assert est.satisfied_fraction >= 0.99
    assert est.ball_radius > 0


def test_validation_on_fresh_pairs(domain, model, solver_fine, dissipation):
    val = validate_dissipation(dissipation, domain, model, solver_fine, 64, seed=77)
    assert val.ok
    assert val.rows.shape == (64, 4)


def test_kappa_tracks_stokes_decay(domain, dissipation):
    # one viscous period cannot beat the slowest Stokes mode by much
    from kickflow.grid_field import stokes_basis
    lam1 = stokes_basis(domain, 1).eigenvalues[0]
    assert dissipation.kappa == pytest.approx(np.exp(-lam1), rel=0.05)
