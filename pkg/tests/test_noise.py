import numpy as np
import pytest

from kickflow.errors import GeometryError, NoiseModelError
from kickflow.noise import (
    KickRealization,
    build_model,
    coefficient_cdf,
    coefficient_density,
    coefficient_quantile,
    eval_kick,
    kick_ball_probability,
    kick_h1_norm,
    kick_l2_distance,
    kick_radius,
    power_law_amplitudes,
    sample_kick,
    sample_kick_batch,
)
from kickflow.streams import substream


def test_model_validation():
    with pytest.raises(GeometryError):
        build_model(window=(0.0, 0.75, 0.25, 0.5, 0.25, 0.5))  # touches the boundary
    with pytest.raises(NoiseModelError):
        build_model(density_exponent=1)
    with pytest.raises(NoiseModelError):
        build_model(amplitudes=[-0.1] + [0.1] * 15)


def test_amplitude_profile():
    amps = power_law_amplitudes(4, scale=0.2, power=1.0)
    assert np.allclose(amps, [0.2, 0.1, 0.2 / 3, 0.05])


def test_coefficients_bounded(model):
    rng = substream(21)
    for _ in range(100):
        k = sample_kick(model, rng)
        assert np.all(np.abs(k.xi) < 1.0)


def test_batch_matches_sequential(model):
    rngs = [substream(5, 1, i) for i in range(4)]
    batch = sample_kick_batch(model, rngs)
    redo = [sample_kick(model, substream(5, 1, i)).xi for i in range(4)]
    assert np.array_equal(batch, np.stack(redo))


def test_density_cdf_quantile_consistency():
    x = np.linspace(-0.999, 0.999, 41)
    u = coefficient_cdf(x, p=2)
    back = coefficient_quantile(u, p=2)
    assert np.allclose(back, x, atol=1e-9)
    # density integrates to one
    grid = np.linspace(-1, 1, 20001)
    mass = np.trapezoid(coefficient_density(grid, p=3), grid)
    assert mass == pytest.approx(1.0, abs=1e-6)


def test_kick_vanishes_outside_window(model, domain):
    rng = substream(2)
    k = sample_kick(model, rng)
    t0, t1 = model.window[0], model.window[1]
    for t in (0.5 * t0, t1 + 0.5 * (1 - t1), 0.0, 0.99):
        f = eval_kick(model, k, t, domain)
        assert np.all(f.u == 0.0) and np.all(f.v == 0.0)


def test_kick_spatial_support(model, domain):
    rng = substream(3)
    k = sample_kick(model, rng)
    t = 0.5 * (model.window[0] + model.window[1])
    f = eval_kick(model, k, t, domain)
    assert np.any(f.u != 0.0) or np.any(f.v != 0.0)
    x0, x1 = model.window[2], model.window[3]
    y0, y1 = model.window[4], model.window[5]
    xs_u = np.arange(domain.nx + 1) * domain.dx
    ys_u = (np.arange(domain.ny) + 0.5) * domain.dy
    outside_u = (xs_u[None, :] <= x0) | (xs_u[None, :] >= x1) | \
                (ys_u[:, None] <= y0) | (ys_u[:, None] >= y1)
    assert np.all(f.u[outside_u] == 0.0)


def test_kick_norm_below_radius(model):
    rng = substream(4)
    bound = kick_radius(model)
    zero = np.zeros(model.n_modes)
    for _ in range(200):
        k = sample_kick(model, rng)
        assert kick_l2_distance(model, k.xi, zero) <= bound + 1e-10


def test_h1_norm_positive(model):
    k = sample_kick(model, substream(6))
    assert kick_h1_norm(model, k.xi) > 0


def test_kick_realization_validation(model):
    # out-of-cube vectors are legal (controlled kicks can leave the cube),
    # non-finite ones are not
    KickRealization(np.full(model.n_modes, 1.5))
    with pytest.raises(NoiseModelError):
        KickRealization(np.array([0.1, np.inf]))


def test_ball_probability_product_structure(model):
    # hitting two slots is as hard as hitting each separately
    rng = substream(8)
    target = np.zeros((1, model.n_modes))
    r = 0.6 * kick_radius(model)
    p1, _ = kick_ball_probability(model, target, r, 4000, substream(8))
    p2, _ = kick_ball_probability(model, np.repeat(target, 2, axis=0), r, 4000,
                                  substream(9))
    assert p1 > 0
    assert p2 == pytest.approx(p1 * p1, abs=4 * np.sqrt(p1 * p1 / 4000) + 0.02)
