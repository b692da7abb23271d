import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from sdediscover.sde import (
    BasisExpansion,
    BasisTerm,
    DimensionMismatchError,
    DivergenceError,
    Ensemble,
    SdeModel,
    add_measurement_noise,
    builtin_system,
    child_seed,
    euler_maruyama,
    evaluate_basis,
    load_model,
    read_ensemble,
    save_model,
    simulate_ensemble,
    steps_for,
    write_ensemble,
)

C = BasisTerm.constant()


def scalar_model(drift: dict, diff: dict, m=1):
    return SdeModel(m, [BasisExpansion.from_dict(m, drift)], [BasisExpansion.from_dict(m, diff)])


def test_evaluate_basis_examples():
    assert evaluate_basis(BasisTerm.monomial(0, 0, 0), [2.0, 5.0]) == 8.0
    assert evaluate_basis(BasisTerm("signum", (0,)), [0.0, 1.0]) == 0.0
    assert evaluate_basis(BasisTerm("x_abs_x", (0,)), [-3.0, 1.0]) == -9.0
    assert evaluate_basis(BasisTerm.monomial(0, 1), [2.0, 5.0]) == 10.0
    assert evaluate_basis(C, [7.0]) == 1.0
    assert evaluate_basis(BasisTerm("cosine", (1,)), [0.0, 0.0]) == 1.0


def test_evaluate_basis_index_out_of_range():
    with pytest.raises(DimensionMismatchError):
        evaluate_basis(BasisTerm.monomial(2), [1.0, 2.0])


def test_basis_term_invariants():
    with pytest.raises(ValueError):
        BasisTerm("monomial", ())
    with pytest.raises(ValueError):
        BasisTerm("constant", (0,))
    assert BasisTerm.monomial(2, 0, 0).indices == (0, 0, 2)
    assert BasisTerm.monomial(0, 0, 2).name == "x1^2*x3"
    t, w = BasisTerm.from_record(BasisTerm.monomial(1, 1).to_record(3.5))
    assert t == BasisTerm.monomial(1, 1) and w == 3.5


@settings(max_examples=50, deadline=None)
@given(
    a=st.floats(-10, 10),
    b=st.floats(-10, 10),
    x=st.lists(st.floats(-3, 3), min_size=2, max_size=2),
)
def test_expansion_linear_in_weights(a, b, x):
    terms = [C, BasisTerm.monomial(0), BasisTerm.monomial(0, 1, 1), BasisTerm("sine", (1,))]
    th1 = np.array([0.3, -1.2, 2.0, 0.7])
    th2 = np.array([1.1, 0.4, -0.5, 3.0])
    ev = lambda th: BasisExpansion(2, tuple(zip(terms, th))).evaluate(np.array(x))
    assert ev(a * th1 + b * th2) == pytest.approx(a * ev(th1) + b * ev(th2), rel=1e-12, abs=1e-9)


def test_empty_expansion_is_zero():
    e = BasisExpansion.zero(3)
    assert e.is_zero
    assert np.all(e.evaluate(np.ones((4, 3))) == 0)


def test_model_validation():
    e = BasisExpansion.zero(2)
    with pytest.raises(DimensionMismatchError):
        SdeModel(2, [e], [e, e])
    with pytest.raises(ValueError):
        SdeModel(2, [e, e], [BasisExpansion.from_dict(2, {C: 1.0}), e], kinematic=(0,))


def test_stationary_path():
    m = SdeModel(2, [BasisExpansion.zero(2)] * 2, [BasisExpansion.zero(2)] * 2)
    tr = euler_maruyama(m, [1.0, 2.0], 0.01, 50, seed=3)
    assert tr.states.shape == (51, 2)
    assert np.all(tr.states == [1.0, 2.0])


def test_decay_matches_euler_product():
    m = scalar_model({BasisTerm.monomial(0): -1.0}, {})
    tr = euler_maruyama(m, [1.0], 0.001, 1000, seed=0)
    assert abs(tr.states[-1, 0] - 0.999**1000) < 1e-12
    assert 0.999**1000 == pytest.approx(0.36770, abs=1e-5)


def test_brownian_variance():
    m = scalar_model({}, {C: 1.0})
    ens = simulate_ensemble(m, [0.0], 0.001, 1.0, 10_000, seed=11)
    assert ens.states[:, -1, 0].var() == pytest.approx(1.0, abs=0.05)


def test_ou_stationary_variance():
    theta, sigma = 1.0, 1.0
    m = scalar_model({BasisTerm.monomial(0): -theta}, {C: sigma})
    ens = simulate_ensemble(m, [0.0], 0.001, 5.0, 10_000, seed=5)
    # exact EM stationary variance sigma^2 dt / (1 - (1 - theta dt)^2); within 0.05% of sigma^2/(2 theta)
    assert ens.states[:, -1, 0].var() == pytest.approx(sigma**2 / (2 * theta), rel=0.05)


def test_divergence_names_step():
    m = scalar_model({BasisTerm.monomial(0, 0): 1.0}, {})
    with pytest.raises(DivergenceError) as ei:
        euler_maruyama(m, [1.0], 0.1, 200, seed=0)
    assert 0 < ei.value.step <= 200


def test_ensemble_consistency_and_determinism():
    model, x0 = builtin_system("duffing_sdof")
    a = simulate_ensemble(model, x0, 0.001, 0.2, 5, seed=42)
    b = simulate_ensemble(model, x0, 0.001, 0.2, 5, seed=42)
    assert np.array_equal(a.states, b.states)
    one = euler_maruyama(model, x0, 0.001, 200, child_seed(42, 0))
    assert np.array_equal(one.states, a.states[0])
    # path j does not depend on how many paths are simulated together
    c = simulate_ensemble(model, x0, 0.001, 0.2, 2, seed=42)
    assert np.array_equal(c.states, a.states[:2])


def test_duffing_ensemble_shape():
    model, x0 = builtin_system("duffing_sdof")
    ens = simulate_ensemble(model, x0, 0.001, 1.0, 500, seed=1)
    assert ens.states.shape == (500, 1001, 2)
    assert ens.n_paths == 500 and ens.n_samples == 1001 and ens.dim == 2


def test_horizon_must_be_whole_steps():
    assert steps_for(1.0, 0.001) == 1000
    with pytest.raises(ValueError):
        steps_for(1.0005, 0.001)


def test_builtin_duffing():
    model, x0 = builtin_system("duffing_sdof")
    d2 = model.drift[1]
    assert d2.weight(BasisTerm.monomial(0)) == -1000.0
    assert d2.weight(BasisTerm.monomial(1)) == -2.0
    assert d2.weight(BasisTerm.monomial(0, 0, 0)) == -100000.0
    assert model.diffusion[1].terms == ((C, 1.0),)
    assert model.diffusion[0].is_zero


def test_builtin_cubic_3dof():
    model, x0 = builtin_system("cubic_3dof")
    assert np.array_equal(x0, [0.05, 0, 0.01, 0, 0.01, 0])
    # force balance on mass 1: -(k1+k2) x1 + k2 x3 - alpha x1^3 - alpha (x1-x3)^3 with damping 2
    x = np.array([0.03, 0.4, -0.02, 0.1, 0.05, -0.3])
    x1, v1, x3, v3 = x[0], x[1], x[2], x[3]
    want = -1000 * x1 - 2000 * (x1 - x3) - 2 * v1 - 2 * (v1 - v3) - 1e5 * x1**3 - 1e5 * (x1 - x3) ** 3
    assert model.drift_at(x)[1] == pytest.approx(want, rel=1e-12)
    x5, v5 = x[4], x[5]
    want3 = -3000 * (x5 - x3) - 2 * (v5 - v3) - 1e5 * (x5 - x3) ** 3
    assert model.drift_at(x)[5] == pytest.approx(want3, rel=1e-12)
    assert np.array_equal(model.diffusion_at(x), [0, 1, 0, 1, 0, 1])


def test_builtin_tmd():
    model, x0 = builtin_system("tmd_5dof")
    assert model.dim == 12
    assert model.diffusion[11].is_zero
    assert np.array_equal(model.diffusion_at(np.zeros(12)), [0, 1] * 5 + [0, 0])
    # TMD row: -300 (x6 - x5) - 2 (v6 - v5)
    x = np.arange(12, dtype=float) / 100
    assert model.drift_at(x)[11] == pytest.approx(-300 * (x[10] - x[8]) - 2 * (x[11] - x[9]))


def test_unknown_builtin():
    with pytest.raises(ValueError):
        builtin_system("lorenz")


def test_noise_zero_percent_is_identity():
    model, x0 = builtin_system("duffing_sdof")
    ens = simulate_ensemble(model, x0, 0.001, 0.1, 3, seed=1)
    assert add_measurement_noise(ens, 0, seed=2) is ens


def test_noise_scale():
    rng = np.random.default_rng(0)
    states = rng.normal(0, 0.02, size=(500, 1000, 2))
    states[..., 1] = 0.0
    ens = Ensemble(0.001, states)
    noisy = add_measurement_noise(ens, 5, seed=9)
    added = (noisy.states - states)[..., 0]
    want = 0.05 * states[..., 0].std()
    assert added.std() == pytest.approx(want, rel=0.05)
    assert want == pytest.approx(0.001, rel=0.01)
    assert np.array_equal(noisy.states[..., 1], states[..., 1])


def test_noise_column_subset():
    rng = np.random.default_rng(1)
    ens = Ensemble(0.01, rng.normal(size=(4, 10, 3)))
    noisy = add_measurement_noise(ens, 5, seed=3, columns=[0, 2])
    assert np.array_equal(noisy.states[..., 1], ens.states[..., 1])
    assert not np.array_equal(noisy.states[..., 0], ens.states[..., 0])


def test_model_round_trip(tmp_path):
    model, _ = builtin_system("cubic_3dof")
    save_model(model, tmp_path / "m.json")
    back = load_model(tmp_path / "m.json")
    X = np.random.default_rng(0).normal(scale=0.1, size=(100, 6))
    assert np.array_equal(model.drift_at(X), back.drift_at(X))
    assert np.array_equal(model.diffusion_at(X), back.diffusion_at(X))
    rec = json.loads((tmp_path / "m.json").read_text())
    assert set(rec["drift"][1][0]) == {"kind", "indices", "degree", "weight"}


def test_ensemble_files_round_trip(tmp_path):
    model, x0 = builtin_system("duffing_sdof")
    ens = simulate_ensemble(model, x0, 0.001, 0.05, 3, seed=4)
    write_ensemble(ens, tmp_path, comment="config_hash=abc seed=4")
    lines = (tmp_path / "path_0.csv").read_text().splitlines()
    assert lines[0].startswith("#") and lines[1] == "t,x1,x2"
    back = read_ensemble(tmp_path)
    assert np.array_equal(back.states, ens.states)
    assert back.seed == 4 and back.dt == 0.001
