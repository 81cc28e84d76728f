import csv

import numpy as np
import pytest
from scipy.stats import norm

from bassdecomp.bassim import (BassModel, PathBundle, energy_distance, energy_test, pushforward_sample,
                               simulate, uniform_grid, verify_marginals, verify_martingale,
                               verify_value)
from bassdecomp.convexfn import MCConfig, PwaPotential
from bassdecomp.measures import DiscreteMeasure
from bassdecomp.paving import decompose


@pytest.fixture(scope="module")
def two_point():
    """delta_0 -> (delta_-1 + delta_1)/2: M_t = 2 Phi(B_t / sqrt(1 - t)) - 1, alpha = delta_0."""
    nu = DiscreteMeasure([-1.0, 1.0], [0.5, 0.5])
    model = BassModel(PwaPotential(nu.atoms, np.zeros(2)), DiscreteMeasure.dirac([0.0]))
    return model, DiscreteMeasure.dirac([0.0]), nu


@pytest.fixture(scope="module")
def two_point_bundle(two_point):
    return simulate(two_point[0], 20000, uniform_grid(32), seed=3)


@pytest.fixture(scope="module")
def small_ex():
    """Irreducible two-source pair fitted by the full pipeline."""
    mu = DiscreteMeasure([-0.5, 0.5], [0.5, 0.5])
    nu = DiscreteMeasure([-2.0, -0.5, 0.5, 2.0], [0.15, 0.35, 0.35, 0.15])
    out = decompose(mu, nu)
    assert len(out.components) == 1
    return out.components[0]


class TestClosedForm:
    def test_paths_match_formula(self, two_point_bundle):
        pb = two_point_bundle
        t = pb.times[:-1]
        expected = 2 * norm.cdf(pb.brownian[:, :-1, 0] / np.sqrt(1 - t)) - 1
        np.testing.assert_allclose(pb.states[:, :-1, 0], expected, atol=1e-12)
        np.testing.assert_array_equal(pb.states[:, -1, 0], np.sign(pb.brownian[:, -1, 0]))

    def test_terminal_variance(self, two_point_bundle):
        pb = two_point_bundle
        m = pb.states[:, :-1, 0]
        np.testing.assert_allclose(pb.terminal_var[:, :, 0], 1 - m ** 2, atol=1e-12)

    def test_trace_is_left_riemann_sum(self, two_point_bundle):
        pb = two_point_bundle
        t = pb.times[:-1]
        s = np.sqrt(1 - t)
        hess = 2 * norm.pdf(pb.brownian[:, :-1, 0] / s) / s
        np.testing.assert_allclose(pb.trace_estimates, hess @ np.diff(pb.times), rtol=1e-12)

    def test_checks_pass(self, two_point, two_point_bundle):
        model, mu, nu = two_point
        pb = two_point_bundle
        assert verify_marginals(pb, model, mu, nu)["passed"]
        assert verify_martingale(pb)["passed"]
        assert verify_value(pb, np.sqrt(2 / np.pi))["passed"]

    def test_value_check_rejects_wrong_target(self, two_point_bundle):
        assert not verify_value(two_point_bundle, np.sqrt(2 / np.pi) + 0.2)["passed"]
        with pytest.raises(ValueError):
            verify_value(PathBundle(uniform_grid(4), *([None] * 5)), 1.0)


class TestPlantedFailures:
    def test_shifted_alpha_fails_marginals(self, two_point):
        model, mu, nu = two_point
        bad = BassModel(model.v_potential, DiscreteMeasure.dirac([0.3]))
        pb = simulate(bad, 20000, uniform_grid(16), seed=4)
        rep = verify_marginals(pb, bad, mu, nu)
        assert not rep["passed"]
        assert rep["start_deviation"] > 0.1

    def test_drift_fails_martingale(self, two_point_bundle):
        pb = two_point_bundle
        drifted = pb.states + 0.05 * pb.times[None, :, None]
        bad = PathBundle(pb.times, drifted, pb.brownian, pb.trace_estimates, pb.start, pb.terminal,
                         pb.terminal_var)
        rep = verify_martingale(bad)
        assert not rep["passed"] and rep["z_max"] > rep["z_critical"]

    def test_wrong_terminal_law_fails(self, two_point):
        model, mu, _ = two_point
        pb = simulate(model, 20000, uniform_grid(16), seed=5)
        skew = DiscreteMeasure([-1.0, 1.0], [0.45, 0.55])
        assert not verify_marginals(pb, model, mu, skew)["passed"]


class TestFittedModel:
    def test_full_checks(self, small_ex):
        c = small_ex
        pb = simulate(c.bass, 20000, uniform_grid(32), seed=6)
        assert verify_marginals(pb, c.bass, c.mu_local, c.nu_local)["passed"]
        assert verify_martingale(pb)["passed"]
        assert verify_value(pb, c.primal_value)["passed"]

    def test_moments_agree_with_evaluate(self, small_ex):
        model = small_ex.bass
        B = np.random.default_rng(0).normal(size=(300, 1)) * 2
        for s in (1.0, 0.25, 1e-3):
            sm = model.smoother(s)
            g, h, sec = sm.moments(B)
            ref = sm.evaluate(B, ("grad", "hess", "mass"))
            np.testing.assert_allclose(g, ref["grad"], atol=1e-12)
            np.testing.assert_allclose(h.reshape(len(B), -1), ref["hess"].reshape(len(B), -1), atol=1e-12)
            np.testing.assert_allclose(sec, ref["mass"] @ model.atoms ** 2, atol=1e-12)

    def test_moments_in_the_plane(self):
        atoms = np.array([[1.0, 0.0], [0.0, 1.0], [-1.0, 0.0], [0.0, -1.0], [0.0, 0.0]])
        psi = PwaPotential(atoms, np.array([0.5, 0.5, 0.5, 0.5, 0.1]))
        model = BassModel(psi, DiscreteMeasure.dirac([0.0, 0.0]))
        sm = model.smoother(0.5, MCConfig(samples=256, seed=1))
        B = np.random.default_rng(1).normal(size=(50, 2))
        g, h, sec = sm.moments(B)
        ref = sm.evaluate(B, ("grad", "hess", "mass"))
        np.testing.assert_allclose(g, ref["grad"], atol=1e-12)
        np.testing.assert_allclose(h, ref["hess"], atol=1e-12)
        np.testing.assert_allclose(sec, ref["mass"] @ atoms ** 2, atol=1e-12)

    def test_terminal_law_energy(self, small_ex):
        c = small_ex
        pb = simulate(c.bass, 3000, uniform_grid(16), seed=9)
        rng = np.random.default_rng(10)
        ref = c.nu_local.atoms[rng.choice(len(c.nu_local), 3000, p=c.nu_local.weights)]
        assert energy_test(pb.states[:, -1], ref, n_perm=100)["passed"]
        assert not energy_test(pb.states[:, -1] + 0.3, ref, n_perm=100)["passed"]

    def test_law_of_m_t_matches_pushforward(self, small_ex):
        model = small_ex.bass
        pb = simulate(model, 3000, uniform_grid(16), seed=7)
        k = 8
        direct = pushforward_sample(model, pb.times[k], 3000, seed=8)
        assert energy_test(pb.states[:, k], direct, n_perm=100)["passed"]


class TestSimulateContract:
    def test_single_atom_model_is_constant(self):
        model = BassModel(PwaPotential(np.array([[2.0]]), np.zeros(1)), DiscreteMeasure.dirac([0.0]))
        pb = simulate(model, 100, uniform_grid(8))
        assert np.all(pb.states == 2.0)
        assert np.all(pb.trace_estimates == 0.0)
        assert verify_martingale(pb)["passed"]

    def test_seed_determinism(self, two_point):
        a = simulate(two_point[0], 500, uniform_grid(8), seed=11)
        b = simulate(two_point[0], 500, uniform_grid(8), seed=11)
        c = simulate(two_point[0], 500, uniform_grid(8), seed=12)
        assert np.array_equal(a.states, b.states)
        assert not np.array_equal(a.states, c.states)

    def test_bad_grid(self, two_point):
        with pytest.raises(ValueError):
            simulate(two_point[0], 10, [0.0, 0.5])
        with pytest.raises(ValueError):
            simulate(two_point[0], 10, [0.0, 0.6, 0.5, 1.0])

    def test_csv_export(self, two_point_bundle, tmp_path):
        path = tmp_path / "paths.csv"
        two_point_bundle.to_csv(path, max_paths=3)
        rows = list(csv.reader(open(path)))
        assert rows[0] == ["time", "path", "m0"]
        assert len(rows) == 1 + 3 * len(two_point_bundle.times)
        assert float(rows[1][2]) == two_point_bundle.states[0, 0, 0]

    def test_model_json_round_trip(self, small_ex):
        back = BassModel.from_json(small_ex.bass.to_json())
        assert np.array_equal(back.v_potential.values, small_ex.bass.v_potential.values)
        assert np.array_equal(back.alpha.atoms, small_ex.bass.alpha.atoms)


def test_energy_statistics():
    rng = np.random.default_rng(9)
    x = rng.normal(size=(400, 1))
    assert energy_distance(x, x) == pytest.approx(0.0, abs=1e-12)
    assert energy_test(x, rng.normal(size=(400, 1)), n_perm=100)["passed"]
    assert not energy_test(x, rng.normal(size=(400, 1)) + 0.5, n_perm=100)["passed"]
