import json

import numpy as np
import pytest
from hypothesis import given
from scipy.optimize import linprog

from bassdecomp import motlp
from bassdecomp.dualsolve import solve_dual
from bassdecomp.errors import (CrossLeak, InfeasibleError, MeasureError, NonConvergence,
                               PavingDisagreement)
from bassdecomp.examples import circles, random_split_pair
from bassdecomp.measures import Coupling, DiscreteMeasure
from bassdecomp.paving import (DecomposeConfig, DivergenceConfig, PavingResult, compare_partitions,
                               decompose, disintegrate, divergence_statistics, pave_dual_divergence,
                               pave_lp, pave_potential_1d, reconstruction_error)
from strategies import split_pairs


def _random_mt_coupling(mu, nu, rng):
    """A vertex of MT(mu, nu) under a random linear cost, from HiGHS."""
    mt = motlp.MtPolytope(mu, nu)
    res = linprog(rng.normal(size=mt.A.shape[1]), A_eq=mt.A, b_eq=mt.b, bounds=(0, None),
                  method="highs")
    assert res.status == 0
    return res.x.reshape(len(mu), len(nu))


def _grid_instance(rng):
    return random_split_pair(rng, 4, 12, grid=0.25, keep_prob=0.15)


class TestRoutesAgree:
    @given(split_pairs(n_mu=4, max_nu=10, grid=0.25))
    def test_lp_and_potential(self, pair):
        mu, nu = pair
        assert compare_partitions(pave_lp(mu, nu), pave_potential_1d(mu, nu))["agree"]

    def test_all_three_on_grid_instances(self):
        rng = np.random.default_rng(77)
        for _ in range(30):
            mu, nu = _grid_instance(rng)
            lp = pave_lp(mu, nu)
            trace, _ = solve_dual(mu, nu)
            assert compare_partitions(lp, pave_potential_1d(mu, nu))["agree"]
            assert compare_partitions(lp, pave_dual_divergence(trace, mu, nu))["agree"]

    def test_known_split(self):
        # two disjoint splits -> two components with the obvious cells
        mu = DiscreteMeasure([-2.0, 2.0], [0.5, 0.5])
        nu = DiscreteMeasure([-3.0, -1.0, 1.0, 3.0], [0.25] * 4)
        for p in (pave_lp(mu, nu), pave_potential_1d(mu, nu)):
            assert p.partition() == {frozenset({0}), frozenset({1})}
            cells = sorted(tuple(sorted(c.cell.vertices[:, 0])) for c in p.components)
            assert cells == [(-3.0, -1.0), (1.0, 3.0)]
            assert [c.kappa_weight for c in p.components] == [0.5, 0.5]

    def test_contact_point_splits(self):
        # u_nu - u_mu vanishes at the shared atom 0, which no martingale crosses
        mu = DiscreteMeasure([-1.0, 1.0], [0.5, 0.5])
        nu = DiscreteMeasure([-2.0, 0.0, 2.0], [0.25, 0.5, 0.25])
        assert pave_potential_1d(mu, nu).partition() == {frozenset({0}), frozenset({1})}
        assert pave_lp(mu, nu).partition() == {frozenset({0}), frozenset({1})}

    def test_fixed_atom_is_point_component(self):
        mu = DiscreteMeasure([0.0, 5.0], [0.5, 0.5])
        nu = DiscreteMeasure([-1.0, 1.0, 5.0], [0.25, 0.25, 0.5])
        p = pave_potential_1d(mu, nu)
        assert p.components[p.component_of(1)].cell.kind == "point"
        assert compare_partitions(p, pave_lp(mu, nu))["agree"]

    def test_infeasible_and_planar_rejections(self):
        mu = DiscreteMeasure([-1.0, 1.0], [0.5, 0.5])
        nu = DiscreteMeasure([0.0], [1.0])
        with pytest.raises(InfeasibleError):
            pave_lp(mu, nu)
        with pytest.raises(InfeasibleError):
            pave_potential_1d(mu, nu)
        with pytest.raises(MeasureError):
            pave_potential_1d(*circles(6, 1.5))


def test_support_inclusion_on_20_random_couplings():
    """Every martingale coupling lives on the closed cells of the paving."""
    rng = np.random.default_rng(17)
    checked = 0
    while checked < 20:
        mu, nu = _grid_instance(rng)
        paving = pave_potential_1d(mu, nu)
        if len(paving.components) < 2 and rng.random() < 0.7:
            continue
        mass = _random_mt_coupling(mu, nu, rng)
        for i, j in zip(*np.nonzero(mass > 1e-9)):
            cell = paving.components[paving.component_of(i)].cell
            assert cell.closure_contains(nu.atoms[j]), (i, j)
            assert j in paving.components[paving.component_of(i)].nu_indices
        checked += 1


class TestDivergence:
    def test_statistics_separate_ex_pair(self):
        mu = DiscreteMeasure([-2.0, 2.0], [0.5, 0.5])
        nu = DiscreteMeasure([-3.0, -1.0, 1.0, 3.0], [0.25] * 4)
        trace, _ = solve_dual(mu, nu)
        stat = divergence_statistics(trace, mu, nu)
        M = DivergenceConfig().threshold
        assert stat[0, :2].max() <= M < stat[0, 2:].min()
        assert stat[1, 2:].max() <= M < stat[1, :2].min()

    def test_trivial_trace(self):
        m = DiscreteMeasure([-1.0, 2.0], [0.3, 0.7])
        trace, _ = solve_dual(m, m)
        p = pave_dual_divergence(trace, m, m)
        assert p.partition() == {frozenset({0}), frozenset({1})}


class TestDisintegrate:
    def test_reconstruction(self):
        rng = np.random.default_rng(5)
        for _ in range(10):
            mu, nu = _grid_instance(rng)
            p = pave_lp(mu, nu)
            pi = Coupling(_random_mt_coupling(mu, nu, rng))
            out = disintegrate(p, pi)
            assert max(reconstruction_error(out)) <= 1e-9
            for c in out.components:
                assert c.mu_local.barycenter == pytest.approx(c.nu_local.barycenter, abs=1e-9)
            assert out.stats["leak"] <= 1e-12

    def test_cross_leak(self):
        mu = DiscreteMeasure([-2.0, 2.0], [0.5, 0.5])
        nu = DiscreteMeasure([-3.0, -1.0, 1.0, 3.0], [0.25] * 4)
        p = pave_lp(mu, nu)
        bad = np.array([[0.2, 0.25, 0.0, 0.05], [0.05, 0.0, 0.25, 0.2]])
        with pytest.raises(CrossLeak):
            disintegrate(p, Coupling(bad))


class TestDecompose:
    def test_irreducible_pair_is_one_component(self):
        mu = DiscreteMeasure([0.0], [1.0])
        nu = DiscreteMeasure([-2.0, 0.0, 2.0], [0.25, 0.5, 0.25])
        out = decompose(mu, nu)
        assert len(out.components) == 1
        c = out.components[0]
        assert c.irreducible and abs(c.gap) < 1e-6
        assert c.primal_value == pytest.approx(out.stats["state"].primal_value, abs=1e-12)

    def test_two_components_and_json_round_trip(self):
        mu = DiscreteMeasure([-2.0, 2.0], [0.5, 0.5])
        nu = DiscreteMeasure([-3.0, -1.0, 1.0, 3.0], [0.25] * 4)
        out = decompose(mu, nu)
        assert len(out.components) == 2
        # each component is the two-point problem shifted, value sqrt(2/pi)
        for c in out.components:
            assert c.primal_value == pytest.approx(np.sqrt(2 / np.pi), abs=1e-9)
            assert c.irreducible
        back = PavingResult.from_json(json.loads(out.dumps()))
        assert back.partition() == out.partition()
        for a, b in zip(out.components, back.components):
            assert a.cell.same_as(b.cell)
            assert np.array_equal(a.bass.v_potential.values, b.bass.v_potential.values)
            assert np.array_equal(a.nu_local.weights, b.nu_local.weights)
        assert back.dumps() == out.dumps()

    def test_disagreement_is_raised(self):
        mu = DiscreteMeasure([-2.0, 2.0], [0.5, 0.5])
        nu = DiscreteMeasure([-3.0, -1.0, 1.0, 3.0], [0.25] * 4)
        # a threshold below any drift labels every atom divergent
        cfg = DecomposeConfig(divergence=DivergenceConfig(threshold=-1.0))
        with pytest.raises(NonConvergence):
            decompose(mu, nu, cfg)
        # a huge threshold merges the two sides
        cfg = DecomposeConfig(divergence=DivergenceConfig(threshold=1e6))
        with pytest.raises(PavingDisagreement):
            decompose(mu, nu, cfg)

    def test_infeasible(self):
        with pytest.raises(InfeasibleError):
            decompose(DiscreteMeasure([-1.0, 1.0], [0.5, 0.5]), DiscreteMeasure([0.0], [1.0]))
