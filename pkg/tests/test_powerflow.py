import numpy as np
import pytest

from voltvar import powerflow as pf
from voltvar.netmodel import NodePhase, ZipLoad
from voltvar.verify import four_bus_case, gauss_seidel_solve, two_bus_case, two_bus_voltage

TWO_BUS_V2 = 0.984490759986540  # closed-form |V2| for z=0.01+0.05j, s=0.5+0.2j


def solve_case(case, tol=1e-10, fixed=None):
    system = pf.build_admittance(case)
    inj = pf.InjectionSet.build(system, case.loads, fixed)
    return pf.solve(system, inj, tol=tol), system


class TestBuildAdmittance:
    def test_two_bus_reciprocal(self):
        case = two_bus_case(r=0.0, x=0.1, p=0.0, q=0.0)
        system = pf.build_admittance(case)
        assert system.dim == 1
        # the factorized 1x1 block is the branch admittance itself
        assert np.isclose(system.lu[0][0, 0], 1.0 / 0.1j)

    def test_bundled_dimension(self, bundled_case):
        system = pf.build_admittance(bundled_case)
        non_slack_phases = sum(
            len(p) for n, p in bundled_case.nodes.items() if n != bundled_case.slack
        )
        assert system.dim == non_slack_phases == 96

    def test_zero_impedance_branch_rejected(self):
        case = two_bus_case(r=0.0, x=0.0)
        with pytest.raises(pf.SingularNetworkError):
            pf.build_admittance(case)


class TestZipPower:
    def test_constant_power_ignores_voltage(self):
        ld = ZipLoad(NodePhase(2, "A"), 0.5 + 0.2j, (0, 0, 1), (0, 0, 1))
        for v in (1.0, 0.9 + 0.1j, 1.1):
            assert pf.zip_power(ld, v) == pytest.approx(0.5 + 0.2j)

    def test_constant_impedance_quadratic(self):
        ld = ZipLoad(NodePhase(2, "A"), 1 + 0j, (1, 0, 0), (1, 0, 0))
        assert pf.zip_power(ld, 0.9).real == pytest.approx(0.81)

    def test_mixed_triple_factor(self):
        # 0.2*0.95^2 + 0.3*0.95 + 0.5 = 0.9655
        ld = ZipLoad(NodePhase(2, "A"), 2 + 1j, (0.2, 0.3, 0.5), (0.2, 0.3, 0.5))
        s = pf.zip_power(ld, 0.95)
        assert s.real == pytest.approx(2 * 0.9655, abs=1e-12)
        assert s.imag == pytest.approx(1 * 0.9655, abs=1e-12)

    def test_nominal_voltage_returns_s0(self):
        ld = ZipLoad(NodePhase(2, "A"), 0.7 + 0.3j, (0.4, 0.3, 0.3), (0.1, 0.2, 0.7))
        assert pf.zip_power(ld, np.exp(1j * 2.1)) == pytest.approx(0.7 + 0.3j, abs=1e-15)

    def test_zero_voltage_rejected(self):
        ld = ZipLoad(NodePhase(2, "A"), 1 + 0j, (0, 0, 1), (0, 0, 1))
        with pytest.raises(ValueError):
            pf.zip_power(ld, 0.0)


class TestSolve:
    def test_no_load_network_is_flat(self, bundled_case):
        system = pf.build_admittance(bundled_case)
        inj = pf.InjectionSet.build(system, [])
        sol = pf.solve(system, inj)
        assert sol.iterations == 1
        assert np.allclose(np.abs(sol.v), 1.0, atol=1e-12)

    def test_two_bus_matches_closed_form(self):
        sol, _ = solve_case(two_bus_case(), tol=1e-12)
        assert abs(sol.v[0]) == pytest.approx(TWO_BUS_V2, abs=1e-8)
        assert abs(abs(sol.v[0]) - two_bus_voltage(0.01, 0.05, 0.5, 0.2)) < 1e-10

    def test_constant_impedance_equals_direct_linear_solve(self):
        r, x, p, q = 0.01, 0.05, 0.5, 0.2
        case = two_bus_case(r, x, p, q, zip_p=(1, 0, 0), zip_q=(1, 0, 0))
        sol, _ = solve_case(case, tol=1e-13)
        y = 1.0 / complex(r, x)
        v_direct = y / (y + np.conj(complex(p, q)))
        assert abs(sol.v[0] - v_direct) < 1e-10

    def test_four_bus_matches_gauss_seidel_oracle(self):
        case = four_bus_case()
        sol, _ = solve_case(case, tol=1e-12)
        oracle = gauss_seidel_solve(case, tol=1e-12)
        for np_ in case.node_phases:
            assert abs(sol.voltage(np_) - oracle[np_]) < 1e-6

    def test_power_balance_via_branch_sum(self, bundled_case):
        sol, _ = solve_case(bundled_case, tol=1e-12)
        assert abs(sol.loss_total - pf.branch_losses(bundled_case, sol)) < 1e-8

    def test_converged_residual_re_evaluated(self, bundled_case):
        system = pf.build_admittance(bundled_case)
        inj = pf.InjectionSet.build(system, bundled_case.loads)
        sol = pf.solve(system, inj, tol=1e-8)
        # one more fixed-point application moves the solution less than tol
        from scipy.linalg import lu_solve

        i_inj = np.conj(inj.power(sol.v) / sol.v)
        v_next = lu_solve(system.lu, i_inj - system.y_ns @ system.v_slack)
        assert np.max(np.abs(v_next - sol.v)) <= 1e-8

    def test_slack_voltages_exact(self, bundled_case):
        sol, system = solve_case(bundled_case)
        for i, np_ in enumerate(system.slack_order):
            assert sol.voltage(np_) == system.v_slack[i]

    def test_monotone_load_increase_drops_local_voltage(self, bundled_case):
        system = pf.build_admittance(bundled_case)
        target = NodePhase(18, "B")
        mags = []
        for scale in (1.0, 1.2, 1.4):
            loads = [
                ZipLoad(ld.location, ld.s0 * scale, ld.zip_p, ld.zip_q)
                if ld.location == target
                else ld
                for ld in bundled_case.loads
            ]
            sol = pf.solve(system, pf.InjectionSet.build(system, loads))
            mags.append(abs(sol.voltage(target)))
        assert mags[0] >= mags[1] >= mags[2]

    def test_nonconvergence_raises_with_residual(self):
        case = two_bus_case(p=30.0, q=10.0)  # far beyond deliverable power
        system = pf.build_admittance(case)
        inj = pf.InjectionSet.build(system, case.loads)
        with pytest.raises(pf.PowerFlowError) as ei:
            pf.solve(system, inj, max_iter=50)
        assert np.isfinite(ei.value.residual) and ei.value.residual > 1e-8

    def test_injection_raises_voltage(self):
        case = two_bus_case()
        system = pf.build_admittance(case)
        sol0 = pf.solve(system, pf.InjectionSet.build(system, case.loads))
        fixed = {NodePhase(2, "A"): 0.0 + 0.3j}
        sol1 = pf.solve(system, pf.InjectionSet.build(system, case.loads, fixed))
        assert abs(sol1.v[0]) > abs(sol0.v[0])


class TestMeasure:
    def test_noiseless_exact(self, bundled_case, rng):
        sol, _ = solve_case(bundled_case)
        v = pf.measure(sol, bundled_case, 0.0, rng)
        assert np.array_equal(v, sol.magnitudes(bundled_case.monitored))
        assert v.shape == (len(bundled_case.monitored),)

    def test_noise_statistics(self, bundled_case):
        sol, _ = solve_case(bundled_case)
        clean = sol.magnitudes(bundled_case.monitored)
        rng = np.random.default_rng(99)
        draws = np.array(
            [pf.measure(sol, bundled_case, 0.001, rng) - clean for _ in range(4000)]
        )
        flat = draws.ravel()  # 4000 * 27 > 1e5 samples
        assert flat.size > 100_000
        assert abs(flat.mean()) < 1e-4
        assert abs(flat.var() - 1e-6) < 0.05e-6

    def test_seed_determinism(self, bundled_case):
        sol, _ = solve_case(bundled_case)
        a = pf.measure(sol, bundled_case, 0.001, np.random.default_rng(5))
        b = pf.measure(sol, bundled_case, 0.001, np.random.default_rng(5))
        assert np.array_equal(a, b)
