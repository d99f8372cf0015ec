import math

import numpy as np
import pytest
import scipy.linalg
from hypothesis import given, strategies as st

from conftest import affine_ocv, random_ocv
from obsbench.errors import DomainError, FormatError, ParameterError
from obsbench.model import (CellParams, Loadfile, OcvCurve, ParamMap, StateVector,
                            build_linear_system, discrete_matrices, ocv_eval, simulate,
                            step_euler, step_exact, terminal_voltage)
from obsbench.profiles import constant_profile, dst_profile, pulse_profile

positive = st.floats(1e-4, 1e4)


@st.composite
def cells(draw):
    return CellParams(
        r_ohm=draw(st.floats(1e-5, 1e-1)),
        r_a=draw(st.floats(1e-5, 1e-1)), c_a=draw(st.floats(1e2, 1e6)),
        r_b=draw(st.floats(1e-5, 1e-1)), c_b=draw(st.floats(1e3, 1e7)),
        capacity_c=draw(st.floats(3600.0, 1e6)), eta=draw(st.floats(0.9, 1.0)),
    )


class TestCellParams:
    @pytest.mark.parametrize("field", ["r_ohm", "r_a", "c_a", "r_b", "c_b", "capacity_c"])
    @pytest.mark.parametrize("bad", [0.0, -1.0, math.inf, math.nan])
    def test_rejects_non_positive_or_non_finite(self, small_cell, field, bad):
        with pytest.raises(ParameterError):
            small_cell.replace(**{field: bad})

    @pytest.mark.parametrize("eta", [0.0, 1.01, -0.5])
    def test_eta_range(self, small_cell, eta):
        with pytest.raises(ParameterError):
            small_cell.replace(eta=eta)

    def test_infinite_capacity_rejected(self, small_cell):
        # the C_t -> inf limit is not a valid cell
        with pytest.raises(ParameterError):
            small_cell.replace(capacity_c=math.inf)

    def test_time_constants(self, small_cell):
        assert small_cell.tau_a == 1.0
        assert small_cell.tau_b == 2.0

    def test_dict_round_trip(self, cell):
        assert CellParams.from_dict(cell.to_dict()) == cell

    def test_from_dict_rejects_unknown_field(self, cell):
        with pytest.raises(FormatError):
            CellParams.from_dict({**cell.to_dict(), "r_c": 1.0})

    def test_from_dict_rejects_non_numeric(self, cell):
        with pytest.raises(FormatError):
            CellParams.from_dict({**cell.to_dict(), "r_a": "abc"})


class TestOcvCurve:
    def test_must_cover_unit_interval(self):
        with pytest.raises(ParameterError):
            OcvCurve((0.1, 1.0), (3.0, 4.0))

    def test_must_be_increasing(self):
        with pytest.raises(ParameterError):
            OcvCurve((0.0, 0.5, 1.0), (3.0, 3.0, 4.0))
        with pytest.raises(ParameterError):
            OcvCurve((0.0, 0.5, 0.5, 1.0), (3.0, 3.1, 3.2, 4.0))

    def test_segment_slope_and_intercept(self):
        curve = OcvCurve((0.0, 0.5, 0.6, 1.0), (3.0, 3.6, 3.7, 4.0))
        assert curve.slopes[1] == pytest.approx(1.0, abs=1e-12)
        assert curve.intercepts[1] == pytest.approx(3.1, abs=1e-12)

    def test_mean_slope_is_chord(self, ocv):
        assert ocv.mean_slope == pytest.approx((ocv.ocv[-1] - ocv.ocv[0]))

    def test_inverse(self, ocv):
        for s in (0.05, 0.33, 0.5, 0.97):
            assert ocv.inverse(ocv(s)) == pytest.approx(s, abs=1e-12)

    def test_extended_matches_inside(self, ocv):
        for s in np.linspace(0, 1, 37):
            assert ocv.eval_extended(s) == pytest.approx(ocv(s), abs=1e-12)
        # beyond the ends the end segments continue
        assert ocv.eval_extended(1.1) > ocv(1.0)
        assert ocv.eval_extended(-0.1) < ocv(0.0)

    def test_dict_round_trip(self, ocv):
        assert OcvCurve.from_dict(ocv.to_dict()) == ocv

    def test_from_dict_malformed(self):
        with pytest.raises(FormatError):
            OcvCurve.from_dict({"points": []})


class TestOcvEval:
    def test_interior_value(self):
        curve = OcvCurve((0.0, 0.5, 0.6, 1.0), (3.0, 3.6, 3.7, 4.0))
        assert ocv_eval(curve, 0.55) == pytest.approx(3.65, abs=1e-12)

    def test_exact_at_breakpoints(self, ocv):
        for s, v in zip(ocv.soc, ocv.ocv):
            assert ocv_eval(ocv, s) == v

    @pytest.mark.parametrize("soc", [-1e-9, 1.0 + 1e-9, math.nan])
    def test_domain(self, ocv, soc):
        with pytest.raises(DomainError):
            ocv_eval(ocv, soc)

    def test_random_curve_against_scan_oracle(self):
        rng = np.random.default_rng(11)
        curve = random_ocv(rng, 101)
        soc, volt = curve.soc, curve.ocv
        queries = rng.uniform(0.0, 1.0, 10_000)

        def oracle(q):
            for j in range(len(soc) - 1):
                if soc[j] <= q <= soc[j + 1]:
                    w = (q - soc[j]) / (soc[j + 1] - soc[j])
                    return volt[j] + w * (volt[j + 1] - volt[j])
            raise AssertionError(q)

        got = np.array([ocv_eval(curve, q) for q in queries])
        want = np.array([oracle(q) for q in queries])
        assert np.max(np.abs(got - want)) < 1e-12


class TestLinearSystem:
    def test_substitution_example(self):
        p = CellParams(r_ohm=0.01, r_a=1.0, c_a=1.0, r_b=2.0, c_b=0.5, capacity_c=3600.0)
        sys = build_linear_system(p, affine_ocv(0.7), 0.5)
        np.testing.assert_allclose(sys.a, np.diag([-1.0, -1.0, 0.0]))
        np.testing.assert_allclose(sys.b, [1.0, 2.0, 1 / 3600])
        np.testing.assert_allclose(sys.c, [1.0, 1.0, 0.7])
        assert sys.d == 0.01
        assert sys.c_offset == pytest.approx(3.2)

    def test_segment_selection(self):
        curve = OcvCurve((0.0, 0.5, 1.0), (3.0, 3.5, 4.5))
        assert build_linear_system_c(curve, 0.25) == pytest.approx(1.0)
        assert build_linear_system_c(curve, 0.75) == pytest.approx(2.0)

    @pytest.mark.parametrize("soc", [-0.1, 1.1])
    def test_soc_domain(self, small_cell, soc):
        with pytest.raises(DomainError):
            build_linear_system(small_cell, affine_ocv(), soc)

    def test_rejects_non_params(self):
        with pytest.raises(ParameterError):
            build_linear_system({"r_ohm": 1}, affine_ocv(), 0.5)


def build_linear_system_c(curve, soc):
    p = CellParams(0.01, 1.0, 1.0, 2.0, 1.0, 3600.0)
    return build_linear_system(p, curve, soc).c[2]


class TestStepExact:
    def test_zero_current_pure_decay(self, small_cell):
        x = StateVector(0.3, -0.2, 0.4)
        y = step_exact(small_cell, x, 0.0, 0.7)
        assert y.v_a == pytest.approx(0.3 * math.exp(-0.7 / 1.0), abs=1e-15)
        assert y.v_b == pytest.approx(-0.2 * math.exp(-0.7 / 2.0), abs=1e-15)
        assert y.soc == 0.4

    def test_coulomb_counting(self, small_cell):
        y = step_exact(small_cell, StateVector(0, 0, 0.5), -1.0, 360.0)
        assert y.soc - 0.5 == pytest.approx(-0.1, abs=1e-15)

    def test_step_response_at_tau(self):
        p = CellParams(0.001, 0.01, 100.0, 0.02, 1000.0, 3600.0)
        y = step_exact(p, StateVector(0, 0, 0.5), 2.0, p.tau_a)
        assert y.v_a == pytest.approx(0.02 * (1 - math.exp(-1)), abs=1e-15)
        assert y.v_a == pytest.approx(0.0126424, abs=1e-7)

    def test_matches_matrix_exponential(self, cell):
        # ZOH of the continuous system through an independent expm
        sys = build_linear_system(cell, affine_ocv(), 0.5)
        dt, i = 7.0, -35.0
        aug = np.zeros((4, 4))
        aug[:3, :3] = sys.a
        aug[:3, 3] = sys.b
        e = scipy.linalg.expm(aug * dt)
        x0 = np.array([0.002, -0.001, 0.6])
        want = e[:3, :3] @ x0 + e[:3, 3] * i
        got = step_exact(cell, StateVector(*x0), i, dt)
        np.testing.assert_allclose(got, want, rtol=0, atol=1e-13)

    @given(cells(), st.floats(-100, 100), st.floats(0.01, 500), st.integers(2, 50))
    def test_semigroup(self, p, i, dt, k):
        x = StateVector(0.01, -0.02, 0.5)
        one = step_exact(p, x, i, dt)
        many = x
        for _ in range(k):
            many = step_exact(p, many, i, dt / k)
        np.testing.assert_allclose(many, one, rtol=1e-12, atol=1e-12)

    @given(cells(), st.floats(-50, 50), st.floats(-5, 5), st.floats(0.1, 100))
    def test_linear_in_current(self, p, i, alpha, dt):
        x0 = StateVector(0.0, 0.0, 0.5)
        base = step_exact(p, x0, i, dt)
        scaled = step_exact(p, x0, alpha * i, dt)
        assert scaled.v_a == pytest.approx(alpha * base.v_a, rel=1e-12, abs=1e-18)
        assert scaled.v_b == pytest.approx(alpha * base.v_b, rel=1e-12, abs=1e-18)

    @pytest.mark.parametrize("dt", [0.0, -1.0])
    def test_dt_must_be_positive(self, small_cell, dt):
        with pytest.raises(DomainError):
            step_exact(small_cell, StateVector(0, 0, 0.5), 1.0, dt)

    def test_euler_mode(self, small_cell):
        y = step_euler(small_cell, StateVector(0.1, 0.0, 0.5), 1.0, 0.1)
        assert y.v_a == pytest.approx(0.1 * 0.9 + 0.1 * 1.0)
        with pytest.raises(DomainError):
            discrete_matrices(small_cell, 1.0, "rk4")


class TestTerminalVoltage:
    def test_rest_voltage(self, cell, ocv):
        assert terminal_voltage(cell, ocv, StateVector(0, 0, 0.35), 0.0) == ocv(0.35)

    def test_arithmetic_example(self):
        p = CellParams(0.002, 1.0, 1.0, 2.0, 1.0, 3600.0)
        curve = OcvCurve((0.0, 0.5, 1.0), (3.15, 3.65, 4.15))
        v = terminal_voltage(p, curve, StateVector(0.01, 0.005, 0.5), -10.0)
        assert v == pytest.approx(3.645, abs=1e-12)

    def test_trace_against_independent_oracle(self, cell, ocv):
        lf = dst_profile(1800.0)
        tr = simulate(cell, ocv, 0.7, lf)
        soc_grid, v_grid = np.array(ocv.soc), np.array(ocv.ocv)
        va, vb, s = tr.states[1:].T
        want = np.interp(s, soc_grid, v_grid) + lf.current_a * cell.r_ohm + va + vb
        assert np.max(np.abs(tr.voltage - want)) < 1e-12

    def test_soc_domain_propagates(self, cell, ocv):
        with pytest.raises(DomainError):
            terminal_voltage(cell, ocv, StateVector(0, 0, 1.5), 0.0)


def fine_euler_voltage(p, ocv, soc0, lf, sub):
    va = vb = 0.0
    s = soc0
    out = []
    for k, dt in enumerate(lf.intervals()):
        i = float(lf.current_a[k])
        h = dt / sub
        for _ in range(sub):
            va += h * (-va / p.tau_a + i / p.c_a)
            vb += h * (-vb / p.tau_b + i / p.c_b)
            s += h * p.eta * i / p.capacity_c
        out.append(ocv(s) + i * p.r_ohm + va + vb)
    return np.array(out)


class TestSimulate:
    def test_empty_loadfile(self, cell, ocv):
        tr = simulate(cell, ocv, 0.5, Loadfile(np.array([]), np.array([])))
        assert tr.states.shape == (1, 3)
        assert tuple(tr.initial_state) == (0.0, 0.0, 0.5)
        assert tr.voltage.size == 0

    def test_full_discharge_at_half_c(self, cell, ocv):
        lf = constant_profile(-cell.capacity_c / 3600.0 / 2.0, 7200.0)
        tr = simulate(cell, ocv, 1.0, lf)
        assert tr.final_state.soc == pytest.approx(0.0, abs=1e-9)
        assert not tr.any_saturated

    def test_saturation_flag(self, cell, ocv):
        lf = constant_profile(cell.capacity_c / 3600.0, 600.0)
        tr = simulate(cell, ocv, 0.95, lf)
        assert tr.any_saturated
        assert tr.soc.max() == 1.0

    def test_converges_to_fine_euler(self, cell, ocv):
        # the oracle's own error is first order in its sub-step
        lf = pulse_profile()
        tr = simulate(cell, ocv, 0.5, lf)
        err100 = np.max(np.abs(fine_euler_voltage(cell, ocv, 0.5, lf, 100) - tr.voltage))
        err1000 = np.max(np.abs(fine_euler_voltage(cell, ocv, 0.5, lf, 1000) - tr.voltage))
        assert err1000 < 2e-7
        assert 8.0 < err100 / err1000 < 12.0

    def test_euler_method_matches_coarse_oracle(self, cell, ocv):
        lf = pulse_profile()
        tr = simulate(cell, ocv, 0.5, lf, method="euler")
        assert np.max(np.abs(fine_euler_voltage(cell, ocv, 0.5, lf, 1) - tr.voltage)) < 1e-12

    @given(st.lists(st.floats(0.0, 100.0), min_size=1, max_size=60))
    def test_charging_only_soc_non_decreasing(self, currents):
        p = CellParams(1e-3, 1e-3, 1e4, 1e-3, 1e5, 3600.0 * 5)
        lf = Loadfile(np.arange(1.0, len(currents) + 1), np.array(currents))
        soc = simulate(p, affine_ocv(), 0.2, lf).states[:, 2]
        assert np.all(np.diff(soc) >= 0)

    def test_non_monotone_timestamps(self):
        with pytest.raises(FormatError):
            Loadfile(np.array([1.0, 2.0, 2.0]), np.zeros(3))

    def test_soc0_domain(self, cell, ocv):
        with pytest.raises(DomainError):
            simulate(cell, ocv, 1.2, pulse_profile())

    def test_accepts_pairs(self, cell, ocv):
        tr = simulate(cell, ocv, 0.5, [(1.0, -5.0), (2.0, -5.0)])
        assert tr.voltage.size == 2

    def test_callable_schedule(self, cell, ocv):
        lf = pulse_profile()
        plain = simulate(cell, ocv, 0.5, lf)
        same = simulate(lambda t, soc, temp: cell, ocv, 0.5, lf)
        np.testing.assert_array_equal(plain.voltage, same.voltage)


class TestParamMap:
    def make(self, cell):
        grid = ((cell, cell.replace(r_ohm=2 * cell.r_ohm)),
                (cell.replace(r_a=3 * cell.r_a), cell.replace(c_b=2 * cell.c_b)))
        return ParamMap((0.0, 25.0), (0.2, 0.8), grid, ((3.5, 3.9), (3.6, 4.0)))

    def test_nodes_exact(self, cell):
        pm = self.make(cell)
        for j, t in enumerate(pm.temperatures):
            for k, s in enumerate(pm.socs):
                assert pm.params_at(t, s) == pm.params[j][k]

    def test_bilinear_midpoint(self, cell):
        pm = self.make(cell)
        mid = pm.params_at(12.5, 0.5)
        assert mid.r_ohm == pytest.approx(cell.r_ohm * 1.25)
        assert pm.ocv_at(12.5, 0.5) == pytest.approx(3.75)

    def test_clamped_outside_grid(self, cell):
        pm = self.make(cell)
        assert pm.params_at(-20.0, 0.0) == cell

    def test_drives_simulation(self, cell, ocv):
        pm = ParamMap((25.0,), (0.0, 1.0), ((cell, cell),))
        lf = pulse_profile()
        np.testing.assert_allclose(simulate(pm, ocv, 0.5, lf).voltage,
                                   simulate(cell, ocv, 0.5, lf).voltage, atol=1e-15)

    def test_grid_validation(self, cell):
        with pytest.raises(ParameterError):
            ParamMap((25.0, 0.0), (0.5,), ((cell,), (cell,)))
        with pytest.raises(ParameterError):
            ParamMap((25.0,), (0.5,), ((cell, cell),))

    def test_dict_round_trip(self, cell):
        pm = self.make(cell)
        back = ParamMap.from_dict(pm.to_dict())
        assert back.params == pm.params and back.ocv == pm.ocv


class TestLoadfile:
    def test_intervals_first_equals_second(self):
        lf = Loadfile(np.array([2.0, 3.0, 5.0]), np.zeros(3))
        np.testing.assert_array_equal(lf.intervals(), [1.0, 1.0, 2.0])

    def test_single_sample_uses_first_dt(self):
        lf = Loadfile(np.array([2.0]), np.zeros(1))
        np.testing.assert_array_equal(lf.intervals(0.5), [0.5])

    def test_rejects_non_finite(self):
        with pytest.raises(FormatError, match="row 2"):
            Loadfile(np.array([1.0, 2.0]), np.array([0.0, math.inf]))

    def test_rejects_shape_mismatch(self):
        with pytest.raises(FormatError):
            Loadfile(np.array([1.0, 2.0]), np.zeros(3))
