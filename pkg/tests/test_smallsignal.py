import numpy as np
import pytest
from dataclasses import replace

from dampopt.network import Branch, Bus, Generator, NetworkCase, solve_power_flow
from dampopt.smallsignal import (
    Mode,
    ModeClassificationError,
    ModeTrackingError,
    damping_ratio,
    eigen_modes,
    linearize,
    min_damping_mode,
    perturbation_sensitivity,
    reduce_to_internal,
    synchronizing_matrix,
)

from conftest import EIGHTMACH_DISPATCH, KUNDUR_DISPATCH


def smib_case(h=3.5, d=0.0, xdp=0.3, xline=0.2):
    """Single machine against a near-infinite bus."""
    return NetworkCase(
        buses=[Bus(1, "PV", 1.0), Bus(2, "slack", 1.0)],
        branches=[Branch(1, 2, 0.0, xline, 0.0)],
        generators=[
            Generator(1, h, d, xdp, 5.0, 0.0, "A_M"),
            Generator(2, 1.0e7, 0.0, 1e-4, 100.0, 0.0, "B_INF"),
        ],
        loads=[],
    )


class TestDampingRatio:
    def test_formula(self):
        assert damping_ratio(complex(-0.1, 3.14)) == pytest.approx(0.03183, abs=1e-5)

    def test_purely_imaginary(self):
        assert damping_ratio(3.5j) == 0.0

    def test_sign(self):
        assert damping_ratio(complex(0.05, 2.0)) < 0.0


class TestLinearize:
    def test_smib_closed_form(self):
        case = smib_case()
        op = solve_power_flow(case, np.zeros(2))
        a = linearize(case, op)
        lam = np.linalg.eigvals(a.a)
        osc = lam[np.argmax(lam.imag)]
        # zero transfer: E1 = E2 = 1, K = 1 / x_total
        k = 1.0 / (0.3 + 0.2 + 1e-4)
        predicted = np.sqrt(case.omega_s * k / (2.0 * 3.5))
        assert osc.imag == pytest.approx(predicted, rel=1e-5)
        assert abs(osc.real) < 1e-8

    def test_delta_rows_are_speed_selector(self, kundur):
        op = solve_power_flow(kundur, KUNDUR_DISPATCH)
        a = linearize(kundur, op)
        ng = a.n_gen
        assert np.allclose(a.a[:ng, :ng], 0.0)
        assert np.allclose(a.a[:ng, ng:], kundur.omega_s * np.eye(ng))

    def test_reference_mode_near_zero(self, kundur):
        op = solve_power_flow(kundur, KUNDUR_DISPATCH)
        lam = np.linalg.eigvals(linearize(kundur, op).a)
        assert np.min(np.abs(lam)) <= 1e-8

    def test_undamped_gives_imaginary_spectrum(self, kundur):
        und = replace(kundur, generators=[replace(g, d=0.0) for g in kundur.generators])
        op = solve_power_flow(und, KUNDUR_DISPATCH)
        modes = eigen_modes(linearize(und, op), und)
        for m in modes:
            assert abs(m.sigma) <= 1e-8
            assert abs(m.zeta) <= 1e-8

    def test_angle_reference_invariance(self, kundur):
        op = solve_power_flow(kundur, KUNDUR_DISPATCH)
        model = reduce_to_internal(kundur, op)
        k0 = synchronizing_matrix(model)
        model.emf = model.emf * np.exp(1j * 0.7)  # rigid angle shift
        k1 = synchronizing_matrix(model)
        assert np.allclose(k0, k1, atol=1e-10)


class TestEigenModes:
    def test_kundur_mode_structure(self, kundur):
        op = solve_power_flow(kundur, KUNDUR_DISPATCH)
        modes = eigen_modes(linearize(kundur, op), kundur)
        em = [m for m in modes if m.electromechanical]
        assert len(em) == 3
        inter = [m for m in em if m.classification == "inter-area"]
        local = [m for m in em if m.classification == "local"]
        assert len(inter) == 1 and len(local) == 2
        assert 0.3 <= inter[0].freq_hz <= 0.8
        for m in local:
            assert 0.8 <= m.freq_hz <= 1.5

    def test_kundur_interarea_shape_antiphase(self, kundur):
        op = solve_power_flow(kundur, KUNDUR_DISPATCH)
        modes = eigen_modes(linearize(kundur, op), kundur)
        inter = next(m for m in modes if m.classification == "inter-area")
        re = np.real(inter.shape)
        # G1, G2 together against G3, G4
        assert re[0] * re[1] > 0
        assert re[2] * re[3] > 0
        assert re[0] * re[2] < 0

    def test_shape_normalization(self, kundur):
        op = solve_power_flow(kundur, KUNDUR_DISPATCH)
        for m in eigen_modes(linearize(kundur, op), kundur):
            k = np.argmax(np.abs(m.shape))
            assert m.shape[k] == pytest.approx(1.0 + 0.0j)

    def test_conjugacy_residual(self, kundur):
        op = solve_power_flow(kundur, KUNDUR_DISPATCH)
        a = linearize(kundur, op)
        ng = a.n_gen
        for m in eigen_modes(a, kundur):
            v = np.concatenate([kundur.omega_s / m.eigenvalue * m.shape, m.shape])
            res = np.linalg.norm(a.a @ v - m.eigenvalue * v) / np.linalg.norm(v)
            assert res <= 1e-8
            assert m.omega > 0

    def test_nonfinite_matrix_rejected(self, kundur):
        op = solve_power_flow(kundur, KUNDUR_DISPATCH)
        a = linearize(kundur, op)
        a.a[0, 0] = np.nan
        with pytest.raises(ValueError):
            eigen_modes(a, kundur)


def synth_mode(zeta, freq, n=2):
    shape = np.ones(n, dtype=complex)
    w = 2 * np.pi * freq
    sigma = -zeta * w / np.sqrt(1 - zeta**2)
    return Mode(
        eigenvalue=complex(sigma, w), zeta=zeta, freq_hz=freq,
        shape=shape, participation=np.ones(n) / n, classification="local",
    )


class TestMinDampingMode:
    def test_direct_minimum(self):
        modes = [synth_mode(0.05, 1.1), synth_mode(0.016, 0.55)]
        assert min_damping_mode(modes).freq_hz == 0.55

    def test_tie_breaks_to_lower_frequency(self):
        modes = [synth_mode(0.03, 1.0), synth_mode(0.03, 0.5)]
        assert min_damping_mode(modes).freq_hz == 0.5

    def test_empty_set_raises(self):
        m = synth_mode(0.05, 1.0)
        m.classification = "non-electromechanical"
        with pytest.raises(ModeClassificationError):
            min_damping_mode([m])


class TestPerturbationSensitivity:
    def test_affine_plant_exact(self, kundur):
        op = solve_power_flow(kundur, KUNDUR_DISPATCH)
        a = np.array([0.004, -0.002, 0.0, 0.0011])

        def zeta_fn(disp):
            return 0.03 + float(a @ disp)

        feats = [("G1", (0,)), ("G2", (1,)), ("G4", (3,))]
        psi = perturbation_sensitivity(kundur, op, feats, h=0.01, zeta_fn=zeta_fn)
        # each feature perturbation moves the slack (index 2) in opposition
        expected = np.array([a[0] - a[2], a[1] - a[2], a[3] - a[2]])
        assert np.max(np.abs(psi - expected)) <= 1e-10

    def test_richardson_order(self, kundur):
        """Central differences converge at O(h^2)."""
        op = solve_power_flow(kundur, KUNDUR_DISPATCH)
        feats = [("G1", (0,))]
        psis = {
            h: perturbation_sensitivity(kundur, op, feats, h=h)[0]
            for h in (0.16, 0.08, 0.04)
        }
        e1 = abs(psis[0.16] - psis[0.04])
        e2 = abs(psis[0.08] - psis[0.04])
        assert e1 / e2 == pytest.approx(4.0, rel=0.5)

    def test_kundur_first_point_signs(self, kundur):
        """At the stressed study point: cutting G1 helps, raising G4 helps."""
        op = solve_power_flow(kundur, KUNDUR_DISPATCH)
        feats = [("G1", (0,)), ("G2", (1,)), ("G4", (3,))]
        psi = perturbation_sensitivity(kundur, op, feats, h=0.01)
        assert psi[0] < -1e-3
        assert psi[2] > 1e-4
        assert abs(psi[0]) > abs(psi[1])

    def test_eightmach_magnitude_scale(self, eightmach):
        """Sensitivities at the identification point sit at the 1e-3 level."""
        op = solve_power_flow(eightmach, EIGHTMACH_DISPATCH)
        feats = [("G1", (0,)), ("G7", (6,))]
        psi = perturbation_sensitivity(eightmach, op, feats, h=0.01)
        assert psi[0] == pytest.approx(-0.00109, abs=0.0004)
        assert psi[1] == pytest.approx(0.00131, abs=0.0005)

    def test_tracking_error_when_mode_lost(self, kundur):
        op = solve_power_flow(kundur, KUNDUR_DISPATCH)
        modes = eigen_modes(linearize(kundur, op), kundur)
        fake = modes[0]
        fake.shape = np.array([1.0, -1.0, 1.0, -1.0]) + 0j  # matches nothing
        with pytest.raises(ModeTrackingError):
            perturbation_sensitivity(kundur, op, [("G1", (0,))], h=0.01, mode=fake)

    def test_slack_feature_rejected(self, kundur):
        op = solve_power_flow(kundur, KUNDUR_DISPATCH)
        with pytest.raises(ValueError):
            perturbation_sensitivity(kundur, op, [("G3", (2,))], h=0.01)
