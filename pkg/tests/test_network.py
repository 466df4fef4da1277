import numpy as np
import pytest
from dataclasses import replace

from dampopt.network import (
    Branch,
    Bus,
    CaseError,
    DispatchLimitError,
    DivergenceError,
    Generator,
    Load,
    NetworkCase,
    TopologyError,
    build_admittance,
    solve_power_flow,
    validate_case,
)

from conftest import KUNDUR_DISPATCH


def two_bus(vset=1.0, x=0.5, b=0.0, load=None):
    return NetworkCase(
        buses=[Bus(1, "slack", vset), Bus(2, "PV" if load is None else "PQ", vset)],
        branches=[Branch(1, 2, 0.0, x, b)],
        generators=[Generator(1, 10.0, 1.0, 0.1, 5.0, 0.0, "A_G1")]
        + ([] if load is not None else [Generator(2, 10.0, 1.0, 0.1, 5.0, 0.0, "B_G2")]),
        loads=[] if load is None else [Load(2, load[0], load[1])],
    )


class TestAdmittance:
    def test_single_branch_analytic(self):
        case = two_bus(x=0.5)
        y = build_admittance(case)
        expected = np.array([[-2j, 2j], [2j, -2j]])
        assert np.allclose(y, expected, atol=1e-12)

    def test_all_branches_out_of_service(self):
        case = two_bus()
        case = case.with_branch_status(0, False)
        with pytest.raises(TopologyError):
            build_admittance(case)

    def test_kundur_hand_assembly(self, kundur):
        """Independent entrywise assembly of the 11-bus matrix."""
        y = build_admittance(kundur)
        idx = kundur.bus_index()
        n = kundur.n_bus
        ref = np.zeros((n, n), complex)
        for br in kundur.branches:
            i, j = idx[br.from_bus], idx[br.to_bus]
            ys = 1.0 / (br.r + 1j * br.x)
            for a, bb in ((i, j), (j, i)):
                ref[a, bb] -= ys
            ref[i, i] += ys + 0.5j * br.b
            ref[j, j] += ys + 0.5j * br.b
        assert np.allclose(y, ref, rtol=0, atol=1e-13)
        # every row's diagonal dominates each off-diagonal entry
        for i in range(n):
            off = np.abs(np.delete(y[i], i))
            assert np.abs(y[i, i]) >= off.max() - 1e-12

    def test_symmetric_pattern(self, kundur):
        y = build_admittance(kundur)
        assert np.allclose(y, y.T)


class TestPowerFlow:
    def test_zero_injection_flat(self):
        case = two_bus()
        op = solve_power_flow(case, np.zeros(2))
        assert np.allclose(op.vm, 1.0, atol=1e-10)
        assert np.allclose(op.va, 0.0, atol=1e-10)
        assert np.allclose(op.p_inj, 0.0, atol=1e-8)

    def test_kundur_conservation(self, kundur):
        op = solve_power_flow(kundur, KUNDUR_DISPATCH)
        # independent loss summation from branch currents
        idx = kundur.bus_index()
        vc = op.vm * np.exp(1j * op.va)
        losses = 0.0
        for br in kundur.branches:
            i, j = idx[br.from_bus], idx[br.to_bus]
            ys = 1.0 / (br.r + 1j * br.x)
            iij = (vc[i] - vc[j]) * ys
            losses += (abs(iij) ** 2) * br.r
        load_p = sum(ld.p for ld in kundur.loads)
        assert op.total_generation > load_p  # tie flow incurs real loss
        assert abs(op.total_generation - load_p - losses) < 1e-6

    def test_nonzero_tie_flow(self, kundur):
        op = solve_power_flow(kundur, KUNDUR_DISPATCH)
        idx = kundur.bus_index()
        vc = op.vm * np.exp(1j * op.va)
        # flow over both tie circuits 8-9 toward area 1
        tie = 0.0
        for br in kundur.branches:
            if {br.from_bus, br.to_bus} == {8, 9}:
                i, j = idx[br.from_bus], idx[br.to_bus]
                ys = 1.0 / (br.r + 1j * br.x)
                tie += ((vc[j] - vc[i]) * ys * np.conj(vc[j])).real
        assert abs(tie) > 2.0

    def test_dispatch_beyond_capacity_rejected(self, kundur):
        bad = KUNDUR_DISPATCH.copy()
        bad[0] = 9.5  # above G1 capacity
        with pytest.raises(DispatchLimitError):
            solve_power_flow(kundur, bad)

    def test_warm_start_consistency(self, kundur):
        op = solve_power_flow(kundur, KUNDUR_DISPATCH)
        op2 = solve_power_flow(kundur, KUNDUR_DISPATCH, v0=op)
        assert np.max(np.abs(op2.vm - op.vm)) <= 1e-10
        assert np.max(np.abs(op2.va - op.va)) <= 1e-10

    def test_zero_scaling_gives_flat_solution(self):
        case = two_bus(load=(1.0, 0.2))
        op = solve_power_flow(case, np.zeros(1), load_scale=0.0)
        assert np.allclose(op.vm, 1.0, atol=1e-10)
        assert np.allclose(op.va, 0.0, atol=1e-10)

    def test_divergence_carries_mismatch(self, kundur):
        with pytest.raises(DivergenceError) as exc:
            # impossible transfer level
            solve_power_flow(kundur, KUNDUR_DISPATCH, load_scale=4.0)
        assert exc.value.mismatch > 0

    def test_slack_absorbs_imbalance(self, kundur):
        op = solve_power_flow(kundur, KUNDUR_DISPATCH)
        load_p = sum(ld.p for ld in kundur.loads)
        slack_p = op.gen_p[kundur.slack_gen]
        others = op.gen_p.sum() - slack_p
        assert abs(slack_p - (load_p + op.losses(load_p) - others)) < 1e-9


class TestValidation:
    def test_two_slack_buses(self):
        case = two_bus()
        case = replace(case, buses=[Bus(1, "slack", 1.0), Bus(2, "slack", 1.0)])
        with pytest.raises(CaseError):
            validate_case(case)

    def test_dangling_generator_bus(self):
        case = two_bus()
        case = replace(
            case, generators=case.generators + [Generator(9, 1.0, 0.0, 0.1, 1.0, 0.0, "X_G")]
        )
        with pytest.raises(CaseError):
            validate_case(case)

    def test_bad_machine_parameters(self):
        case = two_bus()
        for field, value in [("h", -1.0), ("xdp", 0.0), ("p_min", 9.0)]:
            bad = replace(case, generators=[replace(case.generators[0], **{field: value}),
                                            case.generators[1]])
            with pytest.raises(CaseError):
                validate_case(bad)

    def test_disconnected_network(self):
        case = NetworkCase(
            buses=[Bus(1, "slack", 1.0), Bus(2, "PV", 1.0), Bus(3, "PQ", 1.0)],
            branches=[Branch(1, 2, 0.0, 0.1, 0.0)],
            generators=[
                Generator(1, 5.0, 1.0, 0.1, 2.0, 0.0, "A_G1"),
                Generator(2, 5.0, 1.0, 0.1, 2.0, 0.0, "A_G2"),
            ],
            loads=[Load(3, 0.5, 0.1)],
        )
        with pytest.raises(TopologyError):
            validate_case(case)

    def test_shipped_cases_valid(self, kundur, eightmach):
        validate_case(kundur)
        validate_case(eightmach)
