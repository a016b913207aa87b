import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from timebin.optics import (
    CENTRAL,
    EARLY,
    LATE,
    OpticalLayout,
    balanced_mzi_split,
    central_conditional,
    detector_histogram,
    full_correlation,
    joint_distribution,
    station_amplitudes,
    switch_phase_profile,
)
from timebin.qcore import MeasurementSetting, Scheme, bell_state, joint_probability

angles = st.floats(-2 * math.pi, 2 * math.pi)


def test_balanced_mzi_split():
    assert balanced_mzi_split(0.0) == pytest.approx((1.0, 0.0))
    assert balanced_mzi_split(math.pi) == pytest.approx((0.0, 1.0))
    assert balanced_mzi_split(math.pi / 2) == pytest.approx((0.5, 0.5))


def test_switch_profile():
    assert switch_phase_profile("S", 2.0) == 2.0
    assert switch_phase_profile("L", 2.0) == pytest.approx(2.0 - math.pi)
    with pytest.raises(ValueError):
        switch_phase_profile("X", 0.0)


def test_layout_validation():
    with pytest.raises(ValueError):
        OpticalLayout(delta_t=0.0)
    with pytest.raises(ValueError):
        OpticalLayout(visibility=1.5)


def test_passive_frozen_distribution():
    P = joint_distribution(OpticalLayout(phi_a=0.3, phi_b=-0.7, visibility=0.9))
    assert P.sum() == pytest.approx(1.0, abs=1e-12)
    np.testing.assert_allclose(
        central_conditional(P), [[0.45723872, 0.04276128], [0.04276128, 0.45723872]], atol=1e-8)
    assert full_correlation(P) == pytest.approx(0.9 * math.cos(-0.4) / 4, abs=1e-12)


def test_passive_histogram_is_one_two_one():
    h = detector_histogram(OpticalLayout(phi_a=1.1), "A")
    assert h == pytest.approx((0.25, 0.5, 0.25), abs=1e-12)


def test_active_histogram_at_pi_has_no_lateral_light():
    layout = OpticalLayout(scheme=Scheme.ACTIVE_SWITCH)
    early, central, late = detector_histogram(layout, "B")
    assert early == pytest.approx(0.0, abs=1e-15)
    assert late == pytest.approx(0.0, abs=1e-15)
    assert central == pytest.approx(1.0)


def test_active_histogram_off_pi():
    early, central, late = detector_histogram(
        OpticalLayout(scheme=Scheme.ACTIVE_SWITCH, phi_s_a=2.5), "A")
    assert central == pytest.approx(math.sin(1.25) ** 2, abs=1e-12)
    assert early == pytest.approx(late)


@given(angles, angles, st.floats(0, 1))
def test_franson_slot_structure(pa, pb, V):
    P = joint_distribution(OpticalLayout(phi_a=pa, phi_b=pb, visibility=V))
    assert P[EARLY, :, LATE, :].sum() == 0.0
    assert P[LATE, :, EARLY, :].sum() == 0.0
    assert P[CENTRAL, :, CENTRAL, :].sum() == pytest.approx(0.25, abs=1e-9)


@given(angles, angles, st.floats(0, 1), st.floats(0, 2 * math.pi), st.floats(0, 2 * math.pi))
def test_active_amplitudes_match_operator_model(pa, pb, V, sa, sb):
    layout = OpticalLayout(phi_a=pa, phi_b=pb, scheme=Scheme.ACTIVE_SWITCH, visibility=V,
                           phi_s_a=sa, phi_s_b=sb)
    P = joint_distribution(layout)
    rho = bell_state(V)
    EA = MeasurementSetting(pa, Scheme.ACTIVE_SWITCH, sa).elements()
    EB = MeasurementSetting(pb, Scheme.ACTIVE_SWITCH, sb).elements()
    for ia in range(2):
        for ib in range(2):
            assert P[:, ia, :, ib].sum() == pytest.approx(
                joint_probability(rho, EA[ia], EB[ib]), abs=1e-12)


def test_station_amplitudes_shape_and_norm():
    amp = station_amplitudes(0.2, False)
    assert amp.shape == (2, 3, 2)
    # each emission bin ends up somewhere with unit probability
    np.testing.assert_allclose((np.abs(amp) ** 2).sum(axis=(1, 2)), [1.0, 1.0], atol=1e-12)
