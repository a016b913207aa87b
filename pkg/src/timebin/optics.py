"""Amplitude-level propagation of the photon pair through the interferometers.

Each photon is emitted in bin S or L. At its station it is routed to the
short or long arm of the unbalanced measurement MZI, either by a 50:50 beam
splitter (passive) or by a balanced MZI switch (active), and leaves through
detector a = +/-1. The long arm carries the analyzer phase and the detector
sign; arrival slot = bin + arm - 1, giving early (-1), central (0), late (+1).

Pair amplitudes are enumerated per creation branch (SS, LL); branch
amplitudes landing on the same (slot_A, a, slot_B, b) interfere with the
cross term scaled by the visibility.
"""
from __future__ import annotations

from dataclasses import dataclass, replace
from math import cos, pi, sin, sqrt

import numpy as np

from timebin.qcore import Scheme

SLOTS = (-1, 0, 1)
OUTCOMES = (1, -1)
EARLY, CENTRAL, LATE = 0, 1, 2  # slot axis indices


@dataclass(frozen=True)
class OpticalLayout:
    phi_a: float = 0.0
    phi_b: float = 0.0
    scheme: Scheme = Scheme.PASSIVE_POSTSELECTED
    visibility: float = 1.0
    delta_t: float = 3e-9
    phi_s_a: float = pi
    phi_s_b: float = pi
    phi_l_a: float | None = None
    phi_l_b: float | None = None

    def __post_init__(self):
        if not self.delta_t > 0:
            raise ValueError(f"delta_t must be positive, got {self.delta_t}")
        if not 0.0 <= self.visibility <= 1.0:
            raise ValueError(f"visibility must lie in [0, 1], got {self.visibility}")

    @property
    def active(self) -> bool:
        return self.scheme is Scheme.ACTIVE_SWITCH

    def with_angles(self, phi_a: float, phi_b: float) -> "OpticalLayout":
        return replace(self, phi_a=phi_a, phi_b=phi_b)


def balanced_mzi_split(phi_m: float) -> tuple[float, float]:
    """Port probabilities of a balanced MZI with relative phase phi_m."""
    return cos(phi_m / 2) ** 2, sin(phi_m / 2) ** 2


def switch_phase_profile(bin_: str, phi_s: float) -> float:
    """Modulator phase seen by a pulse in bin 'S' or 'L' (square wave of depth pi)."""
    if bin_ == "S":
        return phi_s
    if bin_ == "L":
        return phi_s - pi
    raise ValueError(f"bin must be 'S' or 'L', got {bin_!r}")


def _arm_amplitudes(phi_m: float) -> tuple[complex, complex]:
    # balanced MZI: (1 + e^{i phi})/2 to the short arm, (1 - e^{i phi})/2 to the long arm
    e = np.exp(1j * phi_m)
    return (1 + e) / 2, (1 - e) / 2


def station_amplitudes(
    phi: float, active: bool, phi_s: float = pi, phi_l: float | None = None
) -> np.ndarray:
    """Amplitude array amp[bin, slot, outcome] for one station.

    bin 0 = S, 1 = L; slot index 0..2 = early, central, late; outcome 0 = +1, 1 = -1.
    """
    if phi_l is None:
        phi_l = phi_s - pi
    amp = np.zeros((2, 3, 2), dtype=complex)
    for bin_, phi_m in ((0, phi_s), (1, phi_l)):
        if active:
            short, long_ = _arm_amplitudes(phi_m)
        else:
            short = long_ = 1 / sqrt(2)
        for k, a in enumerate(OUTCOMES):
            amp[bin_, bin_, k] += short / sqrt(2)
            amp[bin_, bin_ + 1, k] += long_ * a * np.exp(1j * phi) / sqrt(2)
    return amp


def joint_distribution(layout: OpticalLayout) -> np.ndarray:
    """Probability table P[slot_A, a, slot_B, b], shape (3, 2, 3, 2).

    Slot axes are ordered (early, central, late); outcome axes (+1, -1).
    """
    A = station_amplitudes(layout.phi_a, layout.active, layout.phi_s_a, layout.phi_l_a)
    B = station_amplitudes(layout.phi_b, layout.active, layout.phi_s_b, layout.phi_l_b)
    ss = np.einsum("ij,kl->ijkl", A[0], B[0]) / sqrt(2)
    ll = np.einsum("ij,kl->ijkl", A[1], B[1]) / sqrt(2)
    V = layout.visibility
    P = np.abs(ss) ** 2 + np.abs(ll) ** 2 + 2 * V * np.real(ss * ll.conj())
    return np.clip(P, 0.0, None)


def detector_histogram(layout: OpticalLayout, party: str = "A") -> tuple[float, float, float]:
    """Slot weights (early, central, late) seen by one party, summed over detectors."""
    P = joint_distribution(layout)
    if party == "A":
        w = P.sum(axis=(1, 2, 3))
    elif party == "B":
        w = P.sum(axis=(0, 1, 3))
    else:
        raise ValueError(f"party must be 'A' or 'B', got {party!r}")
    return float(w[0]), float(w[1]), float(w[2])


def central_conditional(P: np.ndarray) -> np.ndarray:
    """Detector law P(a, b | both central) as a 2x2 array."""
    cc = P[CENTRAL, :, CENTRAL, :]
    return cc / cc.sum()


def full_correlation(P: np.ndarray) -> float:
    """sum ab P over all slot pairs."""
    signs = np.array(OUTCOMES, dtype=float)
    return float(np.einsum("iakb,a,b->", P, signs, signs))
