"""Finite-dimensional model of a time-bin qubit pair.

Single-photon operators live on the basis (|S>, |L>); pair operators on the
tensor square ordered (SS, SL, LS, LL), Alice's factor first.
"""
from __future__ import annotations

import enum
from dataclasses import dataclass, field
from math import cos, pi, sin, sqrt

import numpy as np

IDENTITY2 = np.eye(2, dtype=complex)
PSD_TOL = 1e-12

PHI_PLUS = np.array([1, 0, 0, 1], dtype=complex) / sqrt(2)


class DomainError(ValueError):
    """Argument outside the mathematical domain of an operation."""


class Scheme(enum.Enum):
    PASSIVE_POSTSELECTED = "passive_postselected"
    PASSIVE_FULL = "passive_full"
    ACTIVE_SWITCH = "active_switch"


@dataclass(frozen=True)
class PairState:
    density: np.ndarray = field(repr=False)
    visibility: float

    def __post_init__(self):
        rho = np.asarray(self.density, dtype=complex)
        if rho.shape != (4, 4):
            raise DomainError(f"pair density must be 4x4, got {rho.shape}")
        rho.setflags(write=False)
        object.__setattr__(self, "density", rho)


@dataclass(frozen=True)
class MeasurementSetting:
    """Analyzer phase plus switch phases for one party.

    ``phi_l`` defaults to ``phi_s - pi``, the synchronised square-wave drive.
    """

    phi: float
    scheme: Scheme = Scheme.PASSIVE_POSTSELECTED
    phi_s: float = pi
    phi_l: float | None = None

    @property
    def long_phase(self) -> float:
        return self.phi_s - pi if self.phi_l is None else self.phi_l

    def elements(self) -> tuple[np.ndarray, np.ndarray]:
        """POVM elements for outcomes (+1, -1)."""
        if self.scheme is Scheme.PASSIVE_POSTSELECTED:
            return projector_psi(+1, self.phi), projector_psi(-1, self.phi)
        if self.scheme is Scheme.PASSIVE_FULL:
            return povm_gamma(+1, self.phi), povm_gamma(-1, self.phi)
        return (
            povm_pi(+1, self.phi, self.phi_s, self.long_phase),
            povm_pi(-1, self.phi, self.phi_s, self.long_phase),
        )


def _check_sign(a: int) -> None:
    if a not in (1, -1):
        raise DomainError(f"outcome must be +1 or -1, got {a!r}")


def bell_state(V: float) -> PairState:
    """Noisy |Phi+>: the SS/LL coherence is scaled by the visibility V."""
    if not 0.0 <= V <= 1.0:
        raise DomainError(f"visibility must lie in [0, 1], got {V}")
    pure = np.outer(PHI_PLUS, PHI_PLUS.conj())
    dephased = np.diag([0.5, 0, 0, 0.5]).astype(complex)
    return PairState(V * pure + (1.0 - V) * dephased, float(V))


def psi_vector(a: int, phi: float) -> np.ndarray:
    _check_sign(a)
    return np.array([1.0, a * np.exp(1j * phi)], dtype=complex) / sqrt(2)


def projector_psi(a: int, phi: float) -> np.ndarray:
    """Rank-one projector onto (|S> + a e^{i phi} |L>)/sqrt(2)."""
    v = psi_vector(a, phi)
    return np.outer(v, v.conj())


def povm_gamma(a: int, phi: float) -> np.ndarray:
    """Unpostselected passive element: 1/4 identity + 1/2 projector."""
    return 0.25 * IDENTITY2 + 0.5 * projector_psi(a, phi)


def chi_vector(a: int, phi: float, phi_s: float, phi_l: float) -> np.ndarray:
    _check_sign(a)
    return np.array(
        [
            1j * np.exp(-0.5j * phi_s) * sin(phi_s / 2),
            a * np.exp(1j * (phi - phi_l / 2)) * cos(phi_l / 2),
        ],
        dtype=complex,
    ) / sqrt(2)


def povm_pi(a: int, phi: float, phi_s: float = pi, phi_l: float | None = None) -> np.ndarray:
    """Active-switch element for arbitrary switch phases on the S and L bins.

    Lateral slots contribute the diagonal part; the central slot contributes
    the rank-one |chi_a><chi_a| term. ``phi_l`` defaults to ``phi_s - pi``.
    """
    if phi_l is None:
        phi_l = phi_s - pi
    lateral = 0.5 * np.diag([cos(phi_s / 2) ** 2, sin(phi_l / 2) ** 2]).astype(complex)
    chi = chi_vector(a, phi, phi_s, phi_l)
    return lateral + np.outer(chi, chi.conj())


def _check_effect(E: np.ndarray, name: str) -> np.ndarray:
    E = np.asarray(E, dtype=complex)
    if E.shape != (2, 2):
        raise DomainError(f"{name} must be 2x2, got {E.shape}")
    if np.max(np.abs(E - E.conj().T)) > PSD_TOL:
        raise DomainError(f"{name} is not Hermitian")
    w = np.linalg.eigvalsh(E)
    if w[0] < -PSD_TOL or w[-1] > 1 + PSD_TOL:
        raise DomainError(f"{name} is not an effect (eigenvalues {w})")
    return E


def joint_probability(rho: PairState | np.ndarray, E_A: np.ndarray, E_B: np.ndarray) -> float:
    """tr(rho (E_A x E_B)) for effects 0 <= E <= 1."""
    E_A = _check_effect(E_A, "E_A")
    E_B = _check_effect(E_B, "E_B")
    density = rho.density if isinstance(rho, PairState) else np.asarray(rho, dtype=complex)
    return float(np.real(np.trace(density @ np.kron(E_A, E_B))))


def correlation(
    rho: PairState | np.ndarray, setting_A: MeasurementSetting, setting_B: MeasurementSetting
) -> float:
    """E = sum_{a,b} ab P_ab for the POVM families picked by each setting."""
    total = 0.0
    for a, EA in zip((1, -1), setting_A.elements()):
        for b, EB in zip((1, -1), setting_B.elements()):
            total += a * b * joint_probability(rho, EA, EB)
    return total


def chsh(
    rho: PairState | np.ndarray,
    phi_a: float,
    phi_a2: float,
    phi_b: float,
    phi_b2: float,
    scheme: Scheme = Scheme.PASSIVE_POSTSELECTED,
    phi_s: float = pi,
    phi_l: float | None = None,
) -> float:
    """S = E(a, b) + E(a', b) + E(a, b') - E(a', b')."""

    def E(x: float, y: float) -> float:
        return correlation(
            rho,
            MeasurementSetting(x, scheme, phi_s, phi_l),
            MeasurementSetting(y, scheme, phi_s, phi_l),
        )

    return E(phi_a, phi_b) + E(phi_a2, phi_b) + E(phi_a, phi_b2) - E(phi_a2, phi_b2)


CHSH_ANGLES = (-pi / 4, pi / 4, 0.0, pi / 2)
