"""Time-bin entanglement Bell-test simulator and analysis toolkit."""

from timebin.qcore import (
    DomainError,
    MeasurementSetting,
    PairState,
    Scheme,
    bell_state,
    chsh,
    correlation,
    joint_probability,
    povm_gamma,
    povm_pi,
    projector_psi,
)

__version__ = "0.1.0"

__all__ = [
    "DomainError",
    "MeasurementSetting",
    "PairState",
    "Scheme",
    "bell_state",
    "chsh",
    "correlation",
    "joint_probability",
    "povm_gamma",
    "povm_pi",
    "projector_psi",
]
