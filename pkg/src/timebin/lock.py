"""Closed-loop simulation of the switch-phase lock.

The balanced-MZI phase phi_S drifts; a PID acting on the modulator bias keeps
it at pi using only one detector's histogram: central counts N_c against
lateral counts N_l. Because the histogram is symmetric about pi, the branch
(phi_S below or above pi) is inferred from how the extinction ratio responded
to the previous bias move.
"""
from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field

import numpy as np

from timebin.eventsim import SimConfig, run_simulation
from timebin.optics import OpticalLayout
from timebin.qcore import Scheme


class LockError(ValueError):
    pass


class DriftProcess(enum.Enum):
    NONE = "none"
    RANDOM_WALK = "random_walk"
    SINUSOIDAL = "sinusoidal"
    STEP = "step"


@dataclass(frozen=True)
class DriftModel:
    """Environmental phase drift.

    RANDOM_WALK: Gaussian increments, rms ``magnitude`` over one time constant.
    SINUSOIDAL: ``magnitude * sin(2 pi t / time_constant)``.
    STEP: jumps by ``magnitude`` at t = 0 and stays there.
    """

    process: DriftProcess = DriftProcess.RANDOM_WALK
    magnitude: float = 0.1
    time_constant: float = 30.0

    def __post_init__(self):
        if not self.time_constant > 0:
            raise LockError("drift time constant must be positive")

    def sample(self, t: np.ndarray, rng: np.random.Generator) -> np.ndarray:
        t = np.asarray(t, dtype=float)
        if self.process is DriftProcess.NONE:
            return np.zeros_like(t)
        if self.process is DriftProcess.SINUSOIDAL:
            return self.magnitude * np.sin(2 * np.pi * t / self.time_constant)
        if self.process is DriftProcess.STEP:
            return np.full_like(t, self.magnitude)
        dt = np.diff(t, prepend=t[0])
        steps = rng.normal(0.0, 1.0, t.shape) * self.magnitude * np.sqrt(dt / self.time_constant)
        return np.cumsum(steps)


@dataclass(frozen=True)
class PIDGains:
    kp: float = 0.5
    ki: float = 0.1
    kd: float = 0.0
    integral_limit: float = 5.0


@dataclass
class LockState:
    gains: PIDGains = field(default_factory=PIDGains)
    volts_to_rad: float = 1.0
    bias: float = 0.0
    integral: float = 0.0
    last_error: float = 0.0
    branch_sign: float = 1.0
    history: list[tuple[float, float]] = field(default_factory=list)  # (bias, R)
    N_c: int = 0
    N_l: int = 0

    def __post_init__(self):
        if self.N_c < 0 or self.N_l < 0:
            raise LockError("counts must be nonnegative")


def extinction_ratio(N_c: float, N_l: float) -> float:
    """R = (N_c - N_l) / (N_c + N_l)."""
    total = N_c + N_l
    if total <= 0:
        raise LockError("extinction ratio undefined without counts")
    return (N_c - N_l) / total


def branch_sign(history, previous: float = 1.0) -> float:
    """sgn(dR/dphi) from the response of R to the last bias move.

    Keeps ``previous`` when the last move or the response was zero.
    """
    if len(history) < 2:
        return previous
    (b0, r0), (b1, r1) = history[-2], history[-1]
    if b1 == b0 or r1 == r0:
        return previous
    return math.copysign(1.0, (r1 - r0) / (b1 - b0))


def error_signal(
    history, N_c: float, N_l: float, previous_sign: float = 1.0, limit: float = 1e3
) -> float:
    """sgn(dR/dphi_S) * N_l / N_c, saturated at ``limit``.

    ``history`` holds (bias, R) pairs; N_c = 0 yields the saturated value.
    """
    sign = branch_sign(history, previous_sign)
    if N_c <= 0:
        return sign * limit if N_l > 0 else 0.0
    return sign * min(N_l / N_c, limit)


def phase_distance(error: float) -> float:
    """Invert N_l/N_c = cot^2(phi_S / 2): signed distance of phi_S from pi."""
    return math.copysign(2.0 * math.atan(math.sqrt(abs(error))), error) if error else 0.0


def pid_step(state: LockState, error: float, dt: float) -> float:
    """Advance the PID by one interval and return the new bias (volts).

    The controller output is a phase correction, applied to the bias through
    ``volts_to_rad``. The integrator is clamped to +/- integral_limit.
    """
    if not dt > 0:
        raise LockError("dt must be positive")
    g = state.gains
    state.integral = min(max(state.integral + error * dt, -g.integral_limit), g.integral_limit)
    derivative = (error - state.last_error) / dt
    correction = g.kp * error + g.ki * state.integral + g.kd * derivative
    state.last_error = error
    state.bias += correction / state.volts_to_rad
    return state.bias


def effective_visibility(V: float, phi_s_a: float, phi_s_b: float) -> float:
    """Fringe visibility seen with switch phases off pi: V sin^2(phi_A/2) sin^2(phi_B/2)."""
    return V * math.sin(phi_s_a / 2) ** 2 * math.sin(phi_s_b / 2) ** 2


@dataclass(frozen=True)
class LockConfig:
    gains: PIDGains = field(default_factory=PIDGains)
    interval: float = 0.5
    counts_per_interval: float = 5000.0
    duration: float = 600.0
    start_phase: float = math.pi
    volts_to_rad: float = 1.0
    probe_step: float = 0.05  # rad, first move used to seed the branch sign
    linearize: bool = True
    use_events: bool = True
    efficiency: float = 0.5
    dark_rate: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if not self.counts_per_interval > 0:
            raise LockError("counts_per_interval must be positive")
        if not (self.interval > 0 and self.duration > 0):
            raise LockError("interval and duration must be positive")


@dataclass
class LockTrace:
    t: np.ndarray
    phi_s: np.ndarray
    R: np.ndarray
    bias: np.ndarray
    N_c: np.ndarray
    N_l: np.ndarray

    @property
    def residual(self) -> np.ndarray:
        """|phi_S - pi| wrapped to [0, pi]."""
        return np.abs(np.angle(np.exp(1j * (self.phi_s - math.pi))))

    def steady_state_rms(self, settle_fraction: float = 0.25) -> float:
        r = self.residual[int(len(self.t) * settle_fraction):]
        return float(np.sqrt(np.mean(r * r)))

    def rows(self):
        return zip(self.t, self.phi_s, self.R, self.bias, self.N_c, self.N_l)

    def to_csv(self, path) -> None:
        cols = np.column_stack([self.t, self.phi_s, self.R, self.bias, self.N_c, self.N_l])
        np.savetxt(path, cols, delimiter=",", header="t_s,phi_s_true_rad,R,bias_V,N_c,N_l",
                   comments="", fmt=["%.4f", "%.6f", "%.6f", "%.6f", "%d", "%d"])


def _count_events(phi_s: float, cfg: LockConfig, seed: int) -> tuple[int, int]:
    """Central and lateral counts at Alice's +1 detector over one interval."""
    # one detector sees half the detected photons
    rep_rate = 76e6
    n_pulses = cfg.interval * rep_rate
    p = min(1.0, cfg.counts_per_interval / (0.5 * cfg.efficiency * n_pulses))
    sim = SimConfig(rep_rate=rep_rate, pair_prob=p, efficiency=cfg.efficiency,
                    dark_rate=cfg.dark_rate, duration=cfg.interval, seed=seed,
                    block_pulses=1 << 26)
    layout = OpticalLayout(scheme=Scheme.ACTIVE_SWITCH, phi_s_a=phi_s)
    stream_a, _, clock = run_simulation(sim, layout)
    off = clock.offset_from_center(stream_a.ticks[stream_a.channel == 0])
    half = sim.delta_t / 2
    n_c = int(np.count_nonzero(np.abs(off) < half))
    n_l = int(np.count_nonzero(np.abs(np.abs(off) - sim.delta_t) < half))
    return n_c, n_l


def _count_poisson(phi_s: float, cfg: LockConfig, rng: np.random.Generator) -> tuple[int, int]:
    w_c = math.sin(phi_s / 2) ** 2
    return int(rng.poisson(cfg.counts_per_interval * w_c)), int(
        rng.poisson(cfg.counts_per_interval * (1 - w_c)))


def closed_loop_sim(drift: DriftModel, cfg: LockConfig = LockConfig()) -> LockTrace:
    """Alternate count collection and PID updates for ``cfg.duration`` seconds."""
    n = int(round(cfg.duration / cfg.interval))
    t = np.arange(n) * cfg.interval
    seeds = np.random.SeedSequence(cfg.seed)
    drift_rng, count_rng = (np.random.default_rng(s) for s in seeds.spawn(2))
    event_seeds = seeds.generate_state(n, dtype=np.uint64)
    disturbance = drift.sample(t, drift_rng)

    state = LockState(gains=cfg.gains, volts_to_rad=cfg.volts_to_rad)
    out = np.zeros((6, n))
    for k in range(n):
        phi = cfg.start_phase + disturbance[k] + cfg.volts_to_rad * state.bias
        if cfg.use_events:
            n_c, n_l = _count_events(phi, cfg, int(event_seeds[k]))
        else:
            n_c, n_l = _count_poisson(phi, cfg, count_rng)
        R = extinction_ratio(n_c, n_l) if n_c + n_l else 0.0
        state.N_c, state.N_l = n_c, n_l
        state.history.append((state.bias, R))
        out[:, k] = (t[k], phi, R, state.bias, n_c, n_l)
        if k == 0:
            # no derivative information yet: probe
            state.bias += cfg.probe_step / cfg.volts_to_rad
            continue
        err = error_signal(state.history, n_c, n_l, state.branch_sign)
        state.branch_sign = branch_sign(state.history, state.branch_sign)
        del state.history[:-2]
        pid_step(state, phase_distance(err) if cfg.linearize else err, cfg.interval)
    return LockTrace(*out)
