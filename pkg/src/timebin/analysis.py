"""From tag streams to physics numbers.

Folded arrival-time histograms, coincidence matching, correlation and CHSH
estimates with multinomial errors, and sinusoidal visibility fits.
"""
from __future__ import annotations

import enum
import math
import warnings
from dataclasses import dataclass, field

import numpy as np
from numba import njit

from timebin.eventsim import PulseClock, TagStream

SQRT2X2 = 2 * math.sqrt(2)


class AnalysisError(ValueError):
    pass


class CoincidenceMode(enum.Enum):
    CENTRAL_ONLY = "central_only"
    ALL_SLOTS = "all_slots"
    # narrow difference window with no absolute-slot cut: keeps early-early,
    # central-central and late-late pairs alike (Franson-style postselection)
    SAME_SLOT = "same_slot"


def check_window(window: float, mode: CoincidenceMode, delta_t: float,
                 jitter_allowance: float = 1.5e-9) -> None:
    """Raise AnalysisError unless the window suits the mode."""
    if not window > 0:
        raise AnalysisError("coincidence window must be positive")
    if mode in (CoincidenceMode.CENTRAL_ONLY, CoincidenceMode.SAME_SLOT):
        if not window < delta_t:
            raise AnalysisError(
                f"{mode.value} needs window < delta_t ({window:.3g} >= {delta_t:.3g})")
    elif window < 2 * delta_t + jitter_allowance:
        raise AnalysisError(f"all_slots needs window >= 2 delta_t + {jitter_allowance:.3g} s")


@dataclass(frozen=True)
class CoincidencePolicy:
    window: float
    mode: CoincidenceMode = CoincidenceMode.ALL_SLOTS
    sync: PulseClock | None = None
    delta_t: float = 3e-9
    jitter_allowance: float = 1.5e-9

    def __post_init__(self):
        check_window(self.window, self.mode, self.delta_t, self.jitter_allowance)
        if self.mode is not CoincidenceMode.ALL_SLOTS and self.sync is None:
            raise AnalysisError(f"{self.mode.value} needs a pulse clock (see estimate_clock)")

    @classmethod
    def central_only(cls, sync: PulseClock, window: float = 2.4e-9) -> "CoincidencePolicy":
        return cls(window, CoincidenceMode.CENTRAL_ONLY, sync, sync.delta_t)

    @classmethod
    def all_slots(cls, sync: PulseClock | None, window: float = 8.1e-9) -> "CoincidencePolicy":
        return cls(window, CoincidenceMode.ALL_SLOTS, sync, 3e-9 if sync is None else sync.delta_t)


@dataclass
class Coincidences:
    """Matched pairs; index i refers to one (Alice tag, Bob tag) pair."""

    a: np.ndarray
    b: np.ndarray
    setting: np.ndarray
    slot_a: np.ndarray
    slot_b: np.ndarray
    ticks_a: np.ndarray
    ticks_b: np.ndarray

    def __len__(self) -> int:
        return len(self.a)

    def counts(self, n_settings: int | None = None) -> np.ndarray:
        """N[setting, a, b] with outcome axes ordered (+1, -1)."""
        if n_settings is None:
            n_settings = int(self.setting.max()) + 1 if len(self) else 1
        N = np.zeros((n_settings, 2, 2), dtype=np.int64)
        ia = (self.a < 0).astype(np.int64)
        ib = (self.b < 0).astype(np.int64)
        np.add.at(N, (self.setting, ia, ib), 1)
        return N


@njit(cache=True)
def _earliest_first(tA, gA, tB, gB, window):
    nA, nB = tA.shape[0], tB.shape[0]
    usedA = np.zeros(nA, np.bool_)
    usedB = np.zeros(nB, np.bool_)
    ia = np.empty(min(nA, nB), np.int64)
    ib = np.empty(min(nA, nB), np.int64)
    m = 0
    i = j = 0
    pa = pb = 0  # earliest possibly pending tag of each party
    while i < nA or j < nB:
        if j >= nB or (i < nA and tA[i] <= tB[j]):
            t, g = tA[i], gA[i]
            while pb < j and (usedB[pb] or t - tB[pb] > window or gB[pb] != g):
                pb += 1
            if pb < j:
                usedA[i] = True
                usedB[pb] = True
                ia[m] = i
                ib[m] = pb
                m += 1
            i += 1
        else:
            t, g = tB[j], gB[j]
            while pa < i and (usedA[pa] or t - tA[pa] > window or gA[pa] != g):
                pa += 1
            if pa < i:
                usedA[pa] = True
                usedB[j] = True
                ia[m] = pa
                ib[m] = j
                m += 1
            j += 1
    return ia[:m], ib[:m]


def match_tags(
    ticks_a: np.ndarray,
    ticks_b: np.ndarray,
    window_ticks: float,
    group_a: np.ndarray | None = None,
    group_b: np.ndarray | None = None,
) -> tuple[np.ndarray, np.ndarray]:
    """Greedy earliest-first one-to-one matching of two sorted tag lists.

    Both streams are swept in merged time order; each arriving tag pairs with
    the earliest still-unpaired tag of the other party within the window (and
    the same group, if groups are given). Swapping the inputs swaps the output.
    """
    ticks_a = np.ascontiguousarray(ticks_a, dtype=np.int64)
    ticks_b = np.ascontiguousarray(ticks_b, dtype=np.int64)
    if np.any(np.diff(ticks_a) < 0) or np.any(np.diff(ticks_b) < 0):
        raise AnalysisError("tag streams must be sorted by timestamp")
    if group_a is None:
        group_a = np.zeros(len(ticks_a), np.int64)
    if group_b is None:
        group_b = np.zeros(len(ticks_b), np.int64)
    return _earliest_first(
        ticks_a, np.ascontiguousarray(group_a, dtype=np.int64),
        ticks_b, np.ascontiguousarray(group_b, dtype=np.int64),
        float(window_ticks),
    )


def slot_of(offsets: np.ndarray, delta_t: float) -> np.ndarray:
    return np.clip(np.rint(offsets / delta_t), -1, 1).astype(np.int8)


def find_coincidences(
    stream_a: TagStream, stream_b: TagStream, policy: CoincidencePolicy
) -> Coincidences:
    """Pair tags with |t_A - t_B| <= window under the given policy.

    With a pulse clock both tags must also belong to the same pulse; the clock
    supplies setting indices and slot tags. Central-only mode first drops
    every tag farther than window/2 from its pulse's central slot; same-slot
    mode keeps tags near any slot centre and pairs only equal slots.
    """
    if not stream_a.is_sorted() or not stream_b.is_sorted():
        raise AnalysisError("tag streams must be sorted by timestamp")
    res = stream_a.resolution
    clock = policy.sync
    same_slot = policy.mode is CoincidenceMode.SAME_SLOT
    if clock is not None and policy.mode is not CoincidenceMode.ALL_SLOTS:
        def near_slot(ticks):
            off = clock.offset_from_center(ticks)
            if same_slot:
                off = off - slot_of(off, policy.delta_t) * policy.delta_t
            return np.abs(off) <= policy.window / 2

        stream_a = stream_a.select(near_slot(stream_a.ticks))
        stream_b = stream_b.select(near_slot(stream_b.ticks))
    ga = gb = None
    if clock is not None:
        ga, gb = clock.pulse_index(stream_a.ticks), clock.pulse_index(stream_b.ticks)
        if same_slot:
            ga = 3 * ga + slot_of(clock.offset_from_center(stream_a.ticks), policy.delta_t) + 1
            gb = 3 * gb + slot_of(clock.offset_from_center(stream_b.ticks), policy.delta_t) + 1
    ia, ib = match_tags(stream_a.ticks, stream_b.ticks, policy.window / res, ga, gb)

    ta, tb = stream_a.ticks[ia], stream_b.ticks[ib]
    if clock is not None:
        setting = clock.setting_index(ta).astype(np.int64)
        slot_a = slot_of(clock.offset_from_center(ta), policy.delta_t)
        slot_b = slot_of(clock.offset_from_center(tb), policy.delta_t)
    else:
        setting = np.zeros(len(ia), np.int64)
        slot_a = slot_b = np.zeros(len(ia), np.int8)
    return Coincidences(
        stream_a.outcome()[ia], stream_b.outcome()[ib], setting, slot_a, slot_b, ta, tb
    )


@dataclass
class Histogram:
    edges: np.ndarray  # seconds relative to the pulse centre
    counts: np.ndarray

    @property
    def centers(self) -> np.ndarray:
        return 0.5 * (self.edges[1:] + self.edges[:-1])

    def peak_areas(self, delta_t: float) -> tuple[int, int, int]:
        """Counts within delta_t/2 of the early, central and late slot times."""
        c = self.centers
        return tuple(
            int(self.counts[np.abs(c - s * delta_t) < delta_t / 2].sum()) for s in (-1, 0, 1)
        )

    def to_csv(self, path) -> None:
        rows = np.column_stack([self.edges[:-1], self.edges[1:], self.counts])
        np.savetxt(path, rows, delimiter=",", header="bin_start_s,bin_stop_s,counts",
                   comments="", fmt=["%.6e", "%.6e", "%d"])


def histogram(
    stream: TagStream, sync: PulseClock, bin_width: float, channel: int | None = None
) -> Histogram:
    """Arrival-time histogram folded onto one pulse period around the pulse centre."""
    if bin_width < stream.resolution:
        raise AnalysisError("bin width below the tagger resolution")
    T = sync.period
    nbins = max(1, int(round(T / bin_width)))
    edges = -T / 2 + np.arange(nbins + 1) * (T / nbins)
    ticks = stream.ticks if channel is None else stream.ticks[stream.channel == channel]
    counts, _ = np.histogram(sync.offset_from_center(ticks), bins=edges)
    return Histogram(edges, counts)


def estimate_clock(
    stream: TagStream,
    rep_rate: float,
    delta_t: float = 3e-9,
    bin_width: float | None = None,
) -> PulseClock:
    """Recover the pulse-clock offset from the folded histogram's tallest peak.

    Fallback for imported dumps lacking clock metadata. The passive central
    peak carries twice the weight of each lateral one; the active one is alone.
    """
    if len(stream) == 0:
        raise AnalysisError("cannot locate pulse clock in an empty stream")
    res = stream.resolution
    T = 1.0 / rep_rate
    bin_width = bin_width or max(res, 100e-12)
    nbins = max(8, int(round(T / bin_width)))
    phase = np.mod(stream.ticks * res, T)
    counts, edges = np.histogram(phase, bins=nbins, range=(0.0, T))
    # circular boxcar about one third of delta_t wide
    k = max(1, int(round(delta_t / 3 / (T / nbins))))
    kernel = np.ones(2 * k + 1)
    smooth = np.convolve(np.concatenate([counts[-k:], counts, counts[:k]]), kernel, "valid")
    peak = 0.5 * (edges[np.argmax(smooth)] + edges[np.argmax(smooth) + 1])
    last = float(stream.ticks[-1]) * res
    offset = peak if peak > delta_t else peak + T
    n_pulses = int(math.floor((last - offset) * rep_rate + 0.5)) + 1
    return PulseClock(rep_rate, offset, res, max(n_pulses, 0), delta_t)


def estimate_correlation(counts: np.ndarray) -> tuple[float, float]:
    """E and its multinomial standard error from a 2x2 count matrix.

    counts[i, j] with outcome order (+1, -1) on both axes.
    """
    N = np.asarray(counts, dtype=float).reshape(2, 2)
    total = N.sum()
    if total <= 0:
        raise AnalysisError("no coincidences for this setting")
    E = (N[0, 0] + N[1, 1] - N[0, 1] - N[1, 0]) / total
    return float(E), float(math.sqrt(max(1.0 - E * E, 0.0) / total))


@dataclass
class BellRunResult:
    correlations: list[float]
    errors: list[float]
    S: float
    sigma_S: float
    counts: np.ndarray = field(repr=False)
    visibility: float | None = None
    sigma_visibility: float | None = None

    @property
    def significance(self) -> float:
        """Violation in standard deviations, (S - 2) / sigma_S."""
        return (self.S - 2.0) / self.sigma_S if self.sigma_S > 0 else math.inf

    def to_dict(self) -> dict:
        return {
            "correlations": [float(x) for x in self.correlations],
            "errors": [float(x) for x in self.errors],
            "S": float(self.S),
            "sigma_S": float(self.sigma_S),
            "significance": float(self.significance),
            "counts": np.asarray(self.counts).tolist(),
            "visibility": self.visibility,
            "sigma_visibility": self.sigma_visibility,
        }


def estimate_chsh(runs, visibility: tuple[float, float] | None = None) -> BellRunResult:
    """CHSH estimate from four 2x2 count matrices.

    Runs are ordered (A, B), (A', B), (A, B'), (A', B'); S = E1 + E2 + E3 - E4.
    """
    runs = [np.asarray(r) for r in runs]
    if len(runs) != 4:
        raise AnalysisError(f"CHSH needs four setting runs, got {len(runs)}")
    est = [estimate_correlation(r) for r in runs]
    E = [e for e, _ in est]
    sig = [s for _, s in est]
    S = E[0] + E[1] + E[2] - E[3]
    sigma_S = math.sqrt(sum(s * s for s in sig))
    V, sV = visibility if visibility is not None else (None, None)
    return BellRunResult(E, sig, S, sigma_S, np.stack(runs), V, sV)


@dataclass(frozen=True)
class VisibilityFit:
    visibility: float
    sigma: float
    offset: float
    phase: float


def fit_visibility(
    phases: np.ndarray, rates: np.ndarray, sigma: np.ndarray | None = None
) -> VisibilityFit:
    """Least-squares fit of r(phi) = C [1 + V cos(phi + phi0)].

    Solved linearly as c0 + c1 cos(phi) + c2 sin(phi); V = |(c1, c2)| / c0.
    Without per-point sigma the covariance is scaled by the residual variance.
    """
    phi = np.asarray(phases, dtype=float)
    r = np.asarray(rates, dtype=float)
    if len(phi) < 4:
        raise AnalysisError("visibility fit needs at least 4 scan points")
    if np.ptp(phi) < math.pi:
        warnings.warn("phase scan spans less than half a period", stacklevel=2)
    X = np.column_stack([np.ones_like(phi), np.cos(phi), np.sin(phi)])
    w = np.ones_like(r) if sigma is None else 1.0 / np.asarray(sigma, dtype=float)
    Xw, rw = X * w[:, None], r * w
    if np.linalg.matrix_rank(Xw) < 3:
        raise AnalysisError("degenerate scan: design matrix is rank deficient")
    coef, *_ = np.linalg.lstsq(Xw, rw, rcond=None)
    c0, c1, c2 = coef
    if not c0 > 0:
        raise AnalysisError("fitted mean rate is not positive")
    cov = np.linalg.inv(Xw.T @ Xw)
    if sigma is None:
        dof = len(r) - 3
        resid = rw - Xw @ coef
        cov *= float(resid @ resid) / dof if dof > 0 else 0.0
    amp = math.hypot(c1, c2)
    V = amp / c0
    # gradient of V wrt (c0, c1, c2)
    g = np.array([-V / c0, c1 / (amp * c0), c2 / (amp * c0)]) if amp > 0 else np.array(
        [0.0, 1 / c0, 1 / c0])
    sV = math.sqrt(max(float(g @ cov @ g), 0.0))
    return VisibilityFit(V, sV, float(c0), float(math.atan2(-c2, c1)))
