"""Monte Carlo generation of time-tagged detection events.

Pulses are processed in fixed-size blocks. Block ``b`` draws from a Philox
generator keyed by ``(seed, b)``, so the output does not depend on how many
worker threads process the blocks or in which order they finish.
"""
from __future__ import annotations

import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field

import numpy as np

from timebin.optics import OpticalLayout, joint_distribution

log = logging.getLogger(__name__)

# channel ids: party x outcome
CH_A_PLUS, CH_A_MINUS, CH_B_PLUS, CH_B_MINUS = 0, 1, 2, 3
_MAX_TICK = 2**63 - 1
_UINT64 = 2**64


class ConfigError(ValueError):
    """Invalid simulation configuration."""


@dataclass(frozen=True)
class SimConfig:
    rep_rate: float = 76e6
    pair_prob: float = 1e-3
    efficiency: float = 0.5
    jitter_sigma: float = 300e-12
    dark_rate: float = 0.0
    duration: float = 1.0
    tagger_resolution: float = 81e-12
    delta_t: float = 3e-9
    dead_time: float = 0.0
    seed: int = 0
    block_pulses: int = 1 << 22

    def __post_init__(self):
        for name in ("rep_rate", "tagger_resolution", "delta_t", "block_pulses"):
            if not getattr(self, name) > 0:
                raise ConfigError(f"{name} must be positive")
        for name in ("pair_prob", "efficiency"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise ConfigError(f"{name} must lie in [0, 1]")
        for name in ("jitter_sigma", "dark_rate", "duration", "dead_time"):
            if not getattr(self, name) >= 0:
                raise ConfigError(f"{name} must be nonnegative")
        if not 0 <= self.seed < _UINT64:
            raise ConfigError("seed must be an unsigned 64-bit integer")

    @property
    def period(self) -> float:
        return 1.0 / self.rep_rate

    @property
    def clock_offset(self) -> float:
        """Time of pulse 0; leaves room for the early slot and its jitter tail."""
        return self.delta_t + 10 * self.jitter_sigma + 1e-9

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass(frozen=True)
class SettingSchedule:
    """Piecewise-constant analyzer settings aligned to the pulse clock."""

    angles: tuple[tuple[float, float], ...]
    starts: np.ndarray = field(repr=False)
    n_pulses: int

    def __len__(self) -> int:
        return len(self.angles)

    def __eq__(self, other) -> bool:
        if not isinstance(other, SettingSchedule):
            return NotImplemented
        return self.to_dict() == other.to_dict()

    __hash__ = None

    def index_of(self, pulse: np.ndarray | int) -> np.ndarray:
        """Setting index for each pulse index."""
        return np.searchsorted(self.starts, pulse, side="right") - 1

    def segment(self, i: int) -> tuple[int, int]:
        stop = self.starts[i + 1] if i + 1 < len(self.starts) else self.n_pulses
        return int(self.starts[i]), int(stop)

    def to_dict(self) -> dict:
        return {
            "angles": [list(a) for a in self.angles],
            "starts": [int(s) for s in self.starts],
            "n_pulses": int(self.n_pulses),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "SettingSchedule":
        return cls(
            tuple((float(x), float(y)) for x, y in d["angles"]),
            np.asarray(d["starts"], dtype=np.int64),
            int(d["n_pulses"]),
        )


def schedule_settings(
    schedule: list[tuple[float, float, float]], rep_rate: float = 76e6
) -> SettingSchedule:
    """Map (phi_A, phi_B, duration) entries onto consecutive pulse ranges.

    Entry i spans floor(duration_i * rep_rate) pulses.
    """
    if not schedule:
        raise ConfigError("empty setting schedule")
    starts, angles, n = [], [], 0
    for phi_a, phi_b, duration in schedule:
        if not duration > 0:
            raise ConfigError(f"schedule durations must be positive, got {duration}")
        starts.append(n)
        angles.append((float(phi_a), float(phi_b)))
        # tolerate float representation noise such as 0.1 * 76e6
        n += int(math.floor(duration * rep_rate * (1 + 1e-12)))
    return SettingSchedule(tuple(angles), np.asarray(starts, dtype=np.int64), n)


@dataclass(frozen=True)
class PulseClock:
    """Pulse k is centred at ``offset + k / rep_rate`` seconds."""

    rep_rate: float
    offset: float
    resolution: float
    n_pulses: int
    delta_t: float = 3e-9
    schedule: SettingSchedule | None = None

    @property
    def period(self) -> float:
        return 1.0 / self.rep_rate

    def center_ticks(self, pulse: np.ndarray | int) -> np.ndarray:
        return (self.offset + np.asarray(pulse, dtype=np.float64) / self.rep_rate) / self.resolution

    def pulse_index(self, ticks: np.ndarray) -> np.ndarray:
        t = np.asarray(ticks, dtype=np.float64) * self.resolution
        return np.floor((t - self.offset) * self.rep_rate + 0.5).astype(np.int64)

    def offset_from_center(self, ticks: np.ndarray) -> np.ndarray:
        """Seconds between each tag and the centre of its nearest pulse."""
        ticks = np.asarray(ticks)
        k = self.pulse_index(ticks)
        return ticks.astype(np.float64) * self.resolution - (self.offset + k / self.rep_rate)

    def setting_index(self, ticks: np.ndarray) -> np.ndarray:
        k = self.pulse_index(ticks)
        if self.schedule is None:
            return np.zeros(k.shape, dtype=np.int64)
        return self.schedule.index_of(k)

    def to_dict(self) -> dict:
        d = {
            "rep_rate": self.rep_rate,
            "offset": self.offset,
            "resolution": self.resolution,
            "n_pulses": int(self.n_pulses),
            "delta_t": self.delta_t,
        }
        d["schedule"] = None if self.schedule is None else self.schedule.to_dict()
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "PulseClock":
        sched = d.get("schedule")
        return cls(
            float(d["rep_rate"]),
            float(d["offset"]),
            float(d["resolution"]),
            int(d["n_pulses"]),
            float(d.get("delta_t", 3e-9)),
            None if sched is None else SettingSchedule.from_dict(sched),
        )


@dataclass(frozen=True)
class TagStream:
    """Click records sorted by (timestamp, channel); timestamps in tagger ticks."""

    channel: np.ndarray
    ticks: np.ndarray
    resolution: float = 81e-12

    def __post_init__(self):
        object.__setattr__(self, "channel", np.asarray(self.channel, dtype=np.uint8))
        object.__setattr__(self, "ticks", np.asarray(self.ticks, dtype=np.int64))
        if self.channel.shape != self.ticks.shape:
            raise ValueError("channel and ticks must have the same length")

    def __len__(self) -> int:
        return len(self.ticks)

    @property
    def times(self) -> np.ndarray:
        return self.ticks * self.resolution

    def is_sorted(self) -> bool:
        return bool(np.all(np.diff(self.ticks) >= 0))

    def select(self, mask: np.ndarray) -> "TagStream":
        return TagStream(self.channel[mask], self.ticks[mask], self.resolution)

    def outcome(self) -> np.ndarray:
        """+1 for even channel ids, -1 for odd."""
        return np.where(self.channel % 2 == 0, 1, -1).astype(np.int8)

    @classmethod
    def merge(cls, parts: list["TagStream"], resolution: float) -> "TagStream":
        if not parts:
            return cls(np.empty(0, np.uint8), np.empty(0, np.int64), resolution)
        ch = np.concatenate([p.channel for p in parts])
        tk = np.concatenate([p.ticks for p in parts])
        order = np.lexsort((ch, tk))
        return cls(ch[order], tk[order], resolution)


def _pair_pulses(rng: np.random.Generator, m: int, p: float) -> np.ndarray:
    """Indices in [0, m) of pulses that emit a pair (Bernoulli(p) per pulse)."""
    if p <= 0.0 or m == 0:
        return np.empty(0, dtype=np.int64)
    if p >= 1.0:
        return np.arange(m, dtype=np.int64)
    chunks, pos = [], -1
    while True:
        size = int(m * p + 6 * math.sqrt(m * p) + 16)
        gaps = rng.geometric(p, size=size)
        idx = pos + np.cumsum(gaps)
        chunks.append(idx[idx < m])
        if idx[-1] >= m:
            break
        pos = int(idx[-1])
    return np.concatenate(chunks)


def _quantize(seconds: np.ndarray, resolution: float) -> np.ndarray:
    # nearest tick, half-up
    return np.floor(seconds / resolution + 0.5).astype(np.int64)


def _simulate_block(
    b: int,
    config: SimConfig,
    cdfs: list[np.ndarray],
    schedule: SettingSchedule,
) -> tuple[TagStream, TagStream]:
    rng = np.random.Generator(np.random.Philox(key=np.array([config.seed, b], dtype=np.uint64)))
    B = config.block_pulses
    lo, hi = b * B, min((b + 1) * B, schedule.n_pulses)
    tA, cA, tB, cB = [], [], [], []
    res, period, off = config.tagger_resolution, config.period, config.clock_offset

    first = int(schedule.index_of(lo))
    for s in range(first, len(schedule)):
        seg_lo, seg_hi = schedule.segment(s)
        lo_s, hi_s = max(lo, seg_lo), min(hi, seg_hi)
        if lo_s >= hi:
            break
        if lo_s >= hi_s:
            continue
        pulses = lo_s + _pair_pulses(rng, hi_s - lo_s, config.pair_prob)
        k = len(pulses)
        idx = np.searchsorted(cdfs[s], rng.random(k), side="right")
        np.minimum(idx, 35, out=idx)
        # flat index over (slot_A, a, slot_B, b) with shape (3, 2, 3, 2)
        sa, oa, sb, ob = idx // 12, (idx // 6) % 2, (idx // 2) % 3, idx % 2
        det = rng.random((2, k)) < config.efficiency
        base = off + pulses / config.rep_rate
        for det_x, slot, out, ch0, ts, cs in (
            (det[0], sa, oa, CH_A_PLUS, tA, cA),
            (det[1], sb, ob, CH_B_PLUS, tB, cB),
        ):
            t = base[det_x] + (slot[det_x] - 1) * config.delta_t
            if config.jitter_sigma > 0:
                t += rng.normal(0.0, config.jitter_sigma, len(t))
            ts.append(_quantize(t, res))
            cs.append((ch0 + out[det_x]).astype(np.uint8))

    if config.dark_rate > 0:
        t0 = max(0.0, off + (lo - 0.5) * period)
        t1 = off + (hi - 0.5) * period
        for ch in (CH_A_PLUS, CH_A_MINUS, CH_B_PLUS, CH_B_MINUS):
            n = rng.poisson(config.dark_rate * (t1 - t0))
            t = _quantize(rng.uniform(t0, t1, n), res)
            (tA if ch < CH_B_PLUS else tB).append(t)
            (cA if ch < CH_B_PLUS else cB).append(np.full(n, ch))

    def pack(ts, cs):
        if not ts:
            return TagStream(np.empty(0, np.uint8), np.empty(0, np.int64), res)
        return TagStream(np.concatenate(cs), np.maximum(np.concatenate(ts), 0), res)

    return pack(tA, cA), pack(tB, cB)


def _apply_dead_time(stream: TagStream, dead_ticks: int) -> TagStream:
    keep = np.ones(len(stream), dtype=bool)
    last: dict[int, int] = {}
    for i, (ch, t) in enumerate(zip(stream.channel.tolist(), stream.ticks.tolist())):
        prev = last.get(ch)
        if prev is not None and t - prev < dead_ticks:
            keep[i] = False
        else:
            last[ch] = t
    return stream.select(keep)


def simulate_tables(
    config: SimConfig,
    schedule: SettingSchedule,
    tables: list[np.ndarray],
    workers: int = 1,
) -> tuple[TagStream, TagStream, PulseClock]:
    """Generate tag streams from one outcome table per schedule segment.

    ``tables[i]`` is a (3, 2, 3, 2) probability array over
    (slot_A, a, slot_B, b) used for every pair emitted during segment i.
    """
    if len(tables) != len(schedule):
        raise ConfigError("need one outcome table per schedule segment")
    n = schedule.n_pulses
    last_tick = (config.clock_offset + n / config.rep_rate + config.delta_t
                 + 10 * config.jitter_sigma) / config.tagger_resolution
    if n >= _MAX_TICK or last_tick >= _MAX_TICK:
        raise ConfigError("duration * rep_rate overflows the 64-bit tag counters")

    cdfs = []
    for P in tables:
        P = np.asarray(P, dtype=float)
        if P.shape != (3, 2, 3, 2) or np.any(P < 0) or not P.sum() > 0:
            raise ConfigError("outcome tables must be nonnegative (3, 2, 3, 2) arrays")
        cdf = np.cumsum(P.ravel())
        cdfs.append(cdf / cdf[-1])

    n_blocks = -(-n // config.block_pulses)

    def job(b: int) -> tuple[TagStream, TagStream]:
        return _simulate_block(b, config, cdfs, schedule)

    if workers > 1 and n_blocks > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(job, range(n_blocks)))
    else:
        results = [job(b) for b in range(n_blocks)]

    res = config.tagger_resolution
    stream_a = TagStream.merge([r[0] for r in results], res)
    stream_b = TagStream.merge([r[1] for r in results], res)
    if config.dead_time > 0:
        dead = int(round(config.dead_time / res))
        stream_a, stream_b = _apply_dead_time(stream_a, dead), _apply_dead_time(stream_b, dead)
    clock = PulseClock(config.rep_rate, config.clock_offset, res, n, config.delta_t, schedule)
    log.debug("simulated %d pulses in %d blocks: %d + %d tags", n, n_blocks,
              len(stream_a), len(stream_b))
    return stream_a, stream_b, clock


def run_simulation(
    config: SimConfig,
    layout: OpticalLayout,
    schedule: SettingSchedule | None = None,
    workers: int = 1,
) -> tuple[TagStream, TagStream, PulseClock]:
    """Generate Alice's and Bob's tag streams plus the pulse clock.

    Without a schedule the layout's analyzer angles are used for
    ``config.duration``. With one, each segment uses its own (phi_A, phi_B)
    and the schedule fixes the run length.
    """
    if schedule is None:
        schedule = schedule_settings(
            [(layout.phi_a, layout.phi_b, config.duration)], config.rep_rate
        )
    if layout.delta_t != config.delta_t:
        log.warning("layout delta_t %.3g differs from config delta_t %.3g; using config",
                    layout.delta_t, config.delta_t)
    tables = [joint_distribution(layout.with_angles(a, b)) for a, b in schedule.angles]
    return simulate_tables(config, schedule, tables, workers)
