"""Local hidden-variable strategies and the postselection loophole.

A strategy assigns each party, for every hidden value lambda and *its own*
setting, a distribution over (slot, outcome) cells. There is no array axis
through which one party's response could read the other party's setting.
Postselection keeps only rounds where both photons land in the same slot,
which is where the apparent violation comes from.
"""
from __future__ import annotations

import json
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from timebin.eventsim import SimConfig, TagStream, PulseClock, schedule_settings, simulate_tables
from timebin.qcore import CHSH_ANGLES

# response cells, in column order
CELLS = (("S", 1), ("S", -1), ("L", 1), ("L", -1))
CELL_SLOT = np.array([0, 0, 1, 1])
CELL_SIGN = np.array([1, -1, 1, -1])
SAME_SLOT = CELL_SLOT[:, None] == CELL_SLOT[None, :]
SIGN_PRODUCT = np.outer(CELL_SIGN, CELL_SIGN)

# (Alice setting, Bob setting) in CHSH order: S = E0 + E1 + E2 - E3
CHSH_PAIRS = ((0, 0), (1, 0), (0, 1), (1, 1))


class StrategyError(ValueError):
    pass


def _cell(slot: str, outcome: int) -> int:
    return CELLS.index((slot, outcome))


@dataclass
class LocalStrategy:
    weights: np.ndarray
    alice: np.ndarray  # (n_lambda, n_alice_settings, 4)
    bob: np.ndarray  # (n_lambda, n_bob_settings, 4)

    def __post_init__(self):
        self.weights = np.asarray(self.weights, dtype=float)
        self.alice = np.asarray(self.alice, dtype=float)
        self.bob = np.asarray(self.bob, dtype=float)
        n = len(self.weights)
        if n == 0:
            raise StrategyError("hidden-variable space is empty")
        if abs(self.weights.sum() - 1.0) > 1e-9 or np.any(self.weights < 0):
            raise StrategyError("weights must be a probability vector")
        for name, table in (("alice", self.alice), ("bob", self.bob)):
            if table.ndim != 3 or table.shape[0] != n or table.shape[2] != 4:
                raise StrategyError(f"{name} table must have shape (n_lambda, settings, 4)")
            if np.any(table < -1e-12) or np.max(np.abs(table.sum(axis=2) - 1)) > 1e-9:
                raise StrategyError(f"{name} rows must be probability vectors")

    @property
    def n_lambda(self) -> int:
        return len(self.weights)

    @classmethod
    def deterministic(cls, weights, alice_rows, bob_rows) -> "LocalStrategy":
        """Build from tables of (slot, outcome) tuples indexed [lambda][setting]."""
        def onehot(rows):
            out = np.zeros((len(rows), len(rows[0]), 4))
            for lam, row in enumerate(rows):
                for x, (slot, outcome) in enumerate(row):
                    out[lam, x, _cell(slot, outcome)] = 1.0
            return out

        return cls(np.asarray(weights, float), onehot(alice_rows), onehot(bob_rows))

    def joint(self, x: int, y: int) -> np.ndarray:
        """P[cell_A, cell_B] for Alice setting x and Bob setting y."""
        return np.einsum("l,li,lj->ij", self.weights, self.alice[:, x], self.bob[:, y])

    def outcome_table(self, x: int, y: int) -> np.ndarray:
        """Joint law on the (slot_A, a, slot_B, b) grid used by the event generator.

        S is placed in the central slot and L in the late one.
        """
        P = self.joint(x, y)
        T = np.zeros((3, 2, 3, 2))
        for i, (sa, a) in enumerate(CELLS):
            for j, (sb, b) in enumerate(CELLS):
                T[1 if sa == "S" else 2, 0 if a > 0 else 1,
                  1 if sb == "S" else 2, 0 if b > 0 else 1] += P[i, j]
        return T

    def to_dict(self) -> dict:
        return {
            "cells": [f"{s}{'+' if o > 0 else '-'}" for s, o in CELLS],
            "weights": self.weights.tolist(),
            "alice": self.alice.tolist(),
            "bob": self.bob.tolist(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "LocalStrategy":
        return cls(np.asarray(d["weights"]), np.asarray(d["alice"]), np.asarray(d["bob"]))

    def dumps(self) -> str:
        return json.dumps(self.to_dict(), indent=2)


@dataclass
class StrategyReport:
    setting_pairs: list[tuple[int, int]]
    postselected: list[float]
    keep_rates: list[float]
    full: list[float]
    postselect: bool = True
    S_post: float | None = None
    S_full: float | None = None

    @property
    def S(self) -> float | None:
        return self.S_post if self.postselect else self.S_full

    @property
    def correlations(self) -> list[float]:
        return self.postselected if self.postselect else self.full

    def to_dict(self) -> dict:
        return {
            "setting_pairs": [list(p) for p in self.setting_pairs],
            "postselected_correlations": self.postselected,
            "keep_rates": self.keep_rates,
            "full_correlations": self.full,
            "postselect": self.postselect,
            "S_post": self.S_post,
            "S_full": self.S_full,
        }


def attack_strategy() -> LocalStrategy:
    """Two-point local model whose slot-matched statistics reach S = 4.

    Alice always answers +1 and hides her setting in the slot; Bob's slot and
    sign depend on lambda and his own setting.
    """
    alice = [[("S", 1), ("L", 1)], [("S", 1), ("L", 1)]]
    bob = [[("S", 1), ("L", -1)], [("L", 1), ("S", 1)]]
    return LocalStrategy.deterministic([0.5, 0.5], alice, bob)


def _stats(strategy: LocalStrategy, pairs) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    E_post, keep, E_full = [], [], []
    for x, y in pairs:
        P = strategy.joint(x, y)
        k = float(P[SAME_SLOT].sum())
        corr = float((P * SIGN_PRODUCT)[SAME_SLOT].sum())
        E_post.append(corr / k if k > 1e-15 else 0.0)
        keep.append(k)
        E_full.append(float((P * SIGN_PRODUCT).sum()))
    return np.array(E_post), np.array(keep), np.array(E_full)


def _chsh(E) -> float:
    return float(E[0] + E[1] + E[2] - E[3])


def evaluate(strategy: LocalStrategy, setting_pairs=CHSH_PAIRS, postselect: bool = True
             ) -> StrategyReport:
    """Exact statistics by enumeration over lambda.

    Postselected correlations condition on slot_A == slot_B (taken as 0 when
    no round survives). S values are filled when ``setting_pairs`` is the
    CHSH quadruple.
    """
    pairs = [tuple(int(v) for v in p) for p in setting_pairs]
    E_post, keep, E_full = _stats(strategy, pairs)
    is_chsh = tuple(pairs) == CHSH_PAIRS
    return StrategyReport(
        pairs, E_post.tolist(), keep.tolist(), E_full.tolist(), postselect,
        _chsh(E_post) if is_chsh else None, _chsh(E_full) if is_chsh else None,
    )


def simulate_attack(
    strategy: LocalStrategy,
    config: SimConfig,
    setting_pairs=CHSH_PAIRS,
    angles=CHSH_ANGLES,
    workers: int = 1,
) -> tuple[TagStream, TagStream, PulseClock]:
    """Classical tag streams for the strategy, one segment per setting pair.

    Each segment lasts ``config.duration``; schedule labels carry the analyzer
    angles (phi_A, phi_A', phi_B, phi_B') the settings stand for, so the
    output is indistinguishable in format from quantum data.
    """
    a_angles, b_angles = angles[:2], angles[2:]
    schedule = schedule_settings(
        [(a_angles[x], b_angles[y], config.duration) for x, y in setting_pairs], config.rep_rate
    )
    tables = [strategy.outcome_table(x, y) for x, y in setting_pairs]
    return simulate_tables(config, schedule, tables, workers)


# -- optimisation ----------------------------------------------------------


@dataclass(frozen=True)
class MaximizePostselectedS:
    """Search deterministic response tables for the largest slot-matched S."""

    def value(self, strategy: LocalStrategy) -> float:
        E_post, _, _ = _stats(strategy, CHSH_PAIRS)
        return _chsh(E_post)


@dataclass(frozen=True)
class FitQuantumStatistics:
    """Match V cos(phi_A + phi_B) after postselection and a keep-rate of 1/2.

    The value is minus the largest absolute deviation over the grid.
    """

    visibility: float = 1.0
    alice_angles: tuple[float, ...] = CHSH_ANGLES[:2]
    bob_angles: tuple[float, ...] = CHSH_ANGLES[2:]
    keep_target: float = 0.5
    pairs: tuple = field(init=False)

    def __post_init__(self):
        object.__setattr__(self, "pairs", tuple(
            (i, j) for i in range(len(self.alice_angles)) for j in range(len(self.bob_angles))))

    def target(self) -> np.ndarray:
        return np.array([self.visibility * math.cos(self.alice_angles[i] + self.bob_angles[j])
                         for i, j in self.pairs])

    def deviation(self, strategy: LocalStrategy) -> float:
        E_post, keep, _ = _stats(strategy, self.pairs)
        return float(max(np.max(np.abs(E_post - self.target())),
                         np.max(np.abs(keep - self.keep_target))))

    def value(self, strategy: LocalStrategy) -> float:
        return -self.deviation(strategy)


@dataclass
class OptimizationResult:
    strategy: LocalStrategy
    report: StrategyReport
    value: float
    restart: int
    history: list[float]  # objective after each accepted move of the winning restart


def _settings_count(objective) -> tuple[int, int]:
    if isinstance(objective, FitQuantumStatistics):
        return len(objective.alice_angles), len(objective.bob_angles)
    return 2, 2


def _random_tables(rng, n_lambda, nx, ny, stochastic):
    if stochastic:
        return rng.dirichlet(np.ones(4), (n_lambda, nx)), rng.dirichlet(np.ones(4), (n_lambda, ny))
    eye = np.eye(4)
    return eye[rng.integers(0, 4, (n_lambda, nx))], eye[rng.integers(0, 4, (n_lambda, ny))]


def _ascend(objective, n_lambda, rng, stochastic, max_sweeps):
    nx, ny = _settings_count(objective)
    weights = np.full(n_lambda, 1.0 / n_lambda)
    alice, bob = _random_tables(rng, n_lambda, nx, ny, stochastic)
    current = objective.value(LocalStrategy(weights, alice, bob))
    history = [current]
    eye = np.eye(4)
    steps = (1.0, 0.5, 0.25, 0.1, 0.03, 0.01) if stochastic else (1.0,)
    rows = [(t, l, s) for t, n_set in ((0, nx), (1, ny)) for l in range(n_lambda)
            for s in range(n_set)]
    for _ in range(max_sweeps):
        improved = False
        for r in rng.permutation(len(rows)):
            t, lam, s = rows[r]
            table = alice if t == 0 else bob
            old = table[lam, s].copy()
            best_row, best_val = old, current
            for v in range(4):
                for step in steps:
                    table[lam, s] = old + step * (eye[v] - old)
                    val = objective.value(LocalStrategy(weights, alice, bob))
                    if val > best_val + 1e-12:
                        best_row, best_val = table[lam, s].copy(), val
            table[lam, s] = best_row
            if best_val > current:
                current = best_val
                history.append(current)
                improved = True
        if not improved:
            break
    return LocalStrategy(weights, alice, bob), current, history


def optimize_strategy(
    n_lambda: int,
    objective=MaximizePostselectedS(),
    restarts: int = 10,
    seed: int = 0,
    max_sweeps: int = 200,
    workers: int = 1,
) -> OptimizationResult:
    """Coordinate ascent over response rows with random restarts.

    Deterministic rows for MaximizePostselectedS; probability rows moved
    toward table vertices for FitQuantumStatistics. Restart r draws from its
    own spawned seed, so the result does not depend on ``workers``.
    """
    if n_lambda < 1 or restarts < 1:
        raise StrategyError("n_lambda and restarts must be at least 1")
    if n_lambda * 4 * max(_settings_count(objective)) > 4096:
        raise StrategyError("strategy table too large for coordinate search")
    stochastic = isinstance(objective, FitQuantumStatistics)
    seqs = np.random.SeedSequence(seed).spawn(restarts)

    def run(r: int):
        return _ascend(objective, n_lambda, np.random.default_rng(seqs[r]), stochastic, max_sweeps)

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(run, range(restarts)))
    else:
        results = []
        for r in range(restarts):
            results.append(run(r))
            # the algebraic maximum cannot be beaten
            if not stochastic and results[-1][1] >= 4.0 - 1e-12:
                break
    best = max(range(len(results)), key=lambda r: (results[r][1], -r))
    strategy, value, history = results[best]
    if isinstance(objective, FitQuantumStatistics):
        pairs = objective.pairs
    else:
        pairs = CHSH_PAIRS
    return OptimizationResult(strategy, evaluate(strategy, pairs), value, best, history)
