"""Experiment recipes and the runs behind each CLI command.

Every runner takes a validated :class:`ExperimentRecipe`, writes its files
into the recipe's output directory and returns the JSON-ready result. Only
``meta.json`` carries wall-clock information; everything else is a pure
function of the recipe.
"""
from __future__ import annotations

import datetime as _dt
import json
import logging
import math
from dataclasses import replace
from pathlib import Path
from typing import Literal

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, ValidationInfo, field_validator, model_validator

from timebin import __version__
from timebin.analysis import (
    AnalysisError,
    CoincidenceMode,
    CoincidencePolicy,
    Histogram,
    check_window,
    estimate_chsh,
    find_coincidences,
    fit_visibility,
    histogram,
)
from timebin.eventsim import SimConfig, run_simulation, schedule_settings
from timebin.lhv import (
    FitQuantumStatistics,
    MaximizePostselectedS,
    attack_strategy,
    evaluate,
    optimize_strategy,
    simulate_attack,
)
from timebin.lock import DriftModel, DriftProcess, LockConfig, PIDGains, closed_loop_sim
from timebin.optics import OpticalLayout
from timebin.qcore import CHSH_ANGLES, Scheme
from timebin.tagio import write_tags

log = logging.getLogger(__name__)

SCHEMES = {
    "I": (Scheme.PASSIVE_POSTSELECTED, CoincidenceMode.CENTRAL_ONLY, 2.4e-9),
    "II": (Scheme.PASSIVE_FULL, CoincidenceMode.ALL_SLOTS, 8.1e-9),
    "III": (Scheme.ACTIVE_SWITCH, CoincidenceMode.ALL_SLOTS, 8.1e-9),
}
# fields that change how a run executes but not what it produces
EXECUTION_FIELDS = {"workers", "output_dir"}
PSL_BANNER = (
    "!! POSTSELECTION LOOPHOLE: coincidences were postselected on matching time\n"
    "!! slots. A local hidden-variable model can produce this 'violation'; it is\n"
    "!! not evidence against local realism."
)

class ExperimentRecipe(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)

    scheme: Literal["I", "II", "III"] = "I"
    visibility: float = Field(0.95, ge=0.0, le=1.0)
    phi_s_a: float = math.pi
    phi_s_b: float = math.pi
    angles: tuple[float, float, float, float] = CHSH_ANGLES
    sim: SimConfig = SimConfig(pair_prob=0.01)
    allow_policy_override: bool = False
    window: float | None = Field(None, gt=0.0)
    mode: Literal["central_only", "all_slots", "same_slot"] | None = None
    scan_steps: int = Field(12, ge=4)
    scan_duration: float = Field(0.1, gt=0.0)
    output_dir: str = "runs/out"
    dump_tags: bool = False
    tag_encoding: Literal["binary", "csv"] = "binary"
    workers: int = Field(1, ge=1)

    @field_validator("window")
    @classmethod
    def _check_window(cls, value, info: ValidationInfo):
        scheme = info.data.get("scheme")
        if value is None or scheme is None or info.data.get("allow_policy_override"):
            return value
        default = SCHEMES[scheme][2]
        if not math.isclose(value, default, rel_tol=1e-9):
            raise ValueError(f"scheme {scheme} uses a {default * 1e9:.1f} ns window; "
                             "set allow_policy_override to change it")
        return value

    @field_validator("mode")
    @classmethod
    def _check_mode(cls, value, info: ValidationInfo):
        scheme = info.data.get("scheme")
        if value is None or scheme is None or info.data.get("allow_policy_override"):
            return value
        default = SCHEMES[scheme][1].value
        if value != default:
            raise ValueError(f"scheme {scheme} uses mode {default}; "
                             "set allow_policy_override to change it")
        return value

    @model_validator(mode="after")
    def _check_policy(self):
        try:
            check_window(self.coincidence_window, self.coincidence_mode, self.sim.delta_t)
        except AnalysisError as exc:
            raise ValueError(str(exc)) from exc
        return self

    @property
    def seed(self) -> int:
        return self.sim.seed

    @property
    def coincidence_mode(self) -> CoincidenceMode:
        return CoincidenceMode(self.mode) if self.mode else SCHEMES[self.scheme][1]

    @property
    def coincidence_window(self) -> float:
        return self.window if self.window is not None else SCHEMES[self.scheme][2]

    def layout(self) -> OpticalLayout:
        return OpticalLayout(
            scheme=SCHEMES[self.scheme][0],
            visibility=self.visibility,
            delta_t=self.sim.delta_t,
            phi_s_a=self.phi_s_a,
            phi_s_b=self.phi_s_b,
        )

    def policy(self, clock) -> CoincidencePolicy:
        return CoincidencePolicy(self.coincidence_window, self.coincidence_mode, clock,
                                 self.sim.delta_t)

    @classmethod
    def load(cls, path) -> "ExperimentRecipe":
        return cls.model_validate_json(Path(path).read_text())

    def dumps(self) -> str:
        return self.model_dump_json(indent=2)


def _dump(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def _prepare(recipe: ExperimentRecipe, command: str) -> Path:
    out = Path(recipe.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "recipe.json").write_text(recipe.dumps() + "\n")
    _dump(out / "meta.json", {
        "command": command,
        "version": __version__,
        "created": _dt.datetime.now(_dt.timezone.utc).isoformat(),
    })
    return out


def write_histograms(path: Path, hists: dict[str, Histogram]) -> None:
    first = next(iter(hists.values()))
    cols = [first.edges[:-1], first.edges[1:]] + [h.counts for h in hists.values()]
    header = ",".join(["bin_start_s", "bin_stop_s"] + list(hists))
    fmt = ["%.6e", "%.6e"] + ["%d"] * len(hists)
    np.savetxt(path, np.column_stack(cols), delimiter=",", header=header, comments="", fmt=fmt)


def detector_histograms(stream_a, stream_b, clock, bin_width=81e-12) -> dict[str, Histogram]:
    return {
        "A+": histogram(stream_a, clock, bin_width, 0),
        "A-": histogram(stream_a, clock, bin_width, 1),
        "B+": histogram(stream_b, clock, bin_width, 2),
        "B-": histogram(stream_b, clock, bin_width, 3),
    }


def phase_scan(recipe: ExperimentRecipe, party: str = "B", start: float = 0.0,
               stop: float = 2 * math.pi, steps: int | None = None, fixed: float = 0.0):
    """Coincidence rate of the (+1, +1) detector pair against one analyzer phase.

    Returns (phases, counts, fit); the fit is None when it fails.
    """
    steps = steps or recipe.scan_steps
    # a full period would repeat its first point
    full = math.isclose(stop - start, 2 * math.pi)
    phases = np.linspace(start, stop, steps, endpoint=not full)
    if party == "B":
        entries = [(fixed, float(p), recipe.scan_duration) for p in phases]
    else:
        entries = [(float(p), fixed, recipe.scan_duration) for p in phases]
    cfg = replace(recipe.sim, seed=(recipe.seed + 1) % 2**64)
    schedule = schedule_settings(entries, cfg.rep_rate)
    a, b, clock = run_simulation(cfg, recipe.layout(), schedule, recipe.workers)
    coinc = find_coincidences(a, b, recipe.policy(clock))
    counts = coinc.counts(len(entries))[:, 0, 0]
    try:
        fit = fit_visibility(phases, counts / recipe.scan_duration,
                             np.sqrt(np.maximum(counts, 1)) / recipe.scan_duration)
    except AnalysisError as exc:
        log.warning("visibility fit failed: %s", exc)
        fit = None
    return phases, counts, fit


def analyse_chsh(stream_a, stream_b, clock, policy: CoincidencePolicy, visibility=None):
    coinc = find_coincidences(stream_a, stream_b, policy)
    return estimate_chsh(coinc.counts(4), visibility), coinc


def summary_text(title: str, result, postselected: bool) -> str:
    lines = [title]
    for label, E, s in zip(("E(a,b)", "E(a',b)", "E(a,b')", "E(a',b')"),
                           result.correlations, result.errors):
        lines.append(f"  {label:9s} = {E:+.4f} +/- {s:.4f}")
    lines.append(f"  S = {result.S:.4f} +/- {result.sigma_S:.4f}")
    lines.append(f"  violation: {result.significance:.1f} standard deviations")
    if result.visibility is not None:
        lines.append(f"  V_exp = {result.visibility:.4f} +/- {result.sigma_visibility:.4f}")
    if postselected and result.S > 2:
        lines.append(PSL_BANNER)
    return "\n".join(lines) + "\n"


def run_bell(recipe: ExperimentRecipe) -> dict:
    """Calibration scan, four-setting CHSH acquisition, analysis and files."""
    out = _prepare(recipe, "bell")
    phases, scan_counts, fit = phase_scan(recipe)
    np.savetxt(out / "scan.csv", np.column_stack([phases, scan_counts]), delimiter=",",
               header="phi_b_rad,coincidences_pp", comments="", fmt=["%.6f", "%d"])

    a1, a2, b1, b2 = recipe.angles
    T = recipe.sim.duration
    schedule = schedule_settings([(a1, b1, T), (a2, b1, T), (a1, b2, T), (a2, b2, T)],
                                 recipe.sim.rep_rate)
    stream_a, stream_b, clock = run_simulation(recipe.sim, recipe.layout(), schedule,
                                               recipe.workers)
    vis = None if fit is None else (fit.visibility, fit.sigma)
    result, coinc = analyse_chsh(stream_a, stream_b, clock, recipe.policy(clock), vis)

    write_histograms(out / "histograms.csv", detector_histograms(stream_a, stream_b, clock))
    if recipe.dump_tags:
        ext = "tags" if recipe.tag_encoding == "binary" else "csv"
        write_tags(out / f"tags.{ext}", stream_a, stream_b, clock,
                   {"recipe": recipe.model_dump(mode="json", exclude=EXECUTION_FIELDS)},
                   recipe.tag_encoding)
    payload = {
        "scheme": recipe.scheme,
        "mode": recipe.coincidence_mode.value,
        "window_s": recipe.coincidence_window,
        "coincidences": len(coinc),
        "result": result.to_dict(),
    }
    _dump(out / "result.json", payload)
    postselected = recipe.coincidence_mode is not CoincidenceMode.ALL_SLOTS
    (out / "summary.txt").write_text(
        summary_text(f"Bell test, scheme {recipe.scheme}", result, postselected))
    return payload


def run_scan(recipe: ExperimentRecipe, party: str = "B", start: float = 0.0,
             stop: float = 2 * math.pi, steps: int | None = None) -> dict:
    out = _prepare(recipe, "scan")
    phases, counts, fit = phase_scan(recipe, party, start, stop, steps)
    rate = counts / recipe.scan_duration
    np.savetxt(out / "scan.csv", np.column_stack([phases, counts, rate]), delimiter=",",
               header=f"phi_{party.lower()}_rad,coincidences_pp,rate_hz", comments="",
               fmt=["%.6f", "%d", "%.3f"])
    payload = {
        "party": party,
        "phases": phases.tolist(),
        "counts": counts.tolist(),
        "fit": None if fit is None else {
            "visibility": fit.visibility, "sigma": fit.sigma,
            "offset_hz": fit.offset, "phase_rad": fit.phase,
        },
    }
    _dump(out / "scan.json", payload)
    if fit is None:
        raise AnalysisError("visibility fit failed (no usable coincidences?)")
    return payload


def run_histogram(recipe: ExperimentRecipe, bin_width: float = 81e-12) -> dict:
    out = _prepare(recipe, "histogram")
    a, b, clock = run_simulation(recipe.sim, recipe.layout(), workers=recipe.workers)
    hists = detector_histograms(a, b, clock, bin_width)
    write_histograms(out / "histograms.csv", hists)
    payload = {name: list(h.peak_areas(recipe.sim.delta_t)) for name, h in hists.items()}
    _dump(out / "peaks.json", payload)
    return payload


def run_lock(output_dir: str, drift: DriftModel, cfg: LockConfig,
             threshold: float = 0.05) -> dict:
    out = Path(output_dir)
    out.mkdir(parents=True, exist_ok=True)
    trace = closed_loop_sim(drift, cfg)
    trace.to_csv(out / "lock_trace.csv")
    rms = trace.steady_state_rms()
    payload = {
        "drift": {"process": drift.process.value, "magnitude": drift.magnitude,
                  "time_constant": drift.time_constant},
        "steady_state_rms_rad": rms,
        "final_residual_rad": float(trace.residual[-1]),
        "threshold_rad": threshold,
        "locked": bool(rms < threshold),
    }
    _dump(out / "lock_summary.json", payload)
    return payload


def run_lhv(output_dir: str, optimize: bool = False, n_lambda: int = 2, restarts: int = 10,
            seed: int = 0, fit_visibility_target: float | None = None,
            simulate: SimConfig | None = None) -> dict:
    out = Path(output_dir)
    out.mkdir(parents=True, exist_ok=True)
    if optimize:
        objective = (MaximizePostselectedS() if fit_visibility_target is None
                     else FitQuantumStatistics(fit_visibility_target))
        opt = optimize_strategy(n_lambda, objective, restarts, seed)
        strategy, report = opt.strategy, opt.report
        extra = {"objective_value": opt.value, "restart": opt.restart}
    else:
        strategy = attack_strategy()
        report, extra = evaluate(strategy), {}
    (out / "strategy.json").write_text(strategy.dumps() + "\n")
    payload = {"report": report.to_dict(), **extra}
    summary = "Local strategy, exact enumeration\n"
    if report.S_post is not None:
        summary += f"  S_post = {report.S_post:.4f}  S_full = {report.S_full:.4f}\n"
    summary += "  keep rates: " + ", ".join(f"{k:.3f}" for k in report.keep_rates) + "\n"
    if optimize and fit_visibility_target is not None:
        summary += f"  max deviation from the quantum target: {-extra['objective_value']:.4g}\n"
    if simulate is not None:
        a, b, clock = simulate_attack(strategy, simulate)
        narrow = CoincidencePolicy(2.4e-9, CoincidenceMode.SAME_SLOT, clock, simulate.delta_t)
        wide = CoincidencePolicy.all_slots(clock)
        post, _ = analyse_chsh(a, b, clock, narrow)
        full, _ = analyse_chsh(a, b, clock, wide)
        payload["pipeline"] = {"postselected": post.to_dict(), "all_slots": full.to_dict()}
        summary += (summary_text("LHV attack, slot-matched window", post, True)
                    + summary_text("LHV attack, all slots", full, False))
    (out / "summary.txt").write_text(summary)
    _dump(out / "report.json", payload)
    return payload


def lock_config_from(drift_process: str, magnitude: float, time_constant: float,
                     duration: float, seed: int, kp: float, ki: float, kd: float,
                     **extra) -> tuple[DriftModel, LockConfig]:
    drift = DriftModel(DriftProcess(drift_process), magnitude, time_constant)
    cfg = LockConfig(gains=PIDGains(kp, ki, kd), duration=duration, seed=seed, **extra)
    return drift, cfg
