"""Fit the speed-up model to the grid's 26-core time and the comparison parity point."""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Any, Callable, Optional

from .simcore import Rng
from .topology import Topology
from .workload import (TurboModel, WorkloadProfile, comparison_run,
                       core_slots, elapsed_time, ideal_t1, random_scatter)


class InfeasibleTarget(ValueError):
    pass


@dataclass(frozen=True)
class CalibrationTargets:
    grid_cores: int = 26
    grid_elapsed_s: float = 212.0
    comparison_cores: int = 64
    parity_cores: int = 38
    tolerance: float = 0.05


@dataclass
class CalibrationResult:
    targets: CalibrationTargets
    total_work: float
    comparison_base_clock: float
    comparison_boost: float
    grid_elapsed_s: float
    parity_cores: int
    t1_s: float
    turbo: TurboModel
    comparison_curve: list[tuple[int, float]] = field(default_factory=list)

    @property
    def grid_residual(self) -> float:
        return self.grid_elapsed_s / self.targets.grid_elapsed_s - 1.0

    @property
    def parity_residual(self) -> int:
        return self.parity_cores - self.targets.parity_cores

    def profile(self) -> WorkloadProfile:
        return WorkloadProfile(self.total_work, name="npb-ep")

    def to_dict(self) -> dict[str, Any]:
        t = self.targets
        return {
            "anchors": {"grid_cores": t.grid_cores, "grid_elapsed_s": t.grid_elapsed_s,
                        "comparison_cores": t.comparison_cores, "parity_cores": t.parity_cores},
            "fitted": {
                "label": "fitted to the anchors, not measured",
                "total_work_core_s": self.total_work,
                "comparison_base_clock": self.comparison_base_clock,
                "t1_s": self.t1_s,
            },
            "nominal": {
                "label": "taken from the config, not identifiable from the anchors",
                "client_clocks": {c: {"base_clock": cc.base_clock, "boost": cc.boost}
                                  for c, cc in self.turbo.clocks.items()},
                "comparison_boost": self.comparison_boost,
            },
            "achieved": {"grid_elapsed_s": self.grid_elapsed_s,
                         "comparison_parity_cores": self.parity_cores},
            "residuals": {"grid_elapsed_rel": self.grid_residual,
                          "parity_cores": self.parity_residual},
            "within_tolerance": abs(self.grid_residual) <= t.tolerance,
        }


def _bisect_log(f: Callable[[float], float], target: float, lo: float, hi: float,
                decreasing: bool, iters: int = 200) -> float:
    """Solve ``f(x) = target`` for monotone ``f`` on a log-scaled bracket."""
    for _ in range(iters):
        mid = math.sqrt(lo * hi)
        above = f(mid) > target
        if above == decreasing:
            lo = mid
        else:
            hi = mid
        if hi / lo - 1.0 < 1e-13:
            break
    return math.sqrt(lo * hi)


def grid_elapsed(topo: Topology, profile: WorkloadProfile, turbo: TurboModel, n: int,
                 trials: int = 64, seed: int = 0) -> float:
    """Grid time at ``n`` cores; the mean over random scatters unless ``n`` fills the grid."""
    slots = core_slots(topo)
    if n == len(slots):
        return elapsed_time(profile, [c for c, _ in slots], turbo)
    rng = Rng(seed)
    return sum(elapsed_time(profile, random_scatter(slots, n, rng.fork(f"cal/{t}")), turbo)
               for t in range(trials)) / trials


def parity_point(curve: list[tuple[int, float]], threshold: float) -> Optional[int]:
    for n, t in curve:
        if t <= threshold:
            return n
    return None


def calibrate_paper(topo: Topology, targets: CalibrationTargets = CalibrationTargets(),
                    turbo: Optional[TurboModel] = None,
                    comparison_boost: Optional[float] = None) -> CalibrationResult:
    """Bisection on total work, then on the comparison clock.

    Grid clocks and boosts stay at their configured (nominal) values: with
    every core busy the turbo term vanishes, so neither anchor constrains them.
    """
    t = targets
    if not (math.isfinite(t.grid_elapsed_s) and t.grid_elapsed_s > 0):
        raise InfeasibleTarget(f"grid elapsed target {t.grid_elapsed_s!r} s must be positive")
    if not 1 <= t.grid_cores <= topo.total_vcores:
        raise InfeasibleTarget(f"grid cores {t.grid_cores} outside 1..{topo.total_vcores}")
    if not 2 <= t.parity_cores <= t.comparison_cores:
        raise InfeasibleTarget(f"parity cores {t.parity_cores} outside 2..{t.comparison_cores}")
    turbo = turbo or TurboModel.from_topology(topo)
    if comparison_boost is None:
        comparison_boost = float(topo.turbo.get("comparison", {}).get("boost", 0.0))

    def t_grid(work: float) -> float:
        return grid_elapsed(topo, WorkloadProfile(work), turbo, t.grid_cores)

    work = _bisect_log(t_grid, t.grid_elapsed_s, 1e-9, 1e12, decreasing=False)
    achieved = t_grid(work)
    if not math.isclose(achieved, t.grid_elapsed_s, rel_tol=1e-6):
        raise InfeasibleTarget(
            f"no total work reproduces {t.grid_elapsed_s} s at {t.grid_cores} cores "
            f"(closest {achieved:.6g} s)")
    profile = WorkloadProfile(work, name="npb-ep")

    def t_cmp(clock: float, n: int) -> float:
        return comparison_run(t.comparison_cores, profile, [n], clock, comparison_boost)[0].elapsed_s

    # place the grid time midway (geometric) between the times at parity-1 and parity cores
    p = t.parity_cores
    clock = _bisect_log(lambda c: math.sqrt(t_cmp(c, p - 1) * t_cmp(c, p)),
                        achieved, 1e-9, 1e9, decreasing=True)
    curve = [(s.n_cores, s.elapsed_s) for s in
             comparison_run(t.comparison_cores, profile, range(1, t.comparison_cores + 1),
                            clock, comparison_boost)]
    parity = parity_point(curve, achieved)
    if parity is None:
        raise InfeasibleTarget("comparison machine never reaches the grid time")
    return CalibrationResult(t, work, clock, comparison_boost, achieved, parity,
                             ideal_t1(topo, profile, turbo), turbo, curve)
