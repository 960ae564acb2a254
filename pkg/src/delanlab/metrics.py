"""Trajectory evaluation: success, efficiency and path-fidelity metrics.

All distances are graph geodesics, matching navigation convention; the
toy worlds are graphs, so Euclidean shortcuts would be meaningless.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from typing import Sequence

from .worldsim import World

METRIC_COLUMNS = ("TL", "NE", "SR", "SPL", "nDTW", "sDTW", "CLS", "GP")


@dataclass(frozen=True)
class TrajectoryPair:
    predicted: tuple[int, ...]
    reference: tuple[int, ...]
    world: World
    success_radius: float = 0.0

    def __post_init__(self):
        if not self.predicted or not self.reference:
            raise ValueError("paths must be nonempty")
        for path in (self.predicted, self.reference):
            for a, b in zip(path[:-1], path[1:]):
                if b not in self.world.adjacency[a]:
                    raise ValueError(f"path step {a}->{b} is not a world edge")

    @property
    def goal(self) -> int:
        return self.reference[-1]

    @property
    def theta(self) -> float:
        # Success radius floored at one edge length so the nDTW exponential
        # stays meaningful when the radius is zero.
        return max(self.success_radius, 1.0)


@dataclass(frozen=True)
class MetricReport:
    TL: float
    NE: float
    SR: float
    SPL: float
    nDTW: float
    sDTW: float
    CLS: float
    GP: float

    def as_dict(self) -> dict[str, float]:
        return {name: getattr(self, name) for name in METRIC_COLUMNS}


def _path_length(world: World, path: Sequence[int]) -> float:
    return sum(world.edge_length(a, b) for a, b in zip(path[:-1], path[1:]))


def basic_metrics(pair: TrajectoryPair) -> tuple[float, float, float, float]:
    """(TL, NE, SR, SPL) with SPL = S * l / max(p, l) over geodesics."""
    world = pair.world
    tl = _path_length(world, pair.predicted)
    ne = world.geodesic(pair.predicted[-1], pair.goal)
    sr = 1.0 if ne <= pair.success_radius + 1e-9 else 0.0
    shortest = world.geodesic(pair.predicted[0], pair.goal)
    if shortest == 0.0:
        spl = sr
    else:
        spl = sr * shortest / max(tl, shortest)
    return tl, ne, sr, spl


def dtw(pair: TrajectoryPair) -> float:
    """Classic dynamic-programming DTW over geodesic point distances."""
    world = pair.world
    pred, ref = pair.predicted, pair.reference
    n, m = len(pred), len(ref)
    inf = math.inf
    table = [[inf] * (m + 1) for _ in range(n + 1)]
    table[0][0] = 0.0
    for i in range(1, n + 1):
        row = table[i]
        prev = table[i - 1]
        for j in range(1, m + 1):
            cost = world.geodesic(pred[i - 1], ref[j - 1])
            row[j] = cost + min(prev[j], row[j - 1], prev[j - 1])
    return table[n][m]


def ndtw(pair: TrajectoryPair) -> float:
    """exp(-DTW / (|reference| * theta))."""
    return math.exp(-dtw(pair) / (len(pair.reference) * pair.theta))


def sdtw(pair: TrajectoryPair) -> float:
    _, _, sr, _ = basic_metrics(pair)
    return sr * ndtw(pair)


def cls_score(pair: TrajectoryPair) -> float:
    """Coverage weighted by length score.

    Coverage: mean over reference nodes of exp(-d(node, predicted)/theta);
    length score compares the predicted length with the coverage-expected
    length. Product of the two.
    """
    world = pair.world
    coverage = 0.0
    for ref_node in pair.reference:
        dist = min(world.geodesic(ref_node, p) for p in pair.predicted)
        coverage += math.exp(-dist / pair.theta)
    coverage /= len(pair.reference)
    expected = coverage * _path_length(world, pair.reference)
    actual = _path_length(world, pair.predicted)
    if expected == 0.0 and actual == 0.0:
        return coverage
    score = expected / (expected + abs(expected - actual))
    return coverage * score


def goal_progress(pair: TrajectoryPair) -> float:
    """Geodesic distance covered toward the goal (can be negative)."""
    world = pair.world
    return (world.geodesic(pair.predicted[0], pair.goal)
            - world.geodesic(pair.predicted[-1], pair.goal))


def evaluate(pair: TrajectoryPair) -> MetricReport:
    tl, ne, sr, spl = basic_metrics(pair)
    n = ndtw(pair)
    return MetricReport(TL=tl, NE=ne, SR=sr, SPL=spl, nDTW=n, sDTW=sr * n,
                        CLS=cls_score(pair), GP=goal_progress(pair))


def aggregate(reports: Sequence[MetricReport]) -> MetricReport:
    if not reports:
        raise ValueError("nothing to aggregate")
    count = len(reports)
    means = {name: sum(getattr(r, name) for r in reports) / count
             for name in METRIC_COLUMNS}
    return MetricReport(**means)


# ---------------------------------------------------------------------------
# Report emission
# ---------------------------------------------------------------------------

def write_report_csv(path, reports: Sequence[MetricReport],
                     episode_ids: Sequence[str] | None = None) -> None:
    """Per-episode rows plus a final aggregate row."""
    ids = episode_ids or [str(i) for i in range(len(reports))]
    lines = ["episode_id," + ",".join(METRIC_COLUMNS)]
    for eid, report in zip(ids, reports):
        lines.append(f"{eid}," + ",".join(repr(getattr(report, c))
                                          for c in METRIC_COLUMNS))
    mean = aggregate(reports)
    lines.append("mean," + ",".join(repr(getattr(mean, c)) for c in METRIC_COLUMNS))
    with open(path, "w") as handle:
        handle.write("\n".join(lines) + "\n")


def write_report_json(path, reports: Sequence[MetricReport],
                      episode_ids: Sequence[str] | None = None) -> None:
    ids = episode_ids or [str(i) for i in range(len(reports))]
    payload = {
        "episodes": {eid: report.as_dict() for eid, report in zip(ids, reports)},
        "mean": aggregate(reports).as_dict(),
        "count": len(reports),
    }
    with open(path, "w") as handle:
        json.dump(payload, handle, sort_keys=True, indent=1)
