"""Turning per-path covectors into score estimates.

Conditioning on the terminal state is realized by binning one coordinate of
x_T into equal-width half-open cells and averaging the covectors per cell;
the empirical log-density of the cell counts doubles as an independent check
(its finite difference across neighboring cells estimates the same score).
Sums are accumulated in ascending path-id order, so the estimates are exactly
permutation-invariant and worker-partition-invariant.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

Array = np.ndarray


@dataclass(frozen=True)
class BinGrid:
    """Equal-width half-open bins [lo + i w, lo + (i+1) w) on one coordinate."""

    lo: float
    hi: float
    n_bins: int
    coordinate: int = 0

    def __post_init__(self):
        if not self.lo < self.hi:
            raise ValueError("need lo < hi")
        if self.n_bins < 1:
            raise ValueError("need n_bins >= 1")

    @property
    def width(self) -> float:
        return (self.hi - self.lo) / self.n_bins

    @property
    def centers(self) -> Array:
        return self.lo + (np.arange(self.n_bins) + 0.5) * self.width


@dataclass
class ScoreEstimate:
    """Conditional mean of the covector given x_T in one bin.

    ``mean_coord`` is the mean binned coordinate of the bin's paths: the
    covector mean estimates the score at that conditioning point, which for
    wide bins sits measurably off the geometric center.
    """

    bin_index: int
    bin_center: float
    count: int
    mean_nu: Array
    se_nu: Array
    log_density: float
    flagged: bool
    mean_coord: float = float("nan")


@dataclass
class BinnedScores:
    estimates: list
    overflow: int
    n_total: int

    def populated(self, min_count: int = 1):
        return [e for e in self.estimates if e.count >= min_count]


def bin_and_average_arrays(
    terminal_coord: Array,
    nus: Array,
    grid: BinGrid,
    path_ids: Optional[Array] = None,
    min_count: int = 5,
) -> BinnedScores:
    """Bin terminal coordinates and average covectors per bin.

    ``terminal_coord`` has shape (P,), ``nus`` shape (P, M).  Paths outside
    [lo, hi) land in the overflow bucket.  Bins with fewer than ``min_count``
    paths are flagged rather than dropped.  Standard errors are the
    componentwise sample std over sqrt(count); the empirical log-density is
    log(count / (n_total * width)).
    """
    x = np.asarray(terminal_coord, dtype=float)
    nus = np.atleast_2d(np.asarray(nus, dtype=float))
    if nus.shape[0] != x.shape[0]:
        raise ValueError("terminal coordinates and covectors disagree in length")
    n_total = x.shape[0]
    if n_total == 0:
        raise ValueError("no paths to bin")
    if path_ids is not None:
        order = np.argsort(np.asarray(path_ids), kind="stable")
        x = x[order]
        nus = nus[order]
    width = grid.width
    idx = np.floor((x - grid.lo) / width).astype(int)
    in_range = (x >= grid.lo) & (x < grid.hi) & (idx >= 0) & (idx < grid.n_bins)
    overflow = int(n_total - np.count_nonzero(in_range))
    centers = grid.centers
    estimates = []
    for i in range(grid.n_bins):
        sel = in_range & (idx == i)
        count = int(np.count_nonzero(sel))
        if count == 0:
            mean = np.full(nus.shape[1], np.nan)
            se = np.full(nus.shape[1], np.nan)
            log_density = -np.inf
            mean_coord = float("nan")
        else:
            rows = nus[sel]
            mean = np.sum(rows, axis=0) / count
            if count >= 2:
                var = np.sum((rows - mean) ** 2, axis=0) / (count - 1)
                se = np.sqrt(var / count)
            else:
                se = np.full(nus.shape[1], np.nan)
            log_density = float(np.log(count / (n_total * width)))
            mean_coord = float(np.sum(x[sel]) / count)
        estimates.append(
            ScoreEstimate(
                bin_index=i,
                bin_center=float(centers[i]),
                count=count,
                mean_nu=mean,
                se_nu=se,
                log_density=log_density,
                flagged=count < min_count,
                mean_coord=mean_coord,
            )
        )
    return BinnedScores(estimates=estimates, overflow=overflow, n_total=n_total)


def bin_and_average(pairs, grid: BinGrid, min_count: int = 5) -> BinnedScores:
    """Bin (PathRecord, nu_N) pairs on the grid's terminal coordinate."""
    pairs = list(pairs)
    if not pairs:
        raise ValueError("no paths to bin")
    coord = np.array([rec.terminal[grid.coordinate] for rec, _ in pairs])
    nus = np.stack([np.atleast_1d(np.asarray(nu, dtype=float)) for _, nu in pairs])
    ids = np.array([rec.path_id for rec, _ in pairs])
    return bin_and_average_arrays(coord, nus, grid, path_ids=ids, min_count=min_count)


@dataclass
class DeviationSummary:
    """Linear-response residuals Phi(x_T) <nu_T, v_T> + 1 over the paths."""

    mean: float
    se: float
    n: int
    hist_counts: Array
    hist_edges: Array
    rows: list  # (path_id, phi, nu_dot_v, deviation)


def linear_response_deviation_arrays(
    terminal: Array, nus: Array, path_ids, observable, v_terminal, hist_bins: int = 40
) -> DeviationSummary:
    """Per-path deviation statistic for the directional derivative check.

    For each path computes Phi(x_T) <nu_T, v_T> + 1; when the covectors carry
    the terminal score, the mean deviation is zero up to sampling error (the
    +1 offsets the known integrated answer of -1 for the mean observable).
    """
    terminal = np.atleast_2d(np.asarray(terminal, dtype=float))
    nus = np.atleast_2d(np.asarray(nus, dtype=float))
    if terminal.shape[0] == 0:
        raise ValueError("no paths")
    v = np.asarray(v_terminal, dtype=float)
    order = np.argsort(np.asarray(path_ids), kind="stable")
    rows = []
    for i in order:
        phi = float(observable(terminal[i]))
        ndv = float(np.dot(nus[i], v))
        rows.append((int(np.asarray(path_ids)[i]), phi, ndv, phi * ndv + 1.0))
    devs = np.array([r[3] for r in rows])
    mean = float(np.mean(devs))
    se = float(np.std(devs, ddof=1) / np.sqrt(len(devs))) if len(devs) >= 2 else float("nan")
    counts, edges = np.histogram(devs, bins=hist_bins)
    return DeviationSummary(mean=mean, se=se, n=len(devs), hist_counts=counts, hist_edges=edges, rows=rows)


def linear_response_deviation(pairs, observable, v_terminal, hist_bins: int = 40) -> DeviationSummary:
    """(PathRecord, nu_N)-pairs front end of the deviation statistic."""
    pairs = list(pairs)
    if not pairs:
        raise ValueError("no paths")
    terminal = np.stack([rec.terminal for rec, _ in pairs])
    nus = np.stack([np.atleast_1d(np.asarray(nu, dtype=float)) for _, nu in pairs])
    ids = np.array([rec.path_id for rec, _ in pairs])
    return linear_response_deviation_arrays(terminal, nus, ids, observable, v_terminal, hist_bins)


# ---------------------------------------------------------------------------
# CSV output (full precision, deterministic order)
# ---------------------------------------------------------------------------


def _fmt(v: float) -> str:
    return f"{v:.17g}"


def write_scores_csv(path, binned: BinnedScores) -> None:
    dim = binned.estimates[0].mean_nu.shape[0]
    header = (
        ["bin_index", "bin_center", "count", "log_density"]
        + [f"mean_nu_{i+1}" for i in range(dim)]
        + [f"se_nu_{i+1}" for i in range(dim)]
    )
    lines = [",".join(header)]
    for e in binned.estimates:
        cells = [str(e.bin_index), _fmt(e.bin_center), str(e.count), _fmt(e.log_density)]
        cells += [_fmt(v) for v in e.mean_nu]
        cells += [_fmt(v) for v in e.se_nu]
        lines.append(",".join(cells))
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")


def write_deviations_csv(path, summary: DeviationSummary) -> None:
    lines = ["path_id,phi,nu_dot_v,deviation"]
    for pid, phi, ndv, dev in summary.rows:
        lines.append(",".join([str(pid), _fmt(phi), _fmt(ndv), _fmt(dev)]))
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")


def read_scores_csv(path) -> dict:
    """Load a scores.csv back into column arrays (used by tests and tooling)."""
    with open(path) as fh:
        header = fh.readline().strip().split(",")
        rows = [line.strip().split(",") for line in fh if line.strip()]
    cols = {name: np.array([float(r[i]) for r in rows]) for i, name in enumerate(header)}
    return cols
