"""Matching radio samples to camera detections.

The matcher consumes a cost matrix with one row per CSI sample (all base
stations stacked, BS-major) and one column per fused camera detection. Cost
of a pair is the squared distance between the regressor's prediction for the
CSI row and the detection, normalized by the squared expected positioning
error at the predicted location:

    cost[m, n] = ||pred_m - det_n||^2 / sigma_hat(pred_m)^2

The expected error comes from an :class:`ErrorField`: validation residuals
binned on a grid over the scene, with a global fallback for sparse bins and
a floor to keep the normalization bounded.

Two assignment rules are provided. :func:`solve_km` is an exact O(V^3)
Kuhn-Munkres solver (dual potentials plus augmenting paths, deterministic
lowest-index tie preference) that assigns every detection to exactly one CSI
row while each row takes at most one detection; surplus rows fall through to
the unmatched slot. :func:`nearest_neighbour_match` is the greedy baseline:
each row independently takes its cheapest detection unless that exceeds a
threshold.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .network import ArchSpec, forward

__all__ = [
    "ErrorField",
    "CostMatrix",
    "InfeasibleMatchingError",
    "UNMATCHED",
    "error_field_from_residuals",
    "estimate_error_field",
    "build_cost_matrix",
    "solve_km",
    "nearest_neighbour_match",
    "assemble_labels",
    "one_hot_assignment",
    "matching_accuracy",
]

UNMATCHED = -1


class InfeasibleMatchingError(RuntimeError):
    """More detections than CSI rows: no feasible complete assignment."""


@dataclass(frozen=True)
class ErrorField:
    """Grid-binned RMSE of a model's positioning error over the scene.

    ``query`` returns the expected error (metres, >= floor) at arbitrary
    points; points outside the grid use the nearest edge bin.
    """

    x_edges: np.ndarray
    y_edges: np.ndarray
    rmse: np.ndarray  # (n_x, n_y)
    global_rmse: float
    floor: float
    nn_threshold: float

    def query(self, points: np.ndarray) -> np.ndarray:
        p = np.atleast_2d(np.asarray(points, dtype=float))
        ix = np.clip(np.searchsorted(self.x_edges, p[:, 0], side="right") - 1, 0, self.rmse.shape[0] - 1)
        iy = np.clip(np.searchsorted(self.y_edges, p[:, 1], side="right") - 1, 0, self.rmse.shape[1] - 1)
        return self.rmse[ix, iy]


def _grid_edges(lo: float, hi: float, cell: float) -> np.ndarray:
    n = max(1, int(np.ceil((hi - lo) / cell - 1e-9)))
    return lo + cell * np.arange(n + 1)


def error_field_from_residuals(
    preds: np.ndarray,
    sq_errors: np.ndarray,
    bounds: tuple[float, float, float, float],
    *,
    cell_size: float = 10.0,
    min_count: int = 3,
    floor: float = 0.25,
) -> ErrorField:
    """Build the field from precomputed predictions and squared errors.

    Residuals are binned by the predicted location. Bins holding fewer than
    ``min_count`` samples fall back to the global RMSE; everything is clamped
    to ``floor`` from below.
    """
    preds = np.asarray(preds, dtype=float)
    sq = np.asarray(sq_errors, dtype=float)
    if preds.ndim != 2 or preds.shape[0] != sq.shape[0] or preds.shape[0] == 0:
        raise ValueError("need one 2D prediction per squared error, at least one sample")
    if floor <= 0:
        raise ValueError(f"error-field floor must be positive, got {floor}")
    xmin, xmax, ymin, ymax = bounds
    xe = _grid_edges(xmin, xmax, cell_size)
    ye = _grid_edges(ymin, ymax, cell_size)
    nx, ny = len(xe) - 1, len(ye) - 1
    ix = np.clip(np.searchsorted(xe, preds[:, 0], side="right") - 1, 0, nx - 1)
    iy = np.clip(np.searchsorted(ye, preds[:, 1], side="right") - 1, 0, ny - 1)
    flat = ix * ny + iy
    counts = np.bincount(flat, minlength=nx * ny)
    sums = np.bincount(flat, weights=sq, minlength=nx * ny)
    global_rmse = max(float(np.sqrt(sq.mean())), floor)
    with np.errstate(invalid="ignore", divide="ignore"):
        rmse = np.sqrt(sums / counts)
    rmse = np.where(counts >= min_count, rmse, global_rmse)
    rmse = np.maximum(rmse, floor).reshape(nx, ny)
    threshold = float(np.quantile(sq, 0.99) / floor**2)
    return ErrorField(
        x_edges=xe,
        y_edges=ye,
        rmse=rmse,
        global_rmse=global_rmse,
        floor=floor,
        nn_threshold=threshold,
    )


def estimate_error_field(
    arch: ArchSpec,
    params: np.ndarray,
    val_x: np.ndarray,
    val_y: np.ndarray,
    bounds: tuple[float, float, float, float],
    *,
    cell_size: float = 10.0,
    min_count: int = 3,
    floor: float = 0.25,
    batch: int = 1024,
) -> ErrorField:
    """Predict the validation set and bin the residuals (see module docs)."""
    n = val_x.shape[0]
    if n == 0:
        raise ValueError("error field needs a non-empty validation set")
    preds = np.concatenate(
        [forward(arch, params, val_x[i : i + batch]) for i in range(0, n, batch)]
    ).astype(float)
    sq = np.sum((preds - np.asarray(val_y, dtype=float)) ** 2, axis=1)
    return error_field_from_residuals(
        preds, sq, bounds, cell_size=cell_size, min_count=min_count, floor=floor
    )


@dataclass(frozen=True)
class CostMatrix:
    """Normalized assignment costs plus row provenance.

    ``entries[m, n]``: cost of pairing CSI row m with detection n. ``rows``
    holds (bs_index, csi_index_within_bs) per row, BS-major order.
    """

    entries: np.ndarray
    rows: tuple[tuple[int, int], ...]

    @property
    def n_rows(self) -> int:
        return self.entries.shape[0]

    @property
    def n_detections(self) -> int:
        return self.entries.shape[1]


def build_cost_matrix(
    preds: np.ndarray,
    sigmas: np.ndarray,
    detections: np.ndarray,
    rows: tuple[tuple[int, int], ...] | None = None,
) -> CostMatrix:
    """Squared-distance costs normalized by the per-row expected error.

    Requires at least as many CSI rows as detections (surplus rows go
    unmatched later; surplus detections would make the assignment
    infeasible).
    """
    preds = np.atleast_2d(np.asarray(preds, dtype=float))
    det = np.asarray(detections, dtype=float).reshape(-1, 2)
    sig = np.asarray(sigmas, dtype=float).reshape(-1)
    if sig.shape[0] != preds.shape[0]:
        raise ValueError("need one sigma per CSI row")
    if np.any(sig <= 0):
        raise ValueError("sigmas must be positive (the error field floors them)")
    if det.shape[0] > preds.shape[0]:
        raise InfeasibleMatchingError(
            f"{det.shape[0]} detections exceed {preds.shape[0]} CSI rows"
        )
    if not np.all(np.isfinite(preds)) or not np.all(np.isfinite(det)):
        raise ValueError("non-finite coordinates in cost matrix inputs")
    diff = preds[:, None, :] - det[None, :, :]
    entries = np.einsum("mnd,mnd->mn", diff, diff) / (sig**2)[:, None]
    if rows is None:
        rows = tuple((0, m) for m in range(preds.shape[0]))
    return CostMatrix(entries=entries, rows=tuple(rows))


def _hungarian_square(cost: np.ndarray) -> np.ndarray:
    """Exact min-cost perfect matching on a square matrix.

    Dual potentials with shortest augmenting paths, O(n^3). Returns
    col_of_row. Ties resolve toward the lowest column index.
    """
    n = cost.shape[0]
    u = np.zeros(n + 1)
    v = np.zeros(n + 1)
    p = np.full(n + 1, -1, dtype=np.intp)  # row matched to each column; n is virtual
    way = np.zeros(n, dtype=np.intp)
    for i in range(n):
        p[n] = i
        j0 = n
        minv = np.full(n, np.inf)
        used = np.zeros(n + 1, dtype=bool)
        while True:
            used[j0] = True
            i0 = p[j0]
            cur = cost[i0] - u[i0] - v[:n]
            free = ~used[:n]
            upd = free & (cur < minv)
            minv[upd] = cur[upd]
            way[upd] = j0
            masked = np.where(free, minv, np.inf)
            j1 = int(np.argmin(masked))
            delta = masked[j1]
            used_idx = np.flatnonzero(used)
            u[p[used_idx]] += delta
            v[used_idx] -= delta
            minv[free] -= delta
            j0 = j1
            if p[j0] < 0:
                break
        while j0 != n:
            j1 = way[j0]
            p[j0] = p[j1]
            j0 = j1
    col_of_row = np.full(n, -1, dtype=np.intp)
    col_of_row[p[:n]] = np.arange(n)
    return col_of_row


def solve_km(cost: CostMatrix | np.ndarray) -> np.ndarray:
    """Optimal assignment of detections to CSI rows.

    Returns an int array of length n_rows: the detection index taken by each
    row, or :data:`UNMATCHED` for rows left over. Every detection is
    assigned to exactly one row (the matrix is padded with zero-cost dummy
    columns up to square). Raises :class:`InfeasibleMatchingError` when
    detections outnumber rows.
    """
    entries = cost.entries if isinstance(cost, CostMatrix) else np.asarray(cost, dtype=float)
    n_rows, n_det = entries.shape
    if n_det > n_rows:
        raise InfeasibleMatchingError(f"{n_det} detections exceed {n_rows} CSI rows")
    if n_det == 0:
        return np.full(n_rows, UNMATCHED, dtype=np.intp)
    if not np.all(np.isfinite(entries)):
        raise ValueError("cost matrix contains non-finite entries")
    padded = np.zeros((n_rows, n_rows))
    padded[:, :n_det] = entries
    col = _hungarian_square(padded)
    match = np.where(col < n_det, col, UNMATCHED)
    return match.astype(np.intp)


def nearest_neighbour_match(
    cost: CostMatrix | np.ndarray, threshold: float
) -> np.ndarray:
    """Greedy baseline: each row takes its cheapest detection under ``threshold``.

    Rows may collide on the same detection; rows whose minimum exceeds the
    threshold stay unmatched.
    """
    entries = cost.entries if isinstance(cost, CostMatrix) else np.asarray(cost, dtype=float)
    n_rows, n_det = entries.shape
    if n_det == 0:
        return np.full(n_rows, UNMATCHED, dtype=np.intp)
    best = np.argmin(entries, axis=1)
    match = np.where(entries[np.arange(n_rows), best] <= threshold, best, UNMATCHED)
    return match.astype(np.intp)


def assemble_labels(
    match: np.ndarray, detections: np.ndarray, preds: np.ndarray
) -> tuple[np.ndarray, np.ndarray]:
    """Training labels for every CSI row.

    Matched rows take their detection's coordinates; unmatched rows label
    themselves with the current model prediction (their loss and gradient at
    the current parameters are then exactly zero).

    Returns ``(labels (V, 2), matched_mask (V,))``.
    """
    match = np.asarray(match)
    preds = np.atleast_2d(np.asarray(preds, dtype=float))
    det = np.asarray(detections, dtype=float).reshape(-1, 2)
    matched = match != UNMATCHED
    labels = preds.copy()
    labels[matched] = det[match[matched]]
    return labels, matched


def one_hot_assignment(match: np.ndarray, n_detections: int) -> np.ndarray:
    """Binary (V, n_detections + 1) matrix; the last slot is "unmatched"."""
    match = np.asarray(match)
    out = np.zeros((match.shape[0], n_detections + 1), dtype=np.int8)
    cols = np.where(match == UNMATCHED, n_detections, match)
    out[np.arange(match.shape[0]), cols] = 1
    return out


def matching_accuracy(match: np.ndarray, det_true_row: np.ndarray) -> float:
    """Fraction of detections assigned to the CSI row of their true vehicle.

    ``det_true_row[j]`` is the cost-matrix row index of detection j's
    vehicle. Works for both assignment rules; under the greedy rule a
    detection is correct iff its own row picked it.
    """
    det_true_row = np.asarray(det_true_row)
    if det_true_row.size == 0:
        return float("nan")
    match = np.asarray(match)
    return float(np.mean(match[det_true_row] == np.arange(det_true_row.size)))
