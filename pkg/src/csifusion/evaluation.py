"""Test-set evaluation: per-sample position errors under each method.

A "method" is a trained model set plus an inference mode. Uncalibrated
inference reports the network output for every CSI sample. Calibrated
inference solves the same assignment problem used during training on each
test snapshot and, where a camera detection was matched to a CSI sample,
reports the detection's coordinates instead of the network output; unmatched
samples keep the network output. Ground-truth vehicle links are used only to
score the result, never to produce it.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .channel import csi_to_real
from .config import ExperimentConfig
from .matching import (
    ErrorField,
    build_cost_matrix,
    estimate_error_field,
    matching_accuracy,
    solve_km,
)
from .network import ArchSpec
from .scenario import DatasetBundle, Snapshot
from .storage import Checkpoint
from .training import predict_batched

__all__ = [
    "METHODS",
    "EvalReport",
    "calibrated_predict",
    "eval_fields",
    "evaluate_method",
    "evaluate_all",
    "write_reports",
    "export_reward_heatmap",
]

# method name -> (checkpoint kind, calibrated inference)
METHODS: dict[str, tuple[str, bool]] = {
    "csi_pretrain": ("pretrain", False),
    "csi_pretrain_calibrated": ("pretrain", True),
    "csi_finetuned": ("em", False),
    "proposed": ("em", True),
    "pseudo_label": ("pseudo", False),
}


@dataclass
class EvalReport:
    method: str
    mean_error: float  # mean over all test CSI samples, metres
    mean_error_by_bs: list[float]
    bs_balanced_error: float  # mean of the per-BS means
    errors_sorted: np.ndarray  # every per-sample error, ascending
    n_samples: int
    match_accuracy: float | None = None  # calibrated methods only
    matched_fraction: float | None = None

    def quantile(self, q: float) -> float:
        return float(np.quantile(self.errors_sorted, q))

    def to_dict(self) -> dict:
        d = {
            "method": self.method,
            "mean_error": self.mean_error,
            "mean_error_by_bs": list(self.mean_error_by_bs),
            "bs_balanced_error": self.bs_balanced_error,
            "n_samples": self.n_samples,
            "p50": self.quantile(0.5),
            "p90": self.quantile(0.9),
        }
        if self.match_accuracy is not None:
            d["match_accuracy"] = self.match_accuracy
            d["matched_fraction"] = self.matched_fraction
        return d


def eval_fields(bundle: DatasetBundle, cfg: ExperimentConfig, params: list[np.ndarray]) -> list[ErrorField]:
    """Expected-error fields for these models, from the validation split."""
    tr = cfg.train
    return [
        estimate_error_field(
            cfg.arch,
            params[b],
            csi_to_real(bundle.validation[b].csi).astype(np.float32),
            bundle.validation[b].positions.astype(np.float32),
            bounds=tuple(cfg.world.street_bounds),
            cell_size=tr.field_cell_size,
            min_count=tr.field_min_bin,
            floor=tr.field_floor,
        )
        for b in range(bundle.world.n_bs)
    ]


def _snapshot_preds(arch: ArchSpec, params: list[np.ndarray], snap: Snapshot):
    """Network outputs for every CSI row, BS-major, plus per-BS slices."""
    segs, lens = [], []
    for b in range(len(params)):
        x = csi_to_real(snap.csi[b]).astype(np.float32)
        segs.append(
            predict_batched(arch, params[b], x) if len(x) else np.zeros((0, 2), np.float32)
        )
        lens.append(len(x))
    bounds_ = np.concatenate([[0], np.cumsum(lens)]).astype(int)
    return np.concatenate(segs) if segs else np.zeros((0, 2)), bounds_


def calibrated_predict(
    cfg: ExperimentConfig,
    params: list[np.ndarray],
    fields: list[ErrorField],
    snap: Snapshot,
):
    """Fused position estimates for one snapshot.

    Returns ``(positions, match)`` where ``positions`` has one row per CSI
    sample (BS-major) and ``match`` maps each row to the detection index it
    took its position from, or -1 where the network output was kept.
    """
    preds, offs = _snapshot_preds(cfg.arch, params, snap)
    if snap.n_detections == 0 or len(preds) == 0:
        return preds.copy(), np.full(len(preds), -1, dtype=int)
    sig = np.concatenate(
        [fields[b].query(preds[offs[b] : offs[b + 1]]) for b in range(len(params))]
    )
    cost = build_cost_matrix(preds, sig, snap.detections)
    match = solve_km(cost.entries)
    out = preds.astype(np.float64).copy()
    hit = match >= 0
    out[hit] = snap.detections[match[hit]]
    return out, match


def evaluate_method(
    bundle: DatasetBundle,
    cfg: ExperimentConfig,
    ckpt: Checkpoint,
    *,
    calibrated: bool,
    method: str = "",
) -> EvalReport:
    """Score one model set on the test snapshots."""
    n_bs = bundle.world.n_bs
    params = ckpt.params
    fields = eval_fields(bundle, cfg, params) if calibrated else None
    errors_by_bs: list[list[np.ndarray]] = [[] for _ in range(n_bs)]
    n_correct = n_det = n_matched = n_rows_total = 0
    for snap in bundle.test:
        if calibrated:
            pos, match = calibrated_predict(cfg, params, fields, snap)
            if snap.n_detections:
                true_rows = snap.det_true_rows()
                n_correct += int(np.sum(match[true_rows] == np.arange(snap.n_detections)))
                n_det += snap.n_detections
            n_matched += int(np.sum(match >= 0))
        else:
            pos, _ = _snapshot_preds(cfg.arch, params, snap)
        truth = snap.row_positions()
        err = np.linalg.norm(pos - truth, axis=1)
        n_rows_total += len(err)
        r0 = 0
        for b in range(n_bs):
            r1 = r0 + len(snap.csi_vehicle[b])
            errors_by_bs[b].append(err[r0:r1])
            r0 = r1
    per_bs = [np.concatenate(e) if e else np.zeros(0) for e in errors_by_bs]
    all_err = np.concatenate(per_bs)
    means = [float(np.mean(e)) if len(e) else np.nan for e in per_bs]
    return EvalReport(
        method=method,
        mean_error=float(np.mean(all_err)),
        mean_error_by_bs=means,
        bs_balanced_error=float(np.nanmean(means)),
        errors_sorted=np.sort(all_err),
        n_samples=int(all_err.size),
        match_accuracy=(n_correct / n_det if n_det else np.nan) if calibrated else None,
        matched_fraction=(n_matched / n_rows_total if n_rows_total else np.nan)
        if calibrated
        else None,
    )


def evaluate_all(
    bundle: DatasetBundle,
    cfg: ExperimentConfig,
    checkpoints: dict[str, Checkpoint],
    methods: list[str] | None = None,
) -> dict[str, EvalReport]:
    """Evaluate every requested method whose checkpoint kind is available.

    ``checkpoints`` maps kind ("pretrain", "em", "pseudo") to a checkpoint.
    """
    out = {}
    for name in methods or list(METHODS):
        kind, calibrated = METHODS[name]
        if kind not in checkpoints:
            raise KeyError(f"method {name!r} needs a {kind!r} checkpoint, none was given")
        out[name] = evaluate_method(
            bundle, cfg, checkpoints[kind], calibrated=calibrated, method=name
        )
    return out


def write_reports(out_dir: str | Path, reports: dict[str, EvalReport]) -> Path:
    """Write report.json plus one error-CDF csv per method; returns json path."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    summary = {name: r.to_dict() for name, r in sorted(reports.items())}
    path = out / "report.json"
    path.write_text(json.dumps(summary, sort_keys=True, indent=2) + "\n", "utf-8")
    for name, r in reports.items():
        n = r.errors_sorted.size
        cdf = np.column_stack([r.errors_sorted, (np.arange(1, n + 1)) / n])
        np.savetxt(
            out / f"cdf_{name}.csv",
            cdf,
            delimiter=",",
            header="error_m,cdf",
            comments="",
            fmt="%.6f",
        )
    return path


def export_reward_heatmap(
    path: str | Path,
    bundle: DatasetBundle,
    cfg: ExperimentConfig,
    ckpt: Checkpoint,
    snapshot_index: int = 0,
) -> Path:
    """Dump one test snapshot's assignment rewards for inspection.

    Rows are CSI samples, columns are detections; the value is the negated
    matching cost (higher = better). Extra columns carry the solver's
    choice and the ground-truth detection for each row, so the table shows
    at a glance where the assignment agrees with the truth.
    """
    snap = bundle.test[snapshot_index]
    params = ckpt.params
    fields = eval_fields(bundle, cfg, params)
    preds, offs = _snapshot_preds(cfg.arch, params, snap)
    n_bs = bundle.world.n_bs
    if snap.n_detections and len(preds):
        sig = np.concatenate(
            [fields[b].query(preds[offs[b] : offs[b + 1]]) for b in range(n_bs)]
        )
        cost = build_cost_matrix(preds, sig, snap.detections)
        match = solve_km(cost.entries)
        reward = -cost.entries
    else:
        match = np.full(len(preds), -1, dtype=int)
        reward = np.zeros((len(preds), 0))

    # ground-truth detection per row (-1 when that vehicle went undetected)
    det_of_vehicle = {int(v): j for j, v in enumerate(snap.det_vehicle)}
    rows = snap.csi_rows()
    true_det = [
        det_of_vehicle.get(int(snap.csi_vehicle[b][j]), -1) for b, j in rows
    ]

    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    header = ["row", "bs", "assigned_det", "true_det"] + [
        f"reward_det{d}" for d in range(snap.n_detections)
    ]
    lines = [",".join(header)]
    for r, (b, _) in enumerate(rows):
        vals = [str(r), str(b), str(int(match[r])), str(true_det[r])]
        vals += [f"{reward[r, d]:.6f}" for d in range(snap.n_detections)]
        lines.append(",".join(vals))
    path.write_text("\n".join(lines) + "\n", "utf-8")
    return path
