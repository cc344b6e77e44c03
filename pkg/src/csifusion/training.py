"""Training loops: supervised pretraining and detection-supervised fine-tuning.

Fine-tuning alternates two steps per iteration. First each snapshot in a
mini-batch is solved as an assignment problem: model predictions for every
CSI sample are matched to the snapshot's camera detections under a
normalized squared-distance cost, and each matched detection becomes the
training target for its CSI sample, while unmatched samples receive their
own current prediction as a stand-in target (which contributes exactly zero
gradient). Second, the per-sample targets are reweighted by how well each
sample's gradient aligns with the validation gradient, and one SGD step
mixes the detection-derived gradient with a plain labeled-data gradient.

Reproducibility contract: all randomness inside an iteration comes from a
generator seeded by (seed, stream tag, iteration), and within one iteration
draws happen in a fixed, documented order:

1. the snapshot mini-batch indices (one ``choice`` call), then
2. for each base station in index order, that station's labeled-batch
   indices (one ``choice`` call each, sized to match the station's CSI row
   count in the snapshot batch).

Resuming from a checkpoint therefore replays the identical run, and an
external loop that replicates this order (e.g. a supervised baseline that
must consume the same labeled batches) stays in lockstep. Changing the
order is a breaking change to saved experiment comparability.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .channel import csi_to_real
from .config import ExperimentConfig
from .matching import ErrorField, build_cost_matrix, estimate_error_field, solve_km
from .network import (
    forward,
    init_params,
    mse_and_grad,
    mse_loss,
    per_sample_grad_dots,
    sgd_step,
)
from .scenario import DatasetBundle, Snapshot
from .storage import Checkpoint, save_checkpoint

__all__ = [
    "staircase_lr",
    "rectify_weights",
    "pretrain",
    "run_hard_em",
    "run_pseudo_label",
    "predict_batched",
    "MetricsCsv",
    "read_metrics",
    "lemma1_monitor",
    "Lemma1Report",
]

# seed-stream tags (the scene generator uses 0..2)
_TAG_INIT = 10
_TAG_PRETRAIN = 11
_TAG_EM = 12
_TAG_PSEUDO = 13


def _stream(seed: int, *tags: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([seed] + list(tags)))


def staircase_lr(base: float, step: int, *, factor: float, start: int, every: int) -> float:
    """Stepped decay: ``base * factor ** max(0, (step - start) // every)``."""
    return base * factor ** max(0, (step - start) // every)


def rectify_weights(raw: np.ndarray, xi: float, mode: str) -> tuple[np.ndarray, float]:
    """Turn raw alignment scores into per-sample weights.

    Returns ``(weights, mu)`` where ``mu`` is the batch normalizer
    ``max |raw|``. Modes: ``meta`` -> ``1 + xi * raw / mu`` (all-ones when
    the batch is entirely zero), ``relu`` -> ``max(raw, 0)``, ``none`` ->
    ones.
    """
    raw = np.asarray(raw, dtype=np.float64)
    mu = float(np.max(np.abs(raw))) if raw.size else 0.0
    if mode == "none":
        return np.ones_like(raw), mu
    if mode == "relu":
        return np.maximum(raw, 0.0), mu
    if mode == "meta":
        if mu == 0.0:
            return np.ones_like(raw), mu
        return 1.0 + xi * raw / mu, mu
    raise ValueError(f"unknown weighting mode {mode!r}")


def predict_batched(arch, params, x: np.ndarray, batch: int = 512) -> np.ndarray:
    """Forward pass in chunks; avoids large im2col buffers."""
    if x.shape[0] <= batch:
        return forward(arch, params, x)
    return np.concatenate([forward(arch, params, x[i : i + batch]) for i in range(0, x.shape[0], batch)])


# ---------------------------------------------------------------------------
# staged data (float32 tensors derived once per run)


@dataclass
class _Staged:
    x_lab: list[np.ndarray]
    y_lab: list[np.ndarray]
    x_val: list[np.ndarray]
    y_val: list[np.ndarray]
    x_mm: list[np.ndarray]  # all unlabeled rows of BS b, snapshot-major
    mm_off: list[np.ndarray]  # (S+1,) row offsets per snapshot
    snaps: list[Snapshot]


def _stage(bundle: DatasetBundle) -> _Staged:
    n_bs = bundle.world.n_bs
    f32 = lambda a: np.ascontiguousarray(a, dtype=np.float32)
    x_mm, mm_off = [], []
    for b in range(n_bs):
        rows = [s.csi[b] for s in bundle.multimodal]
        counts = [r.shape[0] for r in rows]
        x_mm.append(f32(csi_to_real(np.concatenate(rows))))
        mm_off.append(np.concatenate([[0], np.cumsum(counts)]).astype(np.int64))
    return _Staged(
        x_lab=[f32(csi_to_real(ls.csi)) for ls in bundle.labeled],
        y_lab=[f32(ls.positions) for ls in bundle.labeled],
        x_val=[f32(csi_to_real(vs.csi)) for vs in bundle.validation],
        y_val=[f32(vs.positions) for vs in bundle.validation],
        x_mm=x_mm,
        mm_off=mm_off,
        snaps=bundle.multimodal,
    )


# ---------------------------------------------------------------------------
# pretraining


def pretrain(bundle: DatasetBundle, cfg: ExperimentConfig, *, hook=None) -> Checkpoint:
    """Supervised training of one model per base station on its labeled set.

    Each epoch shuffles that station's labeled pairs and takes one SGD step
    per mini-batch of ``train.batch_labeled``. Returns a checkpoint whose
    ``extra`` carries per-epoch train/validation loss curves.
    """
    tr = cfg.train
    st = _stage(bundle)
    n_bs = bundle.world.n_bs
    params = [init_params(cfg.arch, _stream(cfg.seed, _TAG_INIT, b)) for b in range(n_bs)]
    train_hist = np.zeros((n_bs, tr.pretrain_epochs))
    val_hist = np.zeros((n_bs, tr.pretrain_epochs))
    for b in range(n_bs):
        x, y = st.x_lab[b], st.y_lab[b]
        n = x.shape[0]
        for e in range(1, tr.pretrain_epochs + 1):
            lr = staircase_lr(
                tr.pretrain_lr,
                e,
                factor=tr.lr_decay_factor,
                start=tr.pretrain_decay_start,
                every=tr.pretrain_decay_every,
            )
            perm = _stream(cfg.seed, _TAG_PRETRAIN, b, e).permutation(n)
            total = 0.0
            for i in range(0, n, tr.batch_labeled):
                idx = perm[i : i + tr.batch_labeled]
                loss, grad = mse_and_grad(cfg.arch, params[b], x[idx], y[idx])
                params[b] = sgd_step(params[b], grad, lr)
                total += loss * len(idx)
            train_hist[b, e - 1] = total / n
            val_hist[b, e - 1] = mse_loss(cfg.arch, params[b], st.x_val[b], st.y_val[b])
            if hook is not None:
                hook({"bs": b, "epoch": e, "lr": lr, "train": train_hist[b, e - 1], "val": val_hist[b, e - 1]})
    return Checkpoint(
        kind="pretrain",
        arch=cfg.arch,
        params=params,
        iteration=tr.pretrain_epochs,
        fields=None,
        extra={"pretrain_train_loss": train_hist, "pretrain_val_loss": val_hist},
    )


# ---------------------------------------------------------------------------
# detection-supervised fine-tuning


def _refresh_fields(cfg: ExperimentConfig, params, st: _Staged) -> list[ErrorField]:
    tr = cfg.train
    return [
        estimate_error_field(
            cfg.arch,
            params[b],
            st.x_val[b],
            st.y_val[b],
            bounds=tuple(cfg.world.street_bounds),
            cell_size=tr.field_cell_size,
            min_count=tr.field_min_bin,
            floor=tr.field_floor,
        )
        for b in range(len(params))
    ]


def _match_batch(cfg, params, st, fields, batch_idx):
    """Solve the assignment problem for each snapshot in the batch.

    Returns per-BS concatenated tensors (inputs, targets, matched mask,
    per-snapshot row counts) plus matching diagnostics. Unmatched rows get
    their own prediction as target, taken from the same batched forward pass
    used later for gradients so the zero-residual property holds bitwise.
    """
    n_bs = len(params)
    arch = cfg.arch
    x_u, preds, offs = [], [], []
    for b in range(n_bs):
        off = st.mm_off[b]
        idx = np.concatenate([np.arange(off[k], off[k + 1]) for k in batch_idx])
        o = np.concatenate([[0], np.cumsum([off[k + 1] - off[k] for k in batch_idx])])
        x = st.x_mm[b][idx]
        x_u.append(x)
        preds.append(forward(arch, params[b], x) if len(x) else np.zeros((0, 2), np.float32))
        offs.append(o.astype(np.int64))

    labels = [p.copy() for p in preds]
    matched = [np.zeros(p.shape[0], dtype=bool) for p in preds]
    n_match = n_det = n_correct = 0
    for j, k in enumerate(batch_idx):
        snap = st.snaps[k]
        segs = [(preds[b][offs[b][j] : offs[b][j + 1]], b) for b in range(n_bs)]
        row_preds = np.concatenate([s for s, _ in segs])
        if snap.n_detections and len(row_preds):
            sig = np.concatenate([fields[b].query(s) if len(s) else np.zeros(0) for s, b in segs])
            cost = build_cost_matrix(row_preds, sig, snap.detections)
            match = solve_km(cost.entries)
            true_rows = snap.det_true_rows()
            n_det += snap.n_detections
            n_match += int(np.sum(match >= 0))
            n_correct += int(np.sum(match[true_rows] == np.arange(snap.n_detections)))
            r0 = 0
            for b in range(n_bs):
                r1 = r0 + (offs[b][j + 1] - offs[b][j])
                sel = match[r0:r1]
                hit = sel >= 0
                rows = np.arange(offs[b][j], offs[b][j + 1])
                labels[b][rows[hit]] = snap.detections[sel[hit]].astype(labels[b].dtype)
                matched[b][rows[hit]] = True
                r0 = r1
    return x_u, preds, labels, matched, offs, (n_match, n_det, n_correct)


def _unlabeled_grad(cfg, params_b, x_u, labels, offs, val_grad):
    """Weighted detection-supervised loss and gradient for one station.

    Per-snapshot sums are normalized by that snapshot's row count and
    averaged over the batch; rows in empty snapshots do not occur. Weights
    come from gradient alignment against ``val_grad``.
    """
    tr = cfg.train
    n_batch = len(offs) - 1
    if x_u.shape[0] == 0:
        return 0.0, np.zeros_like(params_b), np.zeros(0), 0.0
    if tr.weighting == "none":
        weights = np.ones(x_u.shape[0])
        mu = 0.0
    else:
        _, raw = per_sample_grad_dots(cfg.arch, params_b, x_u, labels, ref=val_grad)
        weights, mu = rectify_weights(raw, tr.xi, tr.weighting)
    counts = np.diff(offs)
    per_row_norm = np.repeat(
        np.divide(1.0, counts * n_batch, out=np.zeros(len(counts)), where=counts > 0), counts
    )
    loss, grad = mse_and_grad(
        cfg.arch, params_b, x_u, labels, weights=weights * per_row_norm, denom=1.0
    )
    return loss, grad, weights, mu


def run_hard_em(
    bundle: DatasetBundle,
    cfg: ExperimentConfig,
    start: Checkpoint,
    *,
    metrics_path: str | Path | None = None,
    hook=None,
    checkpoint_path: str | Path | None = None,
    checkpoint_every: int = 0,
) -> Checkpoint:
    """Fine-tune pretrained models against camera detections.

    ``start`` is either a pretraining checkpoint (begins at iteration 1) or
    an ``em`` checkpoint to resume. Because every iteration reseeds from
    (seed, tag, iteration) and the expected-error fields live in the
    checkpoint, a resumed run is bit-identical to an uninterrupted one.
    """
    tr = cfg.train
    st = _stage(bundle)
    n_bs = bundle.world.n_bs
    if start.kind == "em":
        it0, params, fields = start.iteration, [p.copy() for p in start.params], start.fields
    elif start.kind == "pretrain":
        it0, params, fields = 0, [p.copy() for p in start.params], None
    else:
        raise ValueError(f"cannot fine-tune from a {start.kind!r} checkpoint")

    writer = MetricsCsv(metrics_path, n_bs) if metrics_path else None
    prev_vg = [None] * n_bs
    prev_params = [None] * n_bs

    for i in range(it0 + 1, tr.iterations + 1):
        lr = staircase_lr(
            tr.lr, i, factor=tr.lr_decay_factor, start=tr.em_decay_start, every=tr.em_decay_every
        )
        if fields is None or (i - 1) % tr.sigma_refresh_period == 0:
            fields = _refresh_fields(cfg, params, st)

        rng = _stream(cfg.seed, _TAG_EM, i)
        batch_idx = rng.choice(len(st.snaps), size=min(tr.batch_snapshots, len(st.snaps)), replace=False)
        x_u, _, labels, _, offs, (n_match, n_det, n_correct) = _match_batch(
            cfg, params, st, fields, batch_idx
        )

        row = {
            "iteration": i,
            "lr": lr,
            "n_match": n_match,
            "n_det": n_det,
            "match_acc": n_correct / n_det if n_det else np.nan,
        }
        for b in range(n_bs):
            # labeled batch sized to this BS's row count in the snapshot batch
            n_rows = x_u[b].shape[0]
            pool = st.x_lab[b].shape[0]
            size = max(1, n_rows)
            lab_idx = rng.choice(pool, size=size, replace=size > pool)

            val_loss, val_grad = mse_and_grad(cfg.arch, params[b], st.x_val[b], st.y_val[b])
            u_loss, u_grad, weights, mu = _unlabeled_grad(
                cfg, params[b], x_u[b], labels[b], offs[b], val_grad
            )
            l_loss, l_grad = mse_and_grad(cfg.arch, params[b], st.x_lab[b][lab_idx], st.y_lab[b][lab_idx])
            grad = tr.gamma * u_grad + (1.0 - tr.gamma) * l_grad

            vg_norm = float(np.linalg.norm(val_grad))
            secant = 0.0
            if prev_vg[b] is not None:
                dp = float(np.linalg.norm(params[b] - prev_params[b]))
                if dp > 0:
                    secant = float(np.linalg.norm(val_grad - prev_vg[b])) / dp
            prev_vg[b], prev_params[b] = val_grad, params[b]

            params[b] = sgd_step(params[b], grad, lr)

            counts = np.diff(offs[b])
            row.update(
                {
                    f"val_loss_b{b}": val_loss,
                    f"val_gnorm_b{b}": vg_norm,
                    f"lab_loss_b{b}": l_loss,
                    f"unl_loss_b{b}": u_loss,
                    f"grad_norm_b{b}": float(np.linalg.norm(grad)),
                    f"secant_b{b}": secant,
                    f"mu_b{b}": mu,
                    f"mean_w_b{b}": float(np.mean(weights)) if len(weights) else 1.0,
                    f"rows_b{b}": n_rows,
                    f"snap_rows_b{b}": float(np.mean(counts[counts > 0])) if np.any(counts > 0) else 0.0,
                }
            )
        if writer:
            writer.write(row)
        if hook is not None:
            hook(row)
        if checkpoint_path and checkpoint_every and i % checkpoint_every == 0 and i < tr.iterations:
            save_checkpoint(
                checkpoint_path, Checkpoint("em", cfg.arch, params, i, fields=fields)
            )
    if writer:
        writer.close()
    return Checkpoint(kind="em", arch=cfg.arch, params=params, iteration=tr.iterations, fields=fields)


# ---------------------------------------------------------------------------
# self-training baseline (no detections involved)


def run_pseudo_label(
    bundle: DatasetBundle,
    cfg: ExperimentConfig,
    start: Checkpoint,
    *,
    metrics_path: str | Path | None = None,
    hook=None,
) -> Checkpoint:
    """Self-training baseline: the frozen pretrained model labels every
    unlabeled CSI sample once, then training proceeds with the same
    weighting and gradient mixing as the detection-supervised loop. Shows
    what the reweighting machinery does without an external signal.
    """
    if start.kind != "pretrain":
        raise ValueError(f"pseudo-label training starts from a pretrain checkpoint, got {start.kind!r}")
    tr = cfg.train
    st = _stage(bundle)
    n_bs = bundle.world.n_bs
    params = [p.copy() for p in start.params]
    pseudo_y = [
        predict_batched(cfg.arch, start.params[b], st.x_mm[b]).astype(np.float32)
        for b in range(n_bs)
    ]
    writer = MetricsCsv(metrics_path, n_bs) if metrics_path else None

    for i in range(1, tr.iterations + 1):
        lr = staircase_lr(
            tr.lr, i, factor=tr.lr_decay_factor, start=tr.em_decay_start, every=tr.em_decay_every
        )
        rng = _stream(cfg.seed, _TAG_PSEUDO, i)
        row = {"iteration": i, "lr": lr, "n_match": 0, "n_det": 0, "match_acc": np.nan}
        for b in range(n_bs):
            n_rows = st.x_mm[b].shape[0]
            size = min(tr.batch_labeled, n_rows)
            u_idx = rng.choice(n_rows, size=size, replace=False)
            lab_idx = rng.choice(st.x_lab[b].shape[0], size=size, replace=size > st.x_lab[b].shape[0])

            val_loss, val_grad = mse_and_grad(cfg.arch, params[b], st.x_val[b], st.y_val[b])
            x_u, y_u = st.x_mm[b][u_idx], pseudo_y[b][u_idx]
            if tr.weighting == "none":
                weights, mu = np.ones(size), 0.0
            else:
                _, raw = per_sample_grad_dots(cfg.arch, params[b], x_u, y_u, ref=val_grad)
                weights, mu = rectify_weights(raw, tr.xi, tr.weighting)
            u_loss, u_grad = mse_and_grad(
                cfg.arch, params[b], x_u, y_u, weights=weights / size, denom=1.0
            )
            l_loss, l_grad = mse_and_grad(cfg.arch, params[b], st.x_lab[b][lab_idx], st.y_lab[b][lab_idx])
            grad = tr.gamma * u_grad + (1.0 - tr.gamma) * l_grad
            params[b] = sgd_step(params[b], grad, lr)
            row.update(
                {
                    f"val_loss_b{b}": val_loss,
                    f"val_gnorm_b{b}": float(np.linalg.norm(val_grad)),
                    f"lab_loss_b{b}": l_loss,
                    f"unl_loss_b{b}": u_loss,
                    f"grad_norm_b{b}": float(np.linalg.norm(grad)),
                    f"secant_b{b}": 0.0,
                    f"mu_b{b}": mu,
                    f"mean_w_b{b}": float(np.mean(weights)),
                    f"rows_b{b}": size,
                    f"snap_rows_b{b}": 0.0,
                }
            )
        if writer:
            writer.write(row)
        if hook is not None:
            hook(row)
    if writer:
        writer.close()
    return Checkpoint(kind="pseudo", arch=cfg.arch, params=params, iteration=tr.iterations, fields=None)


# ---------------------------------------------------------------------------
# metrics CSV


def _metric_columns(n_bs: int) -> list[str]:
    cols = ["iteration", "lr", "n_match", "n_det", "match_acc"]
    per_bs = [
        "val_loss",
        "val_gnorm",
        "lab_loss",
        "unl_loss",
        "grad_norm",
        "secant",
        "mu",
        "mean_w",
        "rows",
        "snap_rows",
    ]
    for b in range(n_bs):
        cols.extend(f"{name}_b{b}" for name in per_bs)
    return cols


class MetricsCsv:
    """Append-only per-iteration metrics log; the header is written once."""

    def __init__(self, path: str | Path, n_bs: int):
        self.path = Path(path)
        self.columns = _metric_columns(n_bs)
        self.path.parent.mkdir(parents=True, exist_ok=True)
        new = not self.path.exists() or self.path.stat().st_size == 0
        self._fh = open(self.path, "a", newline="")
        self._writer = csv.DictWriter(self._fh, fieldnames=self.columns)
        if new:
            self._writer.writeheader()
            self._fh.flush()

    def write(self, row: dict) -> None:
        self._writer.writerow({k: row.get(k, "") for k in self.columns})
        self._fh.flush()

    def close(self) -> None:
        self._fh.close()


def read_metrics(path: str | Path) -> dict[str, np.ndarray]:
    data = np.genfromtxt(path, delimiter=",", names=True)
    if data.ndim == 0:
        data = data.reshape(1)
    return {name: np.asarray(data[name]) for name in data.dtype.names}


# ---------------------------------------------------------------------------
# step-size compliance report


@dataclass
class Lemma1Report:
    """Post-hoc audit of the validation-loss descent condition.

    For each logged iteration the admissible step size is estimated as
    ``mu * n / (2 * L * beta^2)`` with ``beta`` the largest gradient norm
    seen so far and ``L`` the largest secant estimate of the validation
    gradient's Lipschitz constant. Purely diagnostic: training never reads
    this.
    """

    bounds: np.ndarray  # (n_bs, T) admissible step estimate
    lr: np.ndarray  # (T,)
    compliant: np.ndarray  # (n_bs, T) lr <= bound (where bound is defined)
    val_increase: np.ndarray  # (n_bs, T) validation loss went up next step
    frac_compliant: float
    frac_increase_all: float
    frac_increase_compliant: float


def lemma1_monitor(metrics: dict[str, np.ndarray], n_bs: int) -> Lemma1Report:
    lr = np.atleast_1d(metrics["lr"])
    t = len(lr)
    bounds = np.full((n_bs, t), np.nan)
    compliant = np.zeros((n_bs, t), dtype=bool)
    increase = np.zeros((n_bs, t), dtype=bool)
    for b in range(n_bs):
        g = np.atleast_1d(metrics[f"grad_norm_b{b}"])
        vgn = np.atleast_1d(metrics[f"val_gnorm_b{b}"])
        sec = np.atleast_1d(metrics[f"secant_b{b}"])
        mu = np.atleast_1d(metrics[f"mu_b{b}"])
        n = np.atleast_1d(metrics[f"snap_rows_b{b}"])
        val = np.atleast_1d(metrics[f"val_loss_b{b}"])
        beta = np.maximum.accumulate(np.maximum(g, vgn))
        lhat = np.maximum.accumulate(sec)
        ok = (lhat > 0) & (beta > 0) & (mu > 0) & (n > 0)
        bounds[b, ok] = mu[ok] * n[ok] / (2.0 * lhat[ok] * beta[ok] ** 2)
        compliant[b] = ok & (lr <= bounds[b])
        increase[b, :-1] = np.diff(val) > 0
    defined = ~np.isnan(bounds)
    n_def = int(defined.sum())
    n_comp = int(compliant.sum())
    inc_comp = increase[compliant]
    return Lemma1Report(
        bounds=bounds,
        lr=lr,
        compliant=compliant,
        val_increase=increase,
        frac_compliant=n_comp / n_def if n_def else 0.0,
        frac_increase_all=float(increase[:, :-1].mean()) if t > 1 else 0.0,
        frac_increase_compliant=float(inc_comp.mean()) if inc_comp.size else 0.0,
    )
