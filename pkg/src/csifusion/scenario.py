"""Street scene simulation: vehicles, serving-cell association, cameras.

One time slot ("snapshot") contains vehicles dropped uniformly inside the
street rectangle. Each vehicle attaches to one base station (nearest BS,
with a hysteresis band within which the choice falls randomly between the
two nearest, mimicking sticky handover) and its serving BS records one noisy
CSI estimate.

Cameras at every BS observe every vehicle, not only the attached ones. A
vehicle produces a detection when at least one camera sees it: the camera's
BS must be within ``x_axis_cutoff`` along the street axis, the vehicle must
project inside the image, and a per-camera Bernoulli miss is applied. The
first succeeding camera (BS-major order) supplies the measurement: the true
position displaced along the camera's range axis by Gaussian noise. Each
vehicle contributes at most one detection, matching the assumption that the
fused detection set is a noisy subset of the true vehicle positions; the
fused set is then deduplicated by iteratively collapsing the closest pair of
detections under ``dedup_radius`` to its midpoint. Both steps preserve the
invariant that the detection count never exceeds the vehicle (CSI) count.

The truth links (which vehicle produced each CSI row and each detection) are
carried on the snapshot for evaluation; the training algorithm never reads
them.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .channel import ChannelConfig, PilotBlock, estimate_csi, make_pilot, synthesize_channel
from .geometry import CameraConfig, in_field_of_view

__all__ = [
    "WorldConfig",
    "Snapshot",
    "LabeledSet",
    "DatasetSizes",
    "DatasetBundle",
    "make_street_world",
    "generate_snapshot",
    "build_datasets",
]

# stream tags for per-purpose seed derivation
_TAG_LABELED = 0
_TAG_MULTIMODAL = 1
_TAG_TEST = 2


@dataclass(frozen=True)
class WorldConfig:
    """Scene layout and detection pipeline parameters."""

    bs_positions: tuple[tuple[float, float], ...]
    cameras: tuple[tuple[CameraConfig, ...], ...]
    street_bounds: tuple[float, float, float, float]
    vehicles_per_slot: tuple[int, int]
    detection_noise_std: float = 1.0
    miss_prob: float = 0.2
    x_axis_cutoff: float = 55.0
    dedup_radius: float = 1.0
    a3_hysteresis: float = 2.0

    def __post_init__(self) -> None:
        if len(self.bs_positions) < 1:
            raise ValueError("world.bs_positions needs at least one base station")
        if len(self.cameras) != len(self.bs_positions):
            raise ValueError("world.cameras must list one camera tuple per base station")
        xmin, xmax, ymin, ymax = self.street_bounds
        if not (xmin < xmax and ymin < ymax):
            raise ValueError(f"world.street_bounds malformed: {self.street_bounds}")
        lo, hi = self.vehicles_per_slot
        if not (0 <= lo <= hi):
            raise ValueError(f"world.vehicles_per_slot malformed: {self.vehicles_per_slot}")
        if not 0.0 <= self.miss_prob <= 1.0:
            raise ValueError(f"world.miss_prob must be in [0, 1], got {self.miss_prob}")
        if self.detection_noise_std < 0:
            raise ValueError("world.detection_noise_std must be >= 0")
        if self.x_axis_cutoff <= 0:
            raise ValueError("world.x_axis_cutoff must be positive")
        if self.dedup_radius < 0:
            raise ValueError("world.dedup_radius must be >= 0")
        if self.a3_hysteresis < 0:
            raise ValueError("world.a3_hysteresis must be >= 0")

    @property
    def n_bs(self) -> int:
        return len(self.bs_positions)


@dataclass
class Snapshot:
    """One time slot: vehicles, their CSI grouped per BS, fused detections."""

    positions: np.ndarray  # (V, 2)
    serving_bs: np.ndarray  # (V,)
    csi: list[np.ndarray]  # per BS (V_b, n_ant, n_sub) complex
    csi_vehicle: list[np.ndarray]  # per BS (V_b,) vehicle index of each row
    detections: np.ndarray  # (V_hat, 2)
    det_vehicle: np.ndarray  # (V_hat,) vehicle index of each detection

    @property
    def n_vehicles(self) -> int:
        return self.positions.shape[0]

    @property
    def n_detections(self) -> int:
        return self.detections.shape[0]

    def csi_rows(self) -> tuple[tuple[int, int], ...]:
        """(bs, csi_index) per cost-matrix row, BS-major order."""
        return tuple((b, j) for b in range(len(self.csi)) for j in range(len(self.csi_vehicle[b])))

    def row_of_vehicle(self) -> np.ndarray:
        """Cost-matrix row index of each vehicle's CSI sample."""
        out = np.full(self.n_vehicles, -1, dtype=np.intp)
        row = 0
        for b in range(len(self.csi)):
            for v in self.csi_vehicle[b]:
                out[v] = row
                row += 1
        return out

    def det_true_rows(self) -> np.ndarray:
        """Cost-matrix row of each detection's true vehicle."""
        return self.row_of_vehicle()[self.det_vehicle] if self.n_detections else np.zeros(0, np.intp)

    def row_positions(self) -> np.ndarray:
        """True vehicle position per cost-matrix row (evaluation only)."""
        if self.n_vehicles == 0:
            return np.zeros((0, 2))
        order = np.concatenate([v for v in self.csi_vehicle]) if self.csi_vehicle else []
        return self.positions[order]


@dataclass
class LabeledSet:
    """Supervised pairs for one base station."""

    csi: np.ndarray  # (N, n_ant, n_sub) complex
    positions: np.ndarray  # (N, 2)

    def __len__(self) -> int:
        return self.csi.shape[0]


@dataclass(frozen=True)
class DatasetSizes:
    """Sample counts; the validation split is a third of the labeled one."""

    labeled_per_bs: int = 300
    multimodal: int = 500
    test: int = 100

    def __post_init__(self) -> None:
        if self.labeled_per_bs < 3:
            raise ValueError("sizes.labeled_per_bs must be >= 3 (validation takes a third)")
        if self.multimodal < 1 or self.test < 1:
            raise ValueError("sizes.multimodal and sizes.test must be >= 1")

    @property
    def validation_per_bs(self) -> int:
        return self.labeled_per_bs // 3


@dataclass
class DatasetBundle:
    """Everything one experiment consumes, reproducible from (configs, seed)."""

    world: WorldConfig
    channel: ChannelConfig
    seed: int
    sizes: DatasetSizes
    labeled: list[LabeledSet]
    validation: list[LabeledSet]
    multimodal: list[Snapshot]
    test: list[Snapshot]


def make_street_world(
    *,
    street_x: tuple[float, float] = (-60.0, 60.0),
    street_y: tuple[float, float] = (-8.0, 8.0),
    bs_positions: tuple[tuple[float, float], ...] = ((-25.0, -14.0), (25.0, 14.0)),
    cameras_per_bs: int = 3,
    camera_height: float = 6.0,
    image_size: tuple[int, int] = (1280, 720),
    fov_azimuth: float = 1.1,
    fov_elevation: float = 1.0,
    axis_elevation: float = 1.05,
    vehicles_per_slot: tuple[int, int] = (2, 8),
    detection_noise_std: float = 1.0,
    miss_prob: float = 0.2,
    x_axis_cutoff: float = 55.0,
    dedup_radius: float = 1.0,
    a3_hysteresis: float = 2.0,
) -> WorldConfig:
    """Two-sided street deployment with a fan of cameras per base station.

    Each BS's cameras share the mast and tilt; their yaws fan out around the
    direction facing the street so the fan spans roughly the whole street.
    """
    y_mid = 0.5 * (street_y[0] + street_y[1])
    cams = []
    for bx, by in bs_positions:
        toward = np.pi / 2 if by < y_mid else -np.pi / 2
        offsets = (np.arange(cameras_per_bs) - (cameras_per_bs - 1) / 2) * fov_azimuth
        cams.append(
            tuple(
                CameraConfig(
                    mount_xy=(bx, by),
                    height_above_ground=camera_height,
                    yaw=toward + off,
                    axis_elevation=axis_elevation,
                    fov_azimuth=fov_azimuth,
                    fov_elevation=fov_elevation,
                    image_width=image_size[0],
                    image_height=image_size[1],
                )
                for off in offsets
            )
        )
    return WorldConfig(
        bs_positions=tuple((float(x), float(y)) for x, y in bs_positions),
        cameras=tuple(cams),
        street_bounds=(street_x[0], street_x[1], street_y[0], street_y[1]),
        vehicles_per_slot=vehicles_per_slot,
        detection_noise_std=detection_noise_std,
        miss_prob=miss_prob,
        x_axis_cutoff=x_axis_cutoff,
        dedup_radius=dedup_radius,
        a3_hysteresis=a3_hysteresis,
    )


def _associate(world: WorldConfig, pos: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """Serving BS per vehicle: nearest, with randomized hysteresis ties."""
    n = pos.shape[0]
    bs = np.asarray(world.bs_positions, dtype=float)
    if bs.shape[0] == 1:
        return np.zeros(n, dtype=np.intp)
    d = np.linalg.norm(pos[:, None, :] - bs[None, :, :], axis=2)
    order = np.argsort(d, axis=1, kind="stable")
    first, second = order[:, 0], order[:, 1]
    gap = d[np.arange(n), second] - d[np.arange(n), first]
    coin = rng.integers(0, 2, size=n)
    tied = gap <= world.a3_hysteresis
    return np.where(tied & (coin == 1), second, first).astype(np.intp)


def _detect(world: WorldConfig, pos: np.ndarray, rng: np.random.Generator):
    """Per-vehicle detection events, one measurement per detected vehicle."""
    det_pos, det_veh = [], []
    for v in range(pos.shape[0]):
        hit_cam = None
        for b, (bx, _) in enumerate(world.bs_positions):
            if abs(pos[v, 0] - bx) > world.x_axis_cutoff:
                continue  # beyond the capturing BS's street-axis range
            for cam in world.cameras[b]:
                if not in_field_of_view(pos[v, 0], pos[v, 1], cam):
                    continue
                if world.miss_prob > 0 and rng.random() < world.miss_prob:
                    continue
                hit_cam = cam
                break
            if hit_cam is not None:
                break
        if hit_cam is None:
            continue
        rel = pos[v] - np.asarray(hit_cam.mount_xy)
        rng_axis = rel / max(np.linalg.norm(rel), 1e-9)
        noise = rng.normal(0.0, world.detection_noise_std) if world.detection_noise_std else 0.0
        det_pos.append(pos[v] + noise * rng_axis)
        det_veh.append(v)
    if not det_pos:
        return np.zeros((0, 2)), np.zeros(0, dtype=np.intp)
    return np.asarray(det_pos), np.asarray(det_veh, dtype=np.intp)


def _dedup(points: np.ndarray, links: np.ndarray, true_pos: np.ndarray, radius: float):
    """Collapse closest pairs under ``radius`` to midpoints until stable.

    The merged point keeps the truth link of the member vehicle whose true
    position lies nearest the final coordinates. Idempotent by construction:
    on exit all pairwise distances are >= radius.
    """
    pts = [p.copy() for p in points]
    members = [[int(l)] for l in links]
    while len(pts) >= 2:
        arr = np.asarray(pts)
        d = np.linalg.norm(arr[:, None, :] - arr[None, :, :], axis=2)
        np.fill_diagonal(d, np.inf)
        i, j = np.unravel_index(np.argmin(d), d.shape)
        if d[i, j] >= radius:
            break
        if i > j:
            i, j = j, i
        pts[i] = 0.5 * (pts[i] + pts[j])
        members[i] = members[i] + members[j]
        del pts[j], members[j]
    if not pts:
        return np.zeros((0, 2)), np.zeros(0, dtype=np.intp)
    out_links = []
    for p, mem in zip(pts, members):
        dists = [float(np.linalg.norm(true_pos[m] - p)) for m in mem]
        out_links.append(mem[int(np.argmin(dists))])
    return np.asarray(pts), np.asarray(out_links, dtype=np.intp)


def generate_snapshot(
    world: WorldConfig,
    chan: ChannelConfig,
    rng: np.random.Generator,
    pilot: PilotBlock | None = None,
) -> Snapshot:
    """Simulate one time slot. All randomness comes from ``rng``."""
    if pilot is None:
        pilot = make_pilot(chan)
    lo, hi = world.vehicles_per_slot
    n = int(rng.integers(lo, hi + 1))
    xmin, xmax, ymin, ymax = world.street_bounds
    pos = rng.uniform([xmin, ymin], [xmax, ymax], size=(n, 2)) if n else np.zeros((0, 2))
    serving = _associate(world, pos, rng) if n else np.zeros(0, dtype=np.intp)

    csi, csi_vehicle = [], []
    shape0 = (0, chan.n_antennas, chan.n_subcarriers)
    for b in range(world.n_bs):
        idx = np.flatnonzero(serving == b)
        if idx.size:
            mats = np.stack(
                [
                    estimate_csi(
                        synthesize_channel(world.bs_positions[b], pos[i], chan), pilot, rng
                    )
                    for i in idx
                ]
            )
        else:
            mats = np.zeros(shape0, dtype=complex)
        csi.append(mats)
        csi_vehicle.append(idx.astype(np.intp))

    raw_det, raw_links = _detect(world, pos, rng)
    detections, det_vehicle = _dedup(raw_det, raw_links, pos, world.dedup_radius)
    return Snapshot(
        positions=pos,
        serving_bs=serving,
        csi=csi,
        csi_vehicle=csi_vehicle,
        detections=detections,
        det_vehicle=det_vehicle,
    )


def _stream_rng(seed: int, tag: int, index: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([seed, tag, index]))


def _gen_indexed(args):
    world, chan, seed, tag, idx = args
    return generate_snapshot(world, chan, _stream_rng(seed, tag, idx))


def _snapshot_stream(world, chan, seed, tag, n_workers=1):
    """Yield snapshots for index 0, 1, 2, ...; identical for any worker count."""
    idx = 0
    if n_workers <= 1:
        while True:
            yield _gen_indexed((world, chan, seed, tag, idx))
            idx += 1
    else:
        from concurrent.futures import ProcessPoolExecutor

        wave = max(4 * n_workers, 16)
        with ProcessPoolExecutor(max_workers=n_workers) as pool:
            while True:
                jobs = [(world, chan, seed, tag, i) for i in range(idx, idx + wave)]
                for snap in pool.map(_gen_indexed, jobs, chunksize=4):
                    yield snap
                idx += wave


def build_datasets(
    world: WorldConfig,
    chan: ChannelConfig,
    sizes: DatasetSizes,
    seed: int,
    *,
    n_workers: int = 1,
) -> DatasetBundle:
    """Generate the labeled, validation, multimodal, and test datasets.

    Labeled and validation pairs per BS come from one snapshot stream, split
    at the pair level (first ``labeled_per_bs`` pairs, then
    ``validation_per_bs``), so the two sets are disjoint by construction.
    Multimodal and test snapshot sets use their own streams and keep only
    slots containing at least one vehicle. Deterministic in (configs, seed)
    for any ``n_workers``.
    """
    lo, hi = world.vehicles_per_slot
    if hi == 0:
        raise ValueError("world.vehicles_per_slot upper bound must be >= 1 to build datasets")

    need = sizes.labeled_per_bs + sizes.validation_per_bs
    per_bs_csi: list[list[np.ndarray]] = [[] for _ in range(world.n_bs)]
    per_bs_pos: list[list[np.ndarray]] = [[] for _ in range(world.n_bs)]
    max_slots = 200 + 60 * need * world.n_bs
    stream = _snapshot_stream(world, chan, seed, _TAG_LABELED, n_workers)
    for used in range(max_slots):
        if all(len(p) >= need for p in per_bs_pos):
            break
        snap = next(stream)
        for b in range(world.n_bs):
            if len(per_bs_pos[b]) >= need:
                continue
            for row, v in enumerate(snap.csi_vehicle[b]):
                per_bs_csi[b].append(snap.csi[b][row])
                per_bs_pos[b].append(snap.positions[v])
    else:
        raise ValueError(
            f"could not collect {need} labeled pairs per BS within {max_slots} slots; "
            "check vehicles_per_slot and the BS layout"
        )

    labeled, validation = [], []
    for b in range(world.n_bs):
        csi_arr = np.asarray(per_bs_csi[b][:need])
        pos_arr = np.asarray(per_bs_pos[b][:need])
        nl = sizes.labeled_per_bs
        labeled.append(LabeledSet(csi=csi_arr[:nl], positions=pos_arr[:nl]))
        validation.append(LabeledSet(csi=csi_arr[nl:need], positions=pos_arr[nl:need]))

    def collect(tag: int, count: int) -> list[Snapshot]:
        out: list[Snapshot] = []
        stream = _snapshot_stream(world, chan, seed, tag, n_workers)
        for _ in range(200 + 20 * count):
            if len(out) >= count:
                return out
            snap = next(stream)
            if snap.n_vehicles >= 1:
                out.append(snap)
        raise ValueError(f"could not collect {count} non-empty snapshots")

    return DatasetBundle(
        world=world,
        channel=chan,
        seed=seed,
        sizes=sizes,
        labeled=labeled,
        validation=validation,
        multimodal=collect(_TAG_MULTIMODAL, sizes.multimodal),
        test=collect(_TAG_TEST, sizes.test),
    )
