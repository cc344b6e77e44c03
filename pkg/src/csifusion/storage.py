"""On-disk formats: dataset bundles and model checkpoints.

Everything is written through ``save_npz_deterministic`` so that rerunning a
generation or training command with the same inputs produces byte-identical
files. Plain ``np.savez`` embeds the current wall-clock time in every zip
member header, which breaks that guarantee; the writer here pins the member
timestamps and orders members by name.

A dataset bundle is one ``.npz`` plus a ``.json`` sidecar carrying the scene,
channel and size configuration that produced it. A checkpoint is a single
``.npz`` with a small JSON blob embedded as a uint8 array, so it can be moved
around as one file.
"""

from __future__ import annotations

import json
import zipfile
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .channel import ChannelConfig
from .geometry import CameraConfig
from .matching import ErrorField
from .network import ArchSpec
from .scenario import DatasetBundle, DatasetSizes, LabeledSet, Snapshot, WorldConfig

__all__ = [
    "save_npz_deterministic",
    "save_bundle",
    "load_bundle",
    "Checkpoint",
    "save_checkpoint",
    "load_checkpoint",
    "encode_world",
    "decode_world",
    "encode_channel",
    "decode_channel",
]

_FORMAT_VERSION = 1
# fixed member timestamp: the zip epoch
_ZIP_EPOCH = (1980, 1, 1, 0, 0, 0)


def save_npz_deterministic(path: str | Path, arrays: dict[str, np.ndarray]) -> None:
    """Write ``arrays`` as an uncompressed npz with reproducible bytes.

    Members are stored sorted by name with a constant timestamp, so the
    output depends only on the array contents. ``np.load`` reads the result
    like any other npz file.
    """
    path = _npz_path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with zipfile.ZipFile(path, "w", compression=zipfile.ZIP_STORED) as zf:
        for name in sorted(arrays):
            info = zipfile.ZipInfo(name + ".npy", date_time=_ZIP_EPOCH)
            info.compress_type = zipfile.ZIP_STORED
            info.external_attr = 0o644 << 16
            with zf.open(info, "w") as fh:
                np.lib.format.write_array(fh, np.asanyarray(arrays[name]), allow_pickle=False)


def _npz_path(path: str | Path) -> Path:
    p = Path(path)
    return p if p.suffix == ".npz" else Path(str(p) + ".npz")


def _dump_json(obj) -> bytes:
    return (json.dumps(obj, sort_keys=True, indent=2) + "\n").encode("utf-8")


# ---------------------------------------------------------------------------
# config codecs (JSON-safe dicts)


def encode_camera(c: CameraConfig) -> dict:
    return {
        "mount_xy": list(c.mount_xy),
        "height_above_ground": c.height_above_ground,
        "yaw": c.yaw,
        "axis_elevation": c.axis_elevation,
        "fov_azimuth": c.fov_azimuth,
        "fov_elevation": c.fov_elevation,
        "image_width": c.image_width,
        "image_height": c.image_height,
    }


def decode_camera(d: dict) -> CameraConfig:
    d = dict(d)
    return CameraConfig(mount_xy=tuple(d.pop("mount_xy")), **d)


def encode_world(w: WorldConfig) -> dict:
    return {
        "bs_positions": [list(p) for p in w.bs_positions],
        "cameras": [[encode_camera(c) for c in cams] for cams in w.cameras],
        "street_bounds": list(w.street_bounds),
        "vehicles_per_slot": list(w.vehicles_per_slot),
        "detection_noise_std": w.detection_noise_std,
        "miss_prob": w.miss_prob,
        "x_axis_cutoff": w.x_axis_cutoff,
        "dedup_radius": w.dedup_radius,
        "a3_hysteresis": w.a3_hysteresis,
    }


def decode_world(d: dict) -> WorldConfig:
    d = dict(d)
    return WorldConfig(
        bs_positions=tuple(tuple(p) for p in d.pop("bs_positions")),
        cameras=tuple(tuple(decode_camera(c) for c in cams) for cams in d.pop("cameras")),
        street_bounds=tuple(d.pop("street_bounds")),
        vehicles_per_slot=tuple(d.pop("vehicles_per_slot")),
        **d,
    )


def encode_channel(c: ChannelConfig) -> dict:
    return {
        "n_antennas": c.n_antennas,
        "n_subcarriers": c.n_subcarriers,
        "n_pilot_symbols": c.n_pilot_symbols,
        "carrier_spacing_hz": c.carrier_spacing_hz,
        "antenna_spacing_wl": c.antenna_spacing_wl,
        "n_paths": c.n_paths,
        "noise_std": c.noise_std,
        "scatterer_seed": c.scatterer_seed,
        "scatterer_cell_m": c.scatterer_cell_m,
    }


def decode_channel(d: dict) -> ChannelConfig:
    return ChannelConfig(**d)


def encode_sizes(s: DatasetSizes) -> dict:
    return {"labeled_per_bs": s.labeled_per_bs, "multimodal": s.multimodal, "test": s.test}


def decode_sizes(d: dict) -> DatasetSizes:
    return DatasetSizes(**d)


# ---------------------------------------------------------------------------
# dataset bundles


def _pack_snapshots(prefix: str, snaps: list[Snapshot], n_bs: int) -> dict[str, np.ndarray]:
    def cat(parts, empty_shape, dtype):
        parts = [np.asarray(p) for p in parts if np.asarray(p).size]
        if not parts:
            return np.zeros(empty_shape, dtype=dtype)
        return np.concatenate(parts).astype(dtype, copy=False)

    def offsets(counts):
        return np.concatenate([[0], np.cumsum(counts)]).astype(np.int64)

    out = {
        f"{prefix}_veh_pos": cat([s.positions for s in snaps], (0, 2), np.float64),
        f"{prefix}_serving": cat([s.serving_bs for s in snaps], (0,), np.int64),
        f"{prefix}_veh_off": offsets([s.n_vehicles for s in snaps]),
        f"{prefix}_det_pos": cat([s.detections for s in snaps], (0, 2), np.float64),
        f"{prefix}_det_veh": cat([s.det_vehicle for s in snaps], (0,), np.int64),
        f"{prefix}_det_off": offsets([s.n_detections for s in snaps]),
    }
    for b in range(n_bs):
        csi = [s.csi[b] for s in snaps]
        shape = (0,) + csi[0].shape[1:] if csi else (0, 0, 0)
        out[f"{prefix}_csi_b{b}"] = cat(csi, shape, np.complex128)
        out[f"{prefix}_csiveh_b{b}"] = cat([s.csi_vehicle[b] for s in snaps], (0,), np.int64)
        out[f"{prefix}_csioff_b{b}"] = offsets([len(s.csi_vehicle[b]) for s in snaps])
    return out


def _unpack_snapshots(prefix: str, data, n_bs: int) -> list[Snapshot]:
    veh_off = data[f"{prefix}_veh_off"]
    det_off = data[f"{prefix}_det_off"]
    csi_off = [data[f"{prefix}_csioff_b{b}"] for b in range(n_bs)]
    snaps = []
    for k in range(len(veh_off) - 1):
        v0, v1 = veh_off[k], veh_off[k + 1]
        d0, d1 = det_off[k], det_off[k + 1]
        snaps.append(
            Snapshot(
                positions=data[f"{prefix}_veh_pos"][v0:v1],
                serving_bs=data[f"{prefix}_serving"][v0:v1],
                csi=[
                    data[f"{prefix}_csi_b{b}"][csi_off[b][k] : csi_off[b][k + 1]]
                    for b in range(n_bs)
                ],
                csi_vehicle=[
                    data[f"{prefix}_csiveh_b{b}"][csi_off[b][k] : csi_off[b][k + 1]]
                    for b in range(n_bs)
                ],
                detections=data[f"{prefix}_det_pos"][d0:d1],
                det_vehicle=data[f"{prefix}_det_veh"][d0:d1],
            )
        )
    return snaps


def save_bundle(path: str | Path, bundle: DatasetBundle) -> None:
    """Write a dataset bundle as ``<path>.npz`` plus a ``.json`` sidecar."""
    n_bs = bundle.world.n_bs
    arrays: dict[str, np.ndarray] = {}
    for b in range(n_bs):
        arrays[f"labeled_csi_b{b}"] = bundle.labeled[b].csi
        arrays[f"labeled_pos_b{b}"] = bundle.labeled[b].positions
        arrays[f"val_csi_b{b}"] = bundle.validation[b].csi
        arrays[f"val_pos_b{b}"] = bundle.validation[b].positions
    arrays.update(_pack_snapshots("mm", bundle.multimodal, n_bs))
    arrays.update(_pack_snapshots("test", bundle.test, n_bs))
    save_npz_deterministic(path, arrays)

    sidecar = {
        "format_version": _FORMAT_VERSION,
        "seed": bundle.seed,
        "sizes": encode_sizes(bundle.sizes),
        "world": encode_world(bundle.world),
        "channel": encode_channel(bundle.channel),
    }
    _npz_path(path).with_suffix(".json").write_bytes(_dump_json(sidecar))


def load_bundle(path: str | Path) -> DatasetBundle:
    npz = _npz_path(path)
    sidecar = npz.with_suffix(".json")
    if not sidecar.exists():
        raise FileNotFoundError(
            f"bundle sidecar {sidecar} not found; a bundle is the .npz plus its .json"
        )
    meta = json.loads(sidecar.read_text("utf-8"))
    if meta.get("format_version") != _FORMAT_VERSION:
        raise ValueError(f"unsupported bundle format_version {meta.get('format_version')}")
    world = decode_world(meta["world"])
    with np.load(npz) as data:
        labeled = [
            LabeledSet(csi=data[f"labeled_csi_b{b}"], positions=data[f"labeled_pos_b{b}"])
            for b in range(world.n_bs)
        ]
        validation = [
            LabeledSet(csi=data[f"val_csi_b{b}"], positions=data[f"val_pos_b{b}"])
            for b in range(world.n_bs)
        ]
        multimodal = _unpack_snapshots("mm", data, world.n_bs)
        test = _unpack_snapshots("test", data, world.n_bs)
    return DatasetBundle(
        world=world,
        channel=decode_channel(meta["channel"]),
        seed=meta["seed"],
        sizes=decode_sizes(meta["sizes"]),
        labeled=labeled,
        validation=validation,
        multimodal=multimodal,
        test=test,
    )


# ---------------------------------------------------------------------------
# checkpoints


@dataclass
class Checkpoint:
    """A trained (or in-progress) set of per-BS models plus bookkeeping."""

    kind: str  # "pretrain" | "em" | "pseudo"
    arch: ArchSpec
    params: list[np.ndarray]
    iteration: int
    fields: list[ErrorField] | None = None
    extra: dict[str, np.ndarray] | None = None


def save_checkpoint(path: str | Path, ckpt: Checkpoint) -> None:
    arrays: dict[str, np.ndarray] = {}
    for b, p in enumerate(ckpt.params):
        arrays[f"params_b{b}"] = p
    if ckpt.fields is not None:
        for b, f in enumerate(ckpt.fields):
            arrays[f"field_x_b{b}"] = f.x_edges
            arrays[f"field_y_b{b}"] = f.y_edges
            arrays[f"field_rmse_b{b}"] = f.rmse
            arrays[f"field_scalars_b{b}"] = np.array([f.global_rmse, f.floor, f.nn_threshold])
    extra = ckpt.extra or {}
    for name, arr in extra.items():
        arrays[f"x_{name}"] = arr
    meta = {
        "format_version": _FORMAT_VERSION,
        "kind": ckpt.kind,
        "iteration": int(ckpt.iteration),
        "arch": json.loads(ckpt.arch.to_json()),
        "n_bs": len(ckpt.params),
        "has_fields": ckpt.fields is not None,
        "extra_keys": sorted(extra),
    }
    arrays["meta_json"] = np.frombuffer(_dump_json(meta), dtype=np.uint8)
    save_npz_deterministic(path, arrays)


def load_checkpoint(path: str | Path) -> Checkpoint:
    npz = _npz_path(path)
    if not npz.exists():
        raise FileNotFoundError(f"checkpoint {npz} not found")
    with np.load(npz) as data:
        meta = json.loads(bytes(data["meta_json"]).decode("utf-8"))
        if meta.get("format_version") != _FORMAT_VERSION:
            raise ValueError(f"unsupported checkpoint format_version {meta.get('format_version')}")
        n_bs = meta["n_bs"]
        params = [data[f"params_b{b}"] for b in range(n_bs)]
        fields = None
        if meta["has_fields"]:
            fields = []
            for b in range(n_bs):
                g, fl, thr = data[f"field_scalars_b{b}"]
                fields.append(
                    ErrorField(
                        x_edges=data[f"field_x_b{b}"],
                        y_edges=data[f"field_y_b{b}"],
                        rmse=data[f"field_rmse_b{b}"],
                        global_rmse=float(g),
                        floor=float(fl),
                        nn_threshold=float(thr),
                    )
                )
        extra = {k: data[f"x_{k}"] for k in meta["extra_keys"]} or None
    return Checkpoint(
        kind=meta["kind"],
        arch=ArchSpec.from_json(json.dumps(meta["arch"])),
        params=params,
        iteration=meta["iteration"],
        fields=fields,
        extra=extra,
    )
