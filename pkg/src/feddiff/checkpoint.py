"""Binary checkpoint container (format version 1).

Byte layout, in order (all integers little-endian):

    bytes 0-3    magic  b"FDCK"
    bytes 4-7    uint32 format version (currently 1)
    bytes 8-15   uint64 header length H in bytes
    bytes 16..   UTF-8 JSON header of exactly H bytes:
                   {"arrays": [{"name": str, "dtype": "<f4"|"<f8"|"<i8",
                                "shape": [...]} ...],
                    "meta": {...}}
    then         each array's raw C-order little-endian bytes, concatenated
                 in directory order.

Typed wrappers cover parameter vectors (layout + values + mask + norm
stats), noise estimators (architecture + params + schedule betas), latent
codes (theta_T + noises stored in step order T..1), and server state.
"""

from __future__ import annotations

import json
import struct

import numpy as np

from . import codec
from .diffusion import NoiseSchedule, schedule_from_betas
from .exceptions import CheckpointError
from .inversion import LatentCode

MAGIC = b"FDCK"
VERSION = 1
_ALLOWED = {"<f4", "<f8", "<i8"}


def write_container(path, arrays: dict, meta: dict) -> None:
    directory = []
    blobs = []
    for name, arr in arrays.items():
        arr = np.ascontiguousarray(arr)
        dt = arr.dtype.newbyteorder("<")
        if dt.str not in _ALLOWED:
            raise CheckpointError(f"unsupported dtype {arr.dtype} for {name!r}")
        arr = arr.astype(dt, copy=False)
        directory.append({"name": name, "dtype": dt.str,
                          "shape": list(arr.shape)})
        blobs.append(arr.tobytes())
    header = json.dumps({"arrays": directory, "meta": meta},
                        sort_keys=True).encode("utf-8")
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<I", VERSION))
        f.write(struct.pack("<Q", len(header)))
        f.write(header)
        for blob in blobs:
            f.write(blob)


def read_container(path) -> tuple[dict, dict]:
    with open(path, "rb") as f:
        magic = f.read(4)
        if magic != MAGIC:
            raise CheckpointError(f"bad magic {magic!r}")
        (version,) = struct.unpack("<I", f.read(4))
        if version > VERSION:
            raise CheckpointError(f"container version {version} is newer than "
                                  f"supported {VERSION}")
        (hlen,) = struct.unpack("<Q", f.read(8))
        try:
            header = json.loads(f.read(hlen).decode("utf-8"))
        except (UnicodeDecodeError, json.JSONDecodeError) as exc:
            raise CheckpointError(f"corrupt header: {exc}") from exc
        arrays = {}
        for entry in header.get("arrays", []):
            dt = np.dtype(entry["dtype"])
            shape = tuple(entry["shape"])
            nbytes = dt.itemsize * int(np.prod(shape, dtype=np.int64))
            raw = f.read(nbytes)
            if len(raw) != nbytes:
                raise CheckpointError(f"truncated array {entry['name']!r}")
            arrays[entry["name"]] = np.frombuffer(raw, dtype=dt).reshape(shape).copy()
        return arrays, header.get("meta", {})


# -- typed wrappers ----------------------------------------------------------


def save_params(path, vec: np.ndarray, layout: codec.Layout,
                mask: codec.LayerMask | None = None,
                norm: codec.NormStats | None = None) -> None:
    meta = {
        "kind": "params",
        "layout": [[e.name, list(e.shape)] for e in layout.entries],
        "mask": list(mask.generated) if mask is not None else None,
        "has_norm": norm is not None,
    }
    arrays = {"values": np.asarray(vec)}
    if norm is not None:
        arrays["norm_mean"] = norm.mean
        arrays["norm_std"] = norm.std
    write_container(path, arrays, meta)


def load_params(path):
    arrays, meta = read_container(path)
    if meta.get("kind") != "params":
        raise CheckpointError(f"not a params container: {meta.get('kind')!r}")
    layout = codec.Layout.from_shapes((n, tuple(s)) for n, s in meta["layout"])
    mask = (codec.LayerMask(tuple(meta["mask"]))
            if meta.get("mask") is not None else None)
    norm = None
    if meta.get("has_norm"):
        norm = codec.NormStats(mean=arrays["norm_mean"], std=arrays["norm_std"])
    return arrays["values"], layout, mask, norm


def save_estimator(path, est, schedule: NoiseSchedule) -> None:
    meta = {"kind": "estimator", "arch": est.arch,
            "schedule": {"T": schedule.T, "kind": schedule.kind,
                         "id": schedule.schedule_id}}
    write_container(path, {"params": est.params, "beta": schedule.beta}, meta)


def load_estimator(path):
    from .estimators import build_mlp_estimator, build_unet1d_estimator
    arrays, meta = read_container(path)
    if meta.get("kind") != "estimator":
        raise CheckpointError(f"not an estimator container: {meta.get('kind')!r}")
    sched = schedule_from_betas(arrays["beta"],
                                kind=meta["schedule"].get("kind", "custom"))
    arch = meta["arch"]
    if arch["kind"] == "mlp":
        est = build_mlp_estimator(arch["dim"], sched, hidden=arch["hidden"],
                                  depth=arch["depth"],
                                  time_dim=arch["time_dim"])
    elif arch["kind"] == "unet1d":
        est = build_unet1d_estimator(arch["dim"], sched,
                                     base_channels=arch["base_channels"],
                                     time_dim=arch["time_dim"])
    else:
        raise CheckpointError(f"unknown estimator kind {arch['kind']!r}")
    params = arrays["params"].astype(np.float32)
    if params.shape != est.params.shape:
        raise CheckpointError("estimator parameter size mismatch")
    est.params = params
    return est, sched


def save_latent(path, latent: LatentCode) -> None:
    # noises stored T..1, matching the latent-code concatenation order
    meta = {"kind": "latent", "T": latent.T, "dim": latent.dim,
            "schedule_id": latent.schedule_id, "noise_order": "T..1"}
    write_container(path, {"theta_T": latent.theta_T,
                           "eps_tilde": latent.eps_tilde[::-1]}, meta)


def load_latent(path) -> LatentCode:
    arrays, meta = read_container(path)
    if meta.get("kind") != "latent":
        raise CheckpointError(f"not a latent container: {meta.get('kind')!r}")
    return LatentCode(theta_T=arrays["theta_T"],
                      eps_tilde=arrays["eps_tilde"][::-1].copy(),
                      schedule_id=meta["schedule_id"])


def save_server(path, server) -> None:
    """Estimator params + norm stats + a manifest of the rolling window."""
    if server.estimator is None or server.norm_stats is None:
        raise CheckpointError("server has no trained estimator to checkpoint")
    manifest = {str(r): sorted(server.buffer[r]) for r in sorted(server.buffer)}
    meta = {"kind": "server", "arch": server.estimator.arch,
            "schedule": {"T": server.schedule.T, "kind": server.schedule.kind,
                         "id": server.schedule.schedule_id},
            "mask": list(server.mask.generated),
            "layout": [[e.name, list(e.shape)] for e in server.layout.entries],
            "window_manifest": manifest}
    write_container(path, {"params": server.estimator.params,
                           "beta": server.schedule.beta,
                           "norm_mean": server.norm_stats.mean,
                           "norm_std": server.norm_stats.std}, meta)


def describe(path) -> str:
    """Human-readable container summary for the inspect command."""
    arrays, meta = read_container(path)
    lines = [f"kind: {meta.get('kind', 'unknown')}"]
    if "layout" in meta:
        lines.append("layout:")
        for name, shape in meta["layout"]:
            lines.append(f"  {name}: {tuple(shape)}")
    if meta.get("mask") is not None:
        lines.append(f"mask (generated layers): {', '.join(meta['mask'])}")
    if "schedule" in meta:
        s = meta["schedule"]
        lines.append(f"schedule: kind={s['kind']} T={s['T']} id={s['id']}")
    if "arch" in meta:
        lines.append(f"estimator: {json.dumps(meta['arch'], sort_keys=True)}")
    if meta.get("kind") == "latent":
        lines.append(f"latent: T={meta['T']} dim={meta['dim']} "
                     f"schedule={meta['schedule_id']} order={meta['noise_order']}")
    if "window_manifest" in meta:
        lines.append(f"window rounds: {sorted(meta['window_manifest'])}")
    for name, arr in arrays.items():
        stats = ""
        if np.issubdtype(arr.dtype, np.floating) and arr.size:
            stats = (f"  mean={arr.mean():.6g} std={arr.std():.6g} "
                     f"min={arr.min():.6g} max={arr.max():.6g}")
        lines.append(f"array {name}: shape={tuple(arr.shape)} "
                     f"dtype={arr.dtype.str}{stats}")
    return "\n".join(lines)
