"""Named-tensor binary container ("AXSP") and the on-disk clip layout.

Layout (little-endian): magic ``AXSP``, u32 version, u32 entry count, then per
entry: u16 name length, UTF-8 name, u8 dtype code (0 f64, 1 f32, 2 i64),
u8 rank, rank x u32 dims, raw payload.
"""

from __future__ import annotations

import json
import os
import struct
import tempfile
from pathlib import Path
from typing import Mapping

import numpy as np

MAGIC = b"AXSP"
VERSION = 1
DTYPES = {0: np.dtype("<f8"), 1: np.dtype("<f4"), 2: np.dtype("<i8")}
CODES = {"f8": 0, "f4": 1, "i8": 2}


class FormatError(ValueError):
    pass


def atomic_write(path: str | os.PathLike, data: bytes) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def encode(entries: Mapping[str, np.ndarray]) -> bytes:
    parts = [MAGIC, struct.pack("<II", VERSION, len(entries))]
    for name, arr in entries.items():
        arr = np.asarray(arr)
        if arr.dtype.kind in "iub" and arr.dtype != np.int64:
            arr = arr.astype(np.int64)
        code = CODES.get(f"{arr.dtype.kind}{arr.dtype.itemsize}")
        if code is None:
            raise FormatError(f"entry {name!r}: unsupported dtype {arr.dtype}")
        raw = name.encode("utf-8")
        if len(raw) > 0xFFFF or arr.ndim > 255:
            raise FormatError(f"entry {name!r}: name or rank too large")
        parts.append(struct.pack("<H", len(raw)) + raw + struct.pack("<BB", code, arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(np.ascontiguousarray(arr, dtype=DTYPES[code]).tobytes())
    return b"".join(parts)


def decode(buf: bytes) -> dict[str, np.ndarray]:
    if buf[:4] != MAGIC:
        raise FormatError("not an AXSP container (bad magic)")
    try:
        version, count = struct.unpack_from("<II", buf, 4)
        if version != VERSION:
            raise FormatError(f"unsupported container version {version}")
        off = 12
        out: dict[str, np.ndarray] = {}
        for _ in range(count):
            (n,) = struct.unpack_from("<H", buf, off)
            off += 2
            name = buf[off:off + n].decode("utf-8")
            off += n
            code, rank = struct.unpack_from("<BB", buf, off)
            off += 2
            dims = struct.unpack_from(f"<{rank}I", buf, off)
            off += 4 * rank
            dt = DTYPES[code]
            nbytes = int(np.prod(dims, dtype=np.int64)) * dt.itemsize
            if off + nbytes > len(buf):
                raise FormatError(f"entry {name!r} is truncated")
            out[name] = np.frombuffer(buf, dtype=dt, count=nbytes // dt.itemsize, offset=off).reshape(dims).copy()
            off += nbytes
    except (struct.error, KeyError, UnicodeDecodeError) as exc:
        raise FormatError(f"corrupt container: {exc}") from exc
    if off != len(buf):
        raise FormatError("trailing bytes after last entry")
    return out


def save(path, entries: Mapping[str, np.ndarray]) -> None:
    atomic_write(path, encode(entries))


def load(path) -> dict[str, np.ndarray]:
    return decode(Path(path).read_bytes())


# ---------------------------------------------------------------------------
# face bases

def save_basis(path, basis) -> None:
    entries = {"mean": basis.mean}
    entries.update({f"id_{i:03d}": b for i, b in enumerate(basis.id_bases)})
    entries.update({f"exp_{i:03d}": b for i, b in enumerate(basis.exp_bases)})
    if len(basis.forehead):
        entries["forehead"] = basis.forehead.astype(np.int64)
    save(path, entries)


def load_basis(path):
    from .face_model import FaceBasis

    e = load(path)
    ids = sorted(k for k in e if k.startswith("id_"))
    exps = sorted(k for k in e if k.startswith("exp_"))
    if "mean" not in e or not ids or not exps:
        raise FormatError("basis file needs 'mean', 'id_000'.. and 'exp_000'.. entries")
    return FaceBasis(e["mean"], np.stack([e[k] for k in ids]), np.stack([e[k] for k in exps]),
                     e.get("forehead", np.zeros(0, dtype=np.int64)))


# ---------------------------------------------------------------------------
# clip directories

def write_clip(directory, clip) -> None:
    """``frames.bin`` (raw f32 T x H x W x 3), ``gt.axsp`` and ``meta.json``."""
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    atomic_write(d / "frames.bin", np.ascontiguousarray(clip.frames, dtype="<f4").tobytes())
    save(d / "gt.axsp", {"depth": np.asarray(clip.gt_depth, dtype=np.float64),
                         "rppg": np.asarray(clip.gt_rppg, dtype=np.float64)})
    t, h, w, _ = clip.frames.shape
    meta = {
        "frames": "frames.bin", "shape": [t, h, w, 3], "dtype": "float32-le",
        "fps": clip.fps, "label": clip.label, "subject": clip.subject_id,
        "heart_rate_hz": clip.heart_rate,
        "gt_depth": "gt.axsp#depth", "gt_rppg": "gt.axsp#rppg",
        "alpha_id": np.asarray(clip.alpha_id).tolist(),
        "per_frame": [{"alpha_exp": clip.alpha_exp[k].tolist(), "s": float(clip.pose_s[k]),
                       "R": clip.pose_R[k].tolist(), "t": clip.pose_t[k].tolist()} for k in range(t)],
    }
    atomic_write(d / "meta.json", json.dumps(meta, indent=1).encode())


def read_clip(directory, mmap: bool = True):
    from .synthgen import VideoClip, model_basis

    d = Path(directory)
    try:
        meta = json.loads((d / "meta.json").read_text())
        t, h, w, c = meta["shape"]
        if mmap:
            frames = np.memmap(d / meta["frames"], dtype="<f4", mode="r", shape=(t, h, w, c))
        else:
            frames = np.fromfile(d / meta["frames"], dtype="<f4").reshape(t, h, w, c)
        gt = load(d / meta["gt_depth"].split("#")[0])
        pf = meta["per_frame"]
        return VideoClip(
            frames=frames, fps=float(meta["fps"]), label=meta["label"], subject_id=int(meta["subject"]),
            alpha_id=np.array(meta["alpha_id"]), alpha_exp=np.array([p["alpha_exp"] for p in pf]),
            pose_s=np.array([p["s"] for p in pf]), pose_R=np.array([p["R"] for p in pf]),
            pose_t=np.array([p["t"] for p in pf]),
            gt_depth=gt[meta["gt_depth"].split("#")[1]], gt_rppg=gt[meta["gt_rppg"].split("#")[1]],
            heart_rate=meta.get("heart_rate_hz"), basis=model_basis())
    except (OSError, KeyError, ValueError) as exc:
        raise FormatError(f"cannot read clip in {d}: {exc}") from exc
