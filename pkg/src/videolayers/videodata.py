"""Frames, masks, flow fields and homographies on disk.

A dataset is described by a JSON manifest::

    {
      "frames": ["frames/0000.png", ...],
      "masks": [["masks/0_0000.png", ...], ...],      # outer list = layer
      "flow_fwd": ["flow/fwd_0000.flo", ...],          # t -> t+1
      "flow_bwd": ["flow/bwd_0000.flo", ...],          # t+1 -> t
      "homographies": [[h11, h12, ..., h33], ...],     # frame -> canvas
      "order": [[0, 1], ...],                          # optional, back-to-front
      "config": {...}                                  # optional overrides
    }

Relative paths are resolved against the manifest's directory.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Sequence

import numpy as np
from PIL import Image

FLO_MAGIC = 202021.25
_FLO_HEADER = struct.Struct("<fii")


class DataError(ValueError):
    """Raised when input files are missing, malformed or inconsistent."""


@dataclass(frozen=True)
class FlowField:
    u: np.ndarray
    v: np.ndarray
    direction: str = "forward"

    @property
    def shape(self) -> tuple[int, int]:
        return self.u.shape

    def as_array(self) -> np.ndarray:
        """Stack into an (H, W, 2) array of (u, v)."""
        return np.stack([self.u, self.v], axis=-1)

    @classmethod
    def from_array(cls, arr: np.ndarray, direction: str = "forward") -> "FlowField":
        arr = np.asarray(arr)
        return cls(arr[..., 0], arr[..., 1], direction)


@dataclass(frozen=True)
class FrameSequence:
    frames: np.ndarray  # (T, H, W, 3) float in [0, 1]

    @property
    def count(self) -> int:
        return self.frames.shape[0]

    @property
    def height(self) -> int:
        return self.frames.shape[1]

    @property
    def width(self) -> int:
        return self.frames.shape[2]


@dataclass(frozen=True)
class MaskStack:
    masks: np.ndarray  # (N, T, H, W) in {0, 1}
    order: np.ndarray  # (T, N) layer indices, back-to-front

    @property
    def num_layers(self) -> int:
        return self.masks.shape[0]


@dataclass
class Dataset:
    """Everything the optimizer consumes, loaded and validated."""

    frames: FrameSequence
    masks: MaskStack
    flow_fwd: np.ndarray  # (T-1, H, W, 2)
    flow_bwd: np.ndarray  # (T-1, H, W, 2)
    homographies: np.ndarray  # (T, 3, 3), frame -> canvas, h33 = 1
    config: dict[str, Any] = field(default_factory=dict)
    root: Path | None = None


# -- .flo -------------------------------------------------------------------


def read_flo(path: str | Path) -> FlowField:
    """Read a Middlebury .flo file."""
    path = Path(path)
    try:
        data = path.read_bytes()
    except OSError as exc:
        raise DataError(f"{path}: cannot read flow file ({exc})") from exc
    if len(data) < _FLO_HEADER.size:
        raise DataError(f"{path}: truncated .flo header")
    magic, w, h = _FLO_HEADER.unpack_from(data)
    if magic != np.float32(FLO_MAGIC):
        raise DataError(f"{path}: invalid .flo magic {magic!r}")
    if w <= 0 or h <= 0:
        raise DataError(f"{path}: invalid .flo dimensions {w}x{h}")
    need = _FLO_HEADER.size + 8 * w * h
    if len(data) < need:
        raise DataError(f"{path}: truncated .flo payload ({len(data)} < {need} bytes)")
    uv = np.frombuffer(data, dtype="<f4", count=2 * w * h, offset=_FLO_HEADER.size)
    uv = uv.reshape(h, w, 2).astype(np.float32)
    return FlowField(uv[..., 0].copy(), uv[..., 1].copy())


def write_flo(flow: FlowField | np.ndarray, path: str | Path) -> None:
    """Write a Middlebury .flo file; the exact inverse of :func:`read_flo`."""
    if isinstance(flow, FlowField):
        arr = flow.as_array()
    else:
        arr = np.asarray(flow)
    if arr.ndim != 3 or arr.shape[-1] != 2:
        raise DataError(f"flow must be (H, W, 2), got {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise DataError(f"{path}: refusing to write non-finite flow values")
    h, w = arr.shape[:2]
    payload = np.ascontiguousarray(arr, dtype="<f4").tobytes()
    Path(path).write_bytes(_FLO_HEADER.pack(FLO_MAGIC, w, h) + payload)


# -- images -----------------------------------------------------------------


def to_uint8(img: np.ndarray) -> np.ndarray:
    """Map [0, 1] floats to 8-bit with round-half-up."""
    return np.floor(np.clip(img, 0.0, 1.0) * 255.0 + 0.5).astype(np.uint8)


def read_rgb(path: str | Path) -> np.ndarray:
    try:
        with Image.open(path) as im:
            arr = np.asarray(im.convert("RGB"), dtype=np.float64)
    except (OSError, ValueError) as exc:
        raise DataError(f"{path}: cannot read image ({exc})") from exc
    return arr / 255.0


def read_mask(path: str | Path) -> np.ndarray:
    try:
        with Image.open(path) as im:
            arr = np.asarray(im.convert("L"))
    except (OSError, ValueError) as exc:
        raise DataError(f"{path}: cannot read mask ({exc})") from exc
    return (arr >= 128).astype(np.float64)


def write_rgb(img: np.ndarray, path: str | Path) -> None:
    Image.fromarray(to_uint8(img), mode="RGB").save(path)


def write_gray(img: np.ndarray, path: str | Path) -> None:
    Image.fromarray(to_uint8(img), mode="L").save(path)


def write_rgba(color: np.ndarray, alpha: np.ndarray, path: str | Path) -> None:
    rgba = np.concatenate([color, alpha[..., None]], axis=-1)
    Image.fromarray(to_uint8(rgba), mode="RGBA").save(path)


# -- manifest ----------------------------------------------------------------


def normalize_homography(h: Sequence[float] | np.ndarray, where: str = "") -> np.ndarray:
    m = np.asarray(h, dtype=np.float64).reshape(3, 3)
    if not np.all(np.isfinite(m)):
        raise DataError(f"{where}: homography has non-finite entries")
    if abs(np.linalg.det(m)) <= 1e-9 or abs(m[2, 2]) <= 1e-12:
        raise DataError(f"{where}: homography is not invertible")
    m = m / m[2, 2]
    if abs(np.linalg.det(m)) <= 1e-9:
        raise DataError(f"{where}: homography is not invertible")
    return m


def validate_manifest(manifest: dict[str, Any], where: str = "manifest") -> None:
    """Check counts and homographies without touching any image file."""
    for key in ("frames", "masks", "flow_fwd", "flow_bwd", "homographies"):
        if key not in manifest:
            raise DataError(f"{where}: missing key '{key}'")
    n_frames = len(manifest["frames"])
    if n_frames < 2:
        raise DataError(f"{where}: need at least 2 frames, got {n_frames}")
    masks = manifest["masks"]
    if len(masks) < 1:
        raise DataError(f"{where}: need at least one mask layer")
    for i, layer in enumerate(masks):
        if len(layer) != n_frames:
            raise DataError(f"{where}: mask layer {i} has {len(layer)} masks, expected {n_frames}")
    for key in ("flow_fwd", "flow_bwd"):
        if len(manifest[key]) != n_frames - 1:
            kind = "forward" if key == "flow_fwd" else "backward"
            raise DataError(
                f"{where}: expected {n_frames - 1} {kind} flows, got {len(manifest[key])}"
            )
    homs = manifest["homographies"]
    if len(homs) != n_frames:
        raise DataError(f"{where}: expected {n_frames} homographies, got {len(homs)}")
    for t, h in enumerate(homs):
        if len(h) != 9:
            raise DataError(f"{where}: homography {t} must have 9 entries")
        normalize_homography(h, f"{where}: homography {t}")
    order = manifest.get("order")
    if order is not None:
        if len(order) != n_frames:
            raise DataError(f"{where}: expected {n_frames} order entries, got {len(order)}")
        for t, o in enumerate(order):
            if sorted(o) != list(range(len(masks))):
                raise DataError(f"{where}: order {t} is not a permutation of 0..{len(masks) - 1}")


def load_sequence(manifest_path: str | Path) -> Dataset:
    """Load and validate every file referenced by a manifest."""
    manifest_path = Path(manifest_path)
    try:
        manifest = json.loads(manifest_path.read_text())
    except OSError as exc:
        raise DataError(f"{manifest_path}: cannot read manifest ({exc})") from exc
    except json.JSONDecodeError as exc:
        raise DataError(f"{manifest_path}: invalid JSON ({exc})") from exc
    validate_manifest(manifest, str(manifest_path))
    root = manifest_path.parent

    def resolve(p: str) -> Path:
        q = Path(p)
        return q if q.is_absolute() else root / q

    frames = []
    for t, p in enumerate(manifest["frames"]):
        img = read_rgb(resolve(p))
        if frames and img.shape != frames[0].shape:
            raise DataError(
                f"{resolve(p)}: frame {t} is {img.shape[1]}x{img.shape[0]}, "
                f"expected {frames[0].shape[1]}x{frames[0].shape[0]}"
            )
        frames.append(img)
    frames_arr = np.stack(frames)
    T, H, W = frames_arr.shape[:3]

    masks = np.zeros((len(manifest["masks"]), T, H, W))
    for i, layer in enumerate(manifest["masks"]):
        for t, p in enumerate(layer):
            m = read_mask(resolve(p))
            if m.shape != (H, W):
                raise DataError(f"{resolve(p)}: mask layer {i} frame {t} has shape {m.shape}, expected {(H, W)}")
            masks[i, t] = m
    N = masks.shape[0]

    flows = {}
    for key in ("flow_fwd", "flow_bwd"):
        arrs = []
        for t, p in enumerate(manifest[key]):
            f = read_flo(resolve(p))
            if f.shape != (H, W):
                raise DataError(f"{resolve(p)}: {key} {t} has shape {f.shape}, expected {(H, W)}")
            a = f.as_array().astype(np.float64)
            if not np.all(np.isfinite(a)):
                raise DataError(f"{resolve(p)}: {key} {t} has non-finite values")
            arrs.append(a)
        flows[key] = np.stack(arrs)

    homs = np.stack(
        [normalize_homography(h, f"{manifest_path}: homography {t}") for t, h in enumerate(manifest["homographies"])]
    )
    order = manifest.get("order")
    order_arr = np.tile(np.arange(N), (T, 1)) if order is None else np.asarray(order, dtype=np.int64)

    return Dataset(
        frames=FrameSequence(np.clip(frames_arr, 0.0, 1.0)),
        masks=MaskStack(masks, order_arr),
        flow_fwd=flows["flow_fwd"],
        flow_bwd=flows["flow_bwd"],
        homographies=homs,
        config=dict(manifest.get("config", {})),
        root=root,
    )


def write_dataset(ds: Dataset, out_dir: str | Path, extra: dict[str, Any] | None = None) -> Path:
    """Write frames, masks and flows as files plus a manifest; returns the manifest path."""
    out = Path(out_dir)
    for sub in ("frames", "masks", "flow"):
        (out / sub).mkdir(parents=True, exist_ok=True)
    T = ds.frames.count
    frames = []
    for t in range(T):
        name = f"frames/{t:04d}.png"
        write_rgb(ds.frames.frames[t], out / name)
        frames.append(name)
    masks = []
    for i in range(ds.masks.num_layers):
        layer = []
        for t in range(T):
            name = f"masks/{i}_{t:04d}.png"
            write_gray(ds.masks.masks[i, t], out / name)
            layer.append(name)
        masks.append(layer)
    fwd, bwd = [], []
    for t in range(T - 1):
        write_flo(ds.flow_fwd[t], out / f"flow/fwd_{t:04d}.flo")
        write_flo(ds.flow_bwd[t], out / f"flow/bwd_{t:04d}.flo")
        fwd.append(f"flow/fwd_{t:04d}.flo")
        bwd.append(f"flow/bwd_{t:04d}.flo")
    manifest = {
        "frames": frames,
        "masks": masks,
        "flow_fwd": fwd,
        "flow_bwd": bwd,
        "homographies": [list(map(float, h.reshape(-1))) for h in ds.homographies],
        "order": ds.masks.order.tolist(),
        "config": dict(ds.config),
    }
    if extra:
        manifest.update(extra)
    path = out / "manifest.json"
    path.write_text(json.dumps(manifest, indent=1))
    return path


def resize_dataset(ds: Dataset, width: int, height: int) -> Dataset:
    """Resample every input to (width, height); flows and homographies are rescaled to match."""
    T, H, W = ds.frames.count, ds.frames.height, ds.frames.width
    if (W, H) == (width, height):
        return ds
    sx, sy = width / W, height / H

    def rs(img: np.ndarray, resample) -> np.ndarray:
        chans = img[..., None] if img.ndim == 2 else img
        out = np.stack(
            [
                np.asarray(Image.fromarray(chans[..., c].astype(np.float32), mode="F").resize((width, height), resample))
                for c in range(chans.shape[-1])
            ],
            axis=-1,
        ).astype(np.float64)
        return out[..., 0] if img.ndim == 2 else out

    frames = np.stack([np.clip(rs(f, Image.BILINEAR), 0, 1) for f in ds.frames.frames])
    masks = np.stack([[(rs(m, Image.BILINEAR) >= 0.5).astype(np.float64) for m in layer] for layer in ds.masks.masks])
    scale = np.array([sx, sy])
    fwd = np.stack([rs(f, Image.BILINEAR) * scale for f in ds.flow_fwd])
    bwd = np.stack([rs(f, Image.BILINEAR) * scale for f in ds.flow_bwd])
    # pixel-center mapping x' = s (x + 0.5) - 0.5
    S = np.array([[sx, 0, 0.5 * sx - 0.5], [0, sy, 0.5 * sy - 0.5], [0, 0, 1.0]])
    homs = np.stack([normalize_homography(S @ h @ np.linalg.inv(S)) for h in ds.homographies])
    return Dataset(FrameSequence(frames), MaskStack(masks, ds.masks.order), fwd, bwd, homs, dict(ds.config), ds.root)


# -- outputs -------------------------------------------------------------------


def save_outputs(stack, out_dir: str | Path, canvas: np.ndarray | None = None, threads: int = 1) -> list[Path]:
    """Write per-layer alpha/RGBA/flow files, reconstructions and the background canvas.

    ``stack`` is a :class:`videolayers.compositing.LayerStack`.
    """
    from concurrent.futures import ThreadPoolExecutor

    from .compositing import reconstruct

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    N, T = stack.alpha.shape[:2]
    jobs = []
    for t in range(T):
        for i in range(N):
            jobs.append((write_gray, (stack.alpha[i, t], out / f"alpha_{i}_{t}.png")))
            jobs.append((write_rgba, (stack.color[i, t], stack.alpha[i, t], out / f"rgba_{i}_{t}.png")))
            jobs.append((write_flo, (stack.flow[i, t].astype(np.float32), out / f"flow_{i}_{t}.flo")))
        jobs.append((write_rgb, (reconstruct(stack, t), out / f"recon_{t}.png")))
    if canvas is not None:
        jobs.append((write_rgb, (canvas, out / "canvas.png")))
    with ThreadPoolExecutor(max_workers=max(1, threads)) as pool:
        list(pool.map(lambda job: job[0](*job[1]), jobs))
    return [job[1][-1] for job in jobs]
