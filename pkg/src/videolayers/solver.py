"""Direct per-pixel parameterization of the layers and its Adam optimization."""

from __future__ import annotations

import dataclasses
import io
import json
import logging
import struct
import zipfile
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable

import numpy as np

from .compositing import LayerStack, detail_transfer
from .geometry import Bilinear, CanvasSpec, GridInterp, hom_apply, hom_invert, pixel_grid, sample_bilinear
from .objective import LossWeights, NumericalError, Problem, build_problem, canvas_coords, evaluate, logit, render
from .videodata import Dataset

log = logging.getLogger(__name__)

PARAM_NAMES = ("alpha", "color", "flow", "canvas", "grid_warp", "grid_gain")


@dataclass
class SolverConfig:
    epochs: int = 2000
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    seed: int = 0
    lambda_r: float = 0.005
    lambda_m: float = 50.0
    lambda_w: float = 0.005
    lambda_p: float = 0.25
    lambda_res: float = 1e-3
    gamma: float = 0.1
    beta: float = 20.0
    mask_gate: float = 0.05
    dilate_radius: int = 5
    enable_photo: bool = False
    use_bg_warp: bool = True
    use_brightness: bool = True
    divergence_factor: float = 1e3
    checkpoint_every: int = 0
    log_every: int = 100
    dtype: str = "float32"

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> "SolverConfig":
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        return cls(**d)

    def updated(self, d: dict[str, Any]) -> "SolverConfig":
        merged = dataclasses.asdict(self)
        merged.update(d)
        return SolverConfig.from_dict(merged)

    def loss_weights(self) -> LossWeights:
        return LossWeights(
            lambda_r=self.lambda_r,
            lambda_m=self.lambda_m,
            lambda_w=self.lambda_w,
            lambda_p=self.lambda_p,
            lambda_res=self.lambda_res,
            gamma=self.gamma,
            mask_gate=self.mask_gate,
            enable_photo=self.enable_photo,
        )


@dataclass
class ParameterSet:
    """Latent unknowns; alpha, color and canvas go through a sigmoid when realized."""

    alpha: np.ndarray  # (N, T, H, W)
    color: np.ndarray  # (N, T, H, W, 3)
    flow: np.ndarray  # (N, T, H, W, 2) residual added to the masked input flow
    canvas: np.ndarray  # (Hc, Wc, 3)
    grid_warp: np.ndarray  # (Tg, 4, 7, 2) pixel offsets
    grid_gain: np.ndarray  # (Tg, 4, 7)

    def tensors(self) -> dict[str, np.ndarray]:
        return {name: getattr(self, name) for name in PARAM_NAMES}

    def copy(self) -> "ParameterSet":
        return ParameterSet(**{k: v.copy() for k, v in self.tensors().items()})


@dataclass
class OptimState:
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    step: int = 0


@dataclass
class History:
    rows: list[dict[str, float]] = field(default_factory=list)

    def lambda_m(self) -> list[float]:
        return [r["lambda_m"] for r in self.rows]

    def __len__(self) -> int:
        return len(self.rows)


def problem_from_dataset(ds: Dataset, cfg: SolverConfig) -> Problem:
    return build_problem(
        ds.frames.frames,
        ds.masks.masks,
        ds.masks.order,
        ds.flow_fwd,
        ds.flow_bwd,
        ds.homographies,
        beta=cfg.beta,
        dilate_radius=cfg.dilate_radius,
        use_warp=cfg.use_bg_warp,
        use_gain=cfg.use_brightness,
        dtype=np.dtype(cfg.dtype),
    )


def median_canvas(frames: np.ndarray, homs: np.ndarray, spec: CanvasSpec, fill: float = 0.5) -> np.ndarray:
    """Per-pixel median of all frames mapped into the canvas; unobserved pixels get ``fill``."""
    Hc, Wc = spec.height, spec.width
    xs, ys = pixel_grid(Hc, Wc)
    stack = np.full((len(frames), Hc, Wc, 3), np.nan)
    for t, H in enumerate(homs):
        to_frame = hom_invert(spec.frame_to_canvas_pixels(H))
        p = hom_apply(to_frame, np.stack([xs, ys], axis=-1))
        img, valid = sample_bilinear(frames[t], p[..., 0], p[..., 1])
        stack[t][valid > 0] = img[valid > 0]
    seen = np.any(np.isfinite(stack[..., 0]), axis=0)
    out = np.full((Hc, Wc, 3), fill)
    if np.any(seen):
        out[seen] = np.nanmedian(stack[:, seen], axis=0)
    return out


def init_parameters(prob: Problem, seed: int = 0) -> ParameterSet:
    """Start alphas near the input masks, colors at the frames, canvas at the frame median.

    The result does not depend on ``seed``; it is accepted so callers can pass
    one config everywhere.
    """
    N, T, H, W = prob.shape
    dt = prob.dtype
    frames = prob.frames.astype(np.float64)
    alpha = logit(0.9 * prob.masks.astype(np.float64) + 0.05)
    color = np.broadcast_to(logit(np.clip(frames, 0.01, 0.99)), (N, T, H, W, 3))
    canvas = median_canvas(frames, prob.homographies, prob.canvas)
    tg = prob.grid_warp.grid_shape
    return ParameterSet(
        alpha=np.array(alpha, dtype=dt),
        color=np.array(color, dtype=dt),
        flow=np.zeros((N, T, H, W, 2), dtype=dt),
        canvas=np.array(logit(np.clip(canvas, 0.01, 0.99)), dtype=dt),
        grid_warp=np.zeros(tg + (2,), dtype=dt),
        grid_gain=np.ones(prob.grid_gain.grid_shape, dtype=dt),
    )


def write_npz(path: str | Path, **arrays: np.ndarray) -> None:
    """Compressed ``.npz`` with fixed member timestamps, so equal arrays give equal bytes."""
    with zipfile.ZipFile(path, "w", compression=zipfile.ZIP_DEFLATED) as zf:
        for name, arr in arrays.items():
            buf = io.BytesIO()
            np.lib.format.write_array(buf, np.asarray(arr), allow_pickle=False)
            info = zipfile.ZipInfo(name + ".npy", date_time=(1980, 1, 1, 0, 0, 0))
            info.compress_type = zipfile.ZIP_DEFLATED
            zf.writestr(info, buf.getvalue())


@dataclass
class Decomposition:
    """Finished layers plus what is needed to re-render or edit them."""

    stack: LayerStack
    canvas: np.ndarray  # (Hc, Wc, 3) background in canvas space
    canvas_spec: CanvasSpec
    homographies: np.ndarray
    grid_warp: np.ndarray
    valid: np.ndarray  # (T, H, W)

    def save(self, path: str | Path) -> None:
        s = self.stack
        write_npz(
            path,
            alpha=s.alpha,
            color=s.color,
            flow=s.flow,
            background=s.background,
            order=s.order,
            gain=s.gain if s.gain is not None else np.ones(s.alpha.shape[1:]),
            canvas=self.canvas,
            canvas_origin=np.asarray(self.canvas_spec.origin),
            canvas_size=np.asarray(self.canvas_spec.size),
            homographies=self.homographies,
            grid_warp=self.grid_warp,
            valid=self.valid,
        )

    @classmethod
    def load(cls, path: str | Path) -> "Decomposition":
        with np.load(path) as z:
            stack = LayerStack(z["alpha"], z["color"], z["flow"], z["background"], z["order"], z["gain"])
            spec = CanvasSpec(tuple(map(float, z["canvas_origin"])), tuple(map(int, z["canvas_size"])))
            return cls(stack, z["canvas"], spec, z["homographies"], z["grid_warp"], z["valid"])


def forward_model(params: ParameterSet, prob: Problem, t: int | None = None):
    """Realize the layer stack and the composite (of frame t, or all frames)."""
    fw = render(params, prob)
    stack = LayerStack(
        alpha=fw.alpha,
        color=fw.color,
        flow=fw.fhat,
        background=fw.bg,
        order=prob.order,
        gain=fw.gain if prob.use_gain else None,
    )
    if t is None:
        return stack, fw.composite
    return stack, fw.composite[t]


def render_background(
    canvas: np.ndarray, spec: CanvasSpec, homs: np.ndarray, grid_warp: np.ndarray, height: int, width: int
) -> tuple[np.ndarray, np.ndarray]:
    """Per-frame backgrounds (T, H, W, 3) read from a canvas, then shifted by the warp grid.

    Returns the backgrounds and their validity (T, H, W).
    """
    T = len(homs)
    coords = canvas_coords(homs, spec, height, width)
    bg0, valid = sample_bilinear(canvas, coords[..., 0], coords[..., 1])
    off = GridInterp(T, height, width, grid_warp.shape[:3]).field(grid_warp)
    xs, ys = pixel_grid(height, width)
    s = Bilinear((T, height, width), xs + off[..., 0], ys + off[..., 1])
    return s.apply(bg0), (valid > 0) & s.valid


def realize(params: ParameterSet, prob: Problem, transfer_detail: bool = False) -> Decomposition:
    """Finished float64 layers; the background is re-read from the canvas in float64."""
    f64 = lambda a: np.asarray(a, dtype=np.float64)  # noqa: E731
    fw = render(params, prob)
    canvas = f64(fw.canvas)
    grid_warp = f64(params.grid_warp) if prob.use_warp else np.zeros_like(f64(params.grid_warp))
    N, T, H, W = prob.shape
    background, valid = render_background(canvas, prob.canvas, prob.homographies, grid_warp, H, W)
    stack = LayerStack(
        alpha=f64(fw.alpha),
        color=f64(fw.color),
        flow=f64(fw.fhat),
        background=background,
        order=prob.order,
        gain=f64(fw.gain) if prob.use_gain else None,
    )
    if transfer_detail:
        frames = f64(prob.frames)
        colors = np.stack([detail_transfer(stack, frames, t) for t in range(T)], axis=1)
        stack = dataclasses.replace(stack, color=colors)
    return Decomposition(stack, canvas, prob.canvas, prob.homographies, grid_warp, valid)


# -- Adam ---------------------------------------------------------------------------


def init_state(params: ParameterSet) -> OptimState:
    return OptimState(
        m={k: np.zeros_like(v) for k, v in params.tensors().items()},
        v={k: np.zeros_like(v) for k, v in params.tensors().items()},
    )


def adam_step(params: ParameterSet, grads: dict[str, np.ndarray], state: OptimState, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8) -> None:
    """Bias-corrected Adam update, in place."""
    for k, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise NumericalError(f"non-finite gradient for '{k}'")
    state.step += 1
    bc1 = 1.0 - beta1**state.step
    bc2 = 1.0 - beta2**state.step
    for k, p in params.tensors().items():
        g = grads[k]
        m, v = state.m[k], state.v[k]
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * (g * g)
        p -= (lr / bc1) * m / (np.sqrt(v / bc2) + eps)


# -- training ---------------------------------------------------------------------------


@dataclass
class TrainResult:
    params: ParameterSet
    state: OptimState
    history: History
    weights: LossWeights


def train(
    prob: Problem,
    cfg: SolverConfig,
    params: ParameterSet | None = None,
    resume: str | Path | None = None,
    checkpoint_path: str | Path | None = None,
    callback: Callable[[int, Any], None] | None = None,
) -> TrainResult:
    """Full-batch Adam on the total objective for ``cfg.epochs`` epochs.

    The mask bootstrap weight is switched off permanently the first time the
    mask loss falls below ``cfg.mask_gate``.
    """
    weights = cfg.loss_weights()
    history = History()
    if resume is not None:
        ck = load_checkpoint(resume, expect=init_parameters(prob, cfg.seed))
        params, state = ck.params, ck.state
        history.rows = ck.meta["history"]
        weights.bootstrap_active = ck.meta["bootstrap_active"]
    else:
        params = params if params is not None else init_parameters(prob, cfg.seed)
        state = init_state(params)
    initial = history.rows[0]["total"] if history.rows else None

    while state.step < cfg.epochs:
        epoch = state.step
        report, grads = evaluate(params, prob, weights)
        if initial is None:
            initial = report.total
        if report.total > cfg.divergence_factor * max(initial, 1e-12):
            raise NumericalError(f"diverged at epoch {epoch}: loss {report.total:.4g} > {cfg.divergence_factor:g} x initial {initial:.4g}")
        history.rows.append(dict(epoch=epoch, **report.as_row()))
        weights.update_gate(report["mask"])
        adam_step(params, grads, state, cfg.lr, cfg.beta1, cfg.beta2, cfg.eps)
        if callback is not None:
            callback(epoch, report)
        if cfg.log_every and epoch % cfg.log_every == 0:
            log.info("epoch %5d  %s", epoch, "  ".join(f"{k}={v:.5f}" for k, v in report.as_row().items()))
        if checkpoint_path and cfg.checkpoint_every and state.step % cfg.checkpoint_every == 0:
            save_checkpoint(checkpoint_path, params, state, {"history": history.rows, "bootstrap_active": weights.bootstrap_active})
    return TrainResult(params, state, history, weights)


# -- checkpoints ---------------------------------------------------------------------------

CHECKPOINT_MAGIC = b"VLCK"
CHECKPOINT_VERSION = 1
_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8")}
_CODES = {np.dtype("float32"): 0, np.dtype("float64"): 1}


class CheckpointError(ValueError):
    pass


@dataclass
class Checkpoint:
    params: ParameterSet
    state: OptimState
    meta: dict[str, Any]


def save_checkpoint(path: str | Path, params: ParameterSet, state: OptimState, meta: dict[str, Any] | None = None) -> None:
    """Binary layout (little-endian): magic, u32 version, u32 step, u32 meta length, meta JSON,
    u32 tensor count, then per tensor: u16 name length, name, u8 dtype, u8 ndim, u32 dims, payload."""
    tensors = {}
    for k, v in params.tensors().items():
        tensors[k] = v
        tensors["adam_m/" + k] = state.m[k]
        tensors["adam_v/" + k] = state.v[k]
    meta_bytes = json.dumps(meta or {}).encode()
    chunks = [CHECKPOINT_MAGIC, struct.pack("<III", CHECKPOINT_VERSION, state.step, len(meta_bytes)), meta_bytes]
    chunks.append(struct.pack("<I", len(tensors)))
    for name, arr in tensors.items():
        code = _CODES[arr.dtype]
        nb = name.encode()
        chunks.append(struct.pack("<H", len(nb)) + nb + struct.pack("<BB", code, arr.ndim))
        chunks.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        chunks.append(np.ascontiguousarray(arr, dtype=_DTYPES[code]).tobytes())
    tmp = Path(str(path) + ".tmp")
    tmp.write_bytes(b"".join(chunks))
    tmp.replace(path)


def load_checkpoint(path: str | Path, expect: ParameterSet | None = None) -> Checkpoint:
    data = Path(path).read_bytes()
    if data[:4] != CHECKPOINT_MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint file")
    version, step, mlen = struct.unpack_from("<III", data, 4)
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"{path}: checkpoint version {version}, expected {CHECKPOINT_VERSION}")
    off = 16
    meta = json.loads(data[off : off + mlen])
    off += mlen
    (count,) = struct.unpack_from("<I", data, off)
    off += 4
    tensors = {}
    for _ in range(count):
        (nlen,) = struct.unpack_from("<H", data, off)
        off += 2
        name = data[off : off + nlen].decode()
        off += nlen
        code, ndim = struct.unpack_from("<BB", data, off)
        off += 2
        shape = struct.unpack_from(f"<{ndim}I", data, off)
        off += 4 * ndim
        dt = _DTYPES[code]
        n = int(np.prod(shape)) if ndim else 1
        tensors[name] = np.frombuffer(data, dtype=dt, count=n, offset=off).reshape(shape).astype(dt.newbyteorder("="))
        off += n * dt.itemsize
    if expect is not None:
        for k, v in expect.tensors().items():
            for name in (k, "adam_m/" + k, "adam_v/" + k):
                if name not in tensors:
                    raise CheckpointError(f"{path}: missing tensor '{name}'")
                if tensors[name].shape != v.shape:
                    raise CheckpointError(f"{path}: tensor '{name}' has shape {tensors[name].shape}, expected {v.shape}")
    params = ParameterSet(**{k: tensors[k] for k in PARAM_NAMES})
    state = OptimState({k: tensors["adam_m/" + k] for k in PARAM_NAMES}, {k: tensors["adam_v/" + k] for k in PARAM_NAMES}, step)
    return Checkpoint(params, state, meta)


def decompose(ds: Dataset, cfg: SolverConfig, **kw) -> tuple[Decomposition, TrainResult, Problem]:
    prob = problem_from_dataset(ds, cfg)
    result = train(prob, cfg, **kw)
    return realize(result.params, prob, transfer_detail=True), result, prob
