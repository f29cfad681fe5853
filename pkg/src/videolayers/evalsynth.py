"""Synthetic scenes with exact ground truth, segmentation metrics, and gradient checks."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import numpy as np
from scipy import ndimage

from .compositing import over
from .geometry import CanvasSpec, canvas_from_homographies, hom_invert, sample_bilinear, translation, warp_by_homography
from .objective import TERMS, LossWeights, NumericalError, Problem, build_problem, dilate, evaluate
from .videodata import Dataset, FrameSequence, MaskStack


# -- scene description -----------------------------------------------------------------


@dataclass
class Shadow:
    offset: tuple[float, float] = (5.0, 7.0)
    axes: tuple[float, float] = (9.0, 3.5)
    attenuation: float = 0.6


@dataclass
class Sprite:
    shape: str = "disc"  # "disc" or "rect"
    size: tuple[float, float] = (6.0, 6.0)  # radius (disc) or half extents (rect)
    start: tuple[float, float] = (16.0, 24.0)
    velocity: tuple[float, float] = (3.0, 0.0)
    color: tuple[float, float, float] = (0.9, 0.2, 0.1)
    shadow: Shadow | None = None


@dataclass
class SceneSpec:
    width: int = 96
    height: int = 64
    frames: int = 20
    sprites: list[Sprite] = field(default_factory=lambda: [Sprite()])
    camera_velocity: tuple[float, float] = (0.0, 0.0)
    texture: str = "smooth"  # "smooth", "flat" or "ramp"
    texture_range: tuple[float, float] = (0.1, 0.9)
    background_color: tuple[float, float, float] = (0.5, 0.5, 0.5)
    brightness_drift: float = 0.0  # relative amplitude of a global gain drift
    drift_periods: float = 0.5  # sinusoid periods over the clip

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> "SceneSpec":
        d = dict(d)
        sprites = []
        for s in d.pop("sprites", [{}]):
            s = dict(s)
            sh = s.pop("shadow", None)
            sp = Sprite(**{k: tuple(v) if isinstance(v, list) else v for k, v in s.items()})
            if sh is not None:
                sp.shadow = Shadow(**{k: tuple(v) if isinstance(v, list) else v for k, v in sh.items()})
            sprites.append(sp)
        kw = {k: tuple(v) if isinstance(v, list) else v for k, v in d.items()}
        return cls(sprites=sprites, **kw)

    @classmethod
    def load(cls, path: str | Path) -> "SceneSpec":
        return cls.from_dict(json.loads(Path(path).read_text()))


@dataclass
class SyntheticScene:
    dataset: Dataset
    alpha: np.ndarray  # (N, T, H, W) ground-truth layer alphas (object plus shadow)
    color: np.ndarray  # (N, T, H, W, 3)
    object_mask: np.ndarray  # (N, T, H, W) object bodies
    support: np.ndarray  # (N, T, H, W) object or shadow
    canvas: np.ndarray  # (Hc, Wc, 3) clean plate
    canvas_spec: CanvasSpec
    background: np.ndarray  # (T, H, W, 3)
    gain: np.ndarray  # (T,)

    def render(self) -> np.ndarray:
        """Re-composite the ground-truth layers."""
        N = self.alpha.shape[0]
        out, _ = over(self.background, [self.alpha[i] for i in range(N)], [self.color[i] for i in range(N)])
        return out * self.gain[:, None, None, None]


def _texture(kind: str, h: int, w: int, rng: np.random.Generator, lo: float, hi: float, base) -> np.ndarray:
    if kind == "flat":
        return np.broadcast_to(np.asarray(base, dtype=np.float64), (h, w, 3)).copy()
    ys, xs = np.mgrid[0:h, 0:w].astype(np.float64)
    if kind == "ramp":
        r = xs / max(w - 1, 1)
        return np.stack([lo + (hi - lo) * r, lo + (hi - lo) * (1 - r), np.full_like(r, 0.5 * (lo + hi))], axis=-1)
    out = np.zeros((h, w, 3))
    for c in range(3):
        acc = np.zeros((h, w))
        for _ in range(6):
            kx, ky = rng.uniform(-0.35, 0.35, size=2)
            acc += rng.uniform(0.5, 1.0) * np.sin(kx * xs + ky * ys + rng.uniform(0, 2 * np.pi))
        acc += ndimage.gaussian_filter(rng.standard_normal((h, w)), 2.0) * 3.0
        acc = (acc - acc.min()) / (acc.max() - acc.min() + 1e-12)
        out[..., c] = lo + (hi - lo) * acc
    return out


def _shape_mask(shape: str, size, center, xs, ys) -> np.ndarray:
    dx, dy = xs - center[0], ys - center[1]
    if shape == "disc":
        return (dx * dx + dy * dy <= size[0] * size[0]).astype(np.float64)
    if shape == "rect":
        return ((np.abs(dx) <= size[0]) & (np.abs(dy) <= size[1])).astype(np.float64)
    if shape == "ellipse":
        return ((dx / size[0]) ** 2 + (dy / size[1]) ** 2 <= 1.0).astype(np.float64)
    raise ValueError(f"unknown sprite shape '{shape}'")


def synth_scene(spec: SceneSpec, seed: int = 0) -> SyntheticScene:
    """Render moving sprites with attached shadows over a textured, panning background.

    Each sprite is one layer.  A shadow darkens the background by its
    attenuation a, which is exactly an opaque-black layer of alpha 1 - a.
    Masks cover the sprite body only.  Flows are exact from the trajectories
    (sprite and shadow move rigidly; the background moves with the camera).
    """
    rng = np.random.default_rng(seed)
    T, H, W = spec.frames, spec.height, spec.width
    N = len(spec.sprites)
    cam = np.asarray(spec.camera_velocity, dtype=np.float64)
    homs = np.stack([translation(*(cam * t)) for t in range(T)])
    cspec = canvas_from_homographies(homs, W, H)
    canvas = _texture(spec.texture, cspec.height, cspec.width, rng, *spec.texture_range, spec.background_color)

    ys, xs = np.mgrid[0:H, 0:W].astype(np.float64)
    background = np.empty((T, H, W, 3))
    for t in range(T):
        off = cam * t - np.asarray(cspec.origin)
        background[t], valid = sample_bilinear(canvas, xs + off[0], ys + off[1])
        assert valid.all()

    alpha = np.zeros((N, T, H, W))
    color = np.zeros((N, T, H, W, 3))
    body = np.zeros((N, T, H, W))
    support = np.zeros((N, T, H, W))
    for i, sp in enumerate(spec.sprites):
        v = np.asarray(sp.velocity, dtype=np.float64)
        for t in range(T):
            c = np.asarray(sp.start) + v * t
            m = _shape_mask(sp.shape, sp.size, c, xs, ys)
            a = m.copy()
            s = np.zeros_like(m)
            if sp.shadow is not None:
                s = _shape_mask("ellipse", sp.shadow.axes, c + np.asarray(sp.shadow.offset), xs, ys) * (1 - m)
                a = m + s * (1.0 - sp.shadow.attenuation)
            for q in (m, s):
                ext = np.argwhere(q > 0)
                if len(ext) and (ext.min() == 0 or ext[:, 0].max() == H - 1 or ext[:, 1].max() == W - 1):
                    raise ValueError(f"sprite {i} leaves the frame at t={t}")
            if not m.any():
                raise ValueError(f"sprite {i} is outside the frame at t={t}")
            alpha[i, t] = a
            color[i, t] = m[..., None] * np.asarray(sp.color)
            body[i, t] = m
            support[i, t] = np.maximum(m, s)

    gain = 1.0 + spec.brightness_drift * np.sin(2 * np.pi * spec.drift_periods * np.arange(T) / max(T - 1, 1) - np.pi / 2)
    comp, _ = over(background, list(alpha), list(color))
    frames = comp * gain[:, None, None, None]
    if frames.min() < 0 or frames.max() > 1:
        raise ValueError("scene leaves the [0, 1] range; lower the texture range or drift")

    # exact flows: the topmost moving support claims a pixel, otherwise camera motion
    bg_fwd = -cam
    fwd = np.broadcast_to(bg_fwd, (T - 1, H, W, 2)).copy()
    bwd = np.broadcast_to(-bg_fwd, (T - 1, H, W, 2)).copy()
    for i, sp in enumerate(spec.sprites):
        v = np.asarray(sp.velocity, dtype=np.float64)
        for t in range(T - 1):
            fwd[t][support[i, t] > 0] = v
            bwd[t][support[i, t + 1] > 0] = -v

    order = np.tile(np.arange(N), (T, 1))
    ds = Dataset(FrameSequence(frames), MaskStack(body.copy(), order), fwd, bwd, homs)
    return SyntheticScene(ds, alpha, color, body, support, canvas, cspec, background, gain)


def ground_truth_decomposition(scene: SyntheticScene) -> "Decomposition":
    """Package the exact layers of a scene as a decomposition (for effects and tests)."""
    from .compositing import LayerStack
    from .solver import Decomposition

    ds = scene.dataset
    N, T, H, W = scene.alpha.shape
    flow = np.zeros((N, T, H, W, 2))
    flow[:, :-1] = scene.support[:, :-1, ..., None] * ds.flow_fwd[None]
    gain = np.broadcast_to(scene.gain[:, None, None], (T, H, W)).copy()
    stack = LayerStack(scene.alpha, scene.color, flow, scene.background, ds.masks.order, gain)
    grid = np.zeros((max(1, math.ceil(T / 10)), 4, 7, 2))
    valid = np.ones((T, H, W), dtype=bool)
    return Decomposition(stack, scene.canvas, scene.canvas_spec, ds.homographies, grid, valid)


def save_scene(scene: SyntheticScene, out_dir: str | Path) -> Path:
    """Write the scene through the dataset file formats plus a ground-truth archive."""
    from .solver import write_npz
    from .videodata import write_dataset

    out = Path(out_dir)
    manifest = write_dataset(scene.dataset, out)
    write_npz(
        out / "ground_truth.npz",
        alpha=scene.alpha,
        color=scene.color,
        object_mask=scene.object_mask,
        support=scene.support,
        canvas=scene.canvas,
        background=scene.background,
        gain=scene.gain,
    )
    return manifest


# -- metrics -------------------------------------------------------------------------------


def jaccard(pred: np.ndarray, gt: np.ndarray, ignore: np.ndarray | None = None) -> float:
    """Intersection over union of two binary masks; 1 when both are empty."""
    p = np.asarray(pred) > 0.5
    g = np.asarray(gt) > 0.5
    if p.shape != g.shape:
        raise ValueError(f"shape mismatch {p.shape} vs {g.shape}")
    if ignore is not None:
        keep = ~(np.asarray(ignore) > 0.5)
        p, g = p & keep, g & keep
    union = np.sum(p | g)
    if union == 0:
        return 1.0
    return float(np.sum(p & g) / union)


def boundary_map(mask: np.ndarray) -> np.ndarray:
    m = np.asarray(mask) > 0.5
    return m & ~ndimage.binary_erosion(m, structure=np.ones((3, 3), bool), border_value=1)


def default_boundary_tolerance(shape) -> int:
    return int(math.ceil(0.008 * math.hypot(shape[0], shape[1])))


def boundary_f(pred: np.ndarray, gt: np.ndarray, tol_px: int | None = None) -> float:
    """Boundary F-measure: contour pixels matched within ``tol_px`` of the other contour."""
    p, g = np.asarray(pred), np.asarray(gt)
    if p.shape != g.shape:
        raise ValueError(f"shape mismatch {p.shape} vs {g.shape}")
    tol = default_boundary_tolerance(p.shape) if tol_px is None else tol_px
    pb, gb = boundary_map(p), boundary_map(g)
    npb, ngb = pb.sum(), gb.sum()
    if npb == 0 and ngb == 0:
        return 1.0
    if npb == 0 or ngb == 0:
        return 0.0
    precision = np.sum(pb & dilate(gb, tol)) / npb
    recall = np.sum(gb & dilate(pb, tol)) / ngb
    if precision + recall == 0:
        return 0.0
    return float(2 * precision * recall / (precision + recall))


def clutter_fraction(alpha: np.ndarray, gt_support: np.ndarray | None = None) -> float:
    """Fraction of pixels with alpha > 0.2; restricted to outside ``gt_support`` when given."""
    a = np.asarray(alpha)
    vis = a > 0.2
    if gt_support is None:
        return float(np.mean(vis))
    outside = ~(np.asarray(gt_support) > 0.5)
    if not outside.any():
        return 0.0
    return float(np.sum(vis & outside) / np.sum(outside))


def sequence_scores(pred: np.ndarray, gt: np.ndarray, tol_px: int | None = None) -> dict[str, float]:
    """J and F averaged per frame over a (T, H, W) sequence."""
    J = [jaccard(p, g) for p, g in zip(pred, gt)]
    F = [boundary_f(p, g, tol_px) for p, g in zip(pred, gt)]
    return {"J": float(np.mean(J)), "F": float(np.mean(F)), "JF": float((np.mean(J) + np.mean(F)) / 2)}


def psnr(a: np.ndarray, b: np.ndarray, mask: np.ndarray | None = None) -> float:
    d = (np.asarray(a, dtype=np.float64) - np.asarray(b, dtype=np.float64)) ** 2
    if mask is not None:
        d = d[np.asarray(mask) > 0]
    mse = float(np.mean(d))
    return float("inf") if mse == 0 else 10.0 * math.log10(1.0 / mse)


def observed_canvas(spec: CanvasSpec, homographies: np.ndarray, height: int, width: int) -> np.ndarray:
    """Canvas pixels that land inside at least one frame."""
    seen = np.zeros((spec.size[1], spec.size[0]), dtype=bool)
    ones = np.ones((height, width))
    for H in homographies:
        _, inside = warp_by_homography(ones, hom_invert(spec.frame_to_canvas_pixels(H)), spec.size)
        seen |= inside > 0
    return seen


# -- gradient check ------------------------------------------------------------------------


def random_problem(height=16, width=24, frames=4, layers=1, seed=0, anchor: str = "rgb") -> tuple[Problem, Any]:
    """A small float64 instance with every parameter away from kinks.

    Frames are placed a random nonzero distance from the composite of
    ``anchor`` ("rgb" or "photo") so that the L1 residual of that term has no
    entry near zero.  Background offsets keep sample coordinates at least 0.2 px
    from integer positions.
    """
    from .solver import ParameterSet

    rng = np.random.default_rng(seed)
    N, T, H, W = layers, frames, height, width
    imgs = rng.uniform(0.05, 0.95, (T, H, W, 3))
    masks = np.zeros((N, T, H, W))
    ys, xs = np.mgrid[0:H, 0:W]
    for i in range(N):
        for t in range(T):
            cx, cy = rng.uniform(0.3 * W, 0.7 * W), rng.uniform(0.3 * H, 0.7 * H)
            masks[i, t] = ((xs - cx) ** 2 + (ys - cy) ** 2 <= (0.25 * H) ** 2).astype(float)
    fwd = rng.normal(0, 0.8, (T - 1, H, W, 2))
    bwd = rng.normal(0, 0.8, (T - 1, H, W, 2))
    homs = []
    for t in range(T):
        Hm = translation(*rng.uniform(-1.7, 1.7, 2))
        Hm[0, 1], Hm[1, 0] = rng.uniform(-0.02, 0.02, 2)
        Hm[2, :2] = rng.uniform(-1e-3, 1e-3, 2)
        homs.append(Hm)
    order = np.stack([rng.permutation(N) for _ in range(T)])
    prob = build_problem(
        imgs, masks, order, fwd, bwd, np.stack(homs), confidence=rng.uniform(0, 1, (T - 1, H, W)), dtype=np.float64
    )
    tg = prob.grid_warp.grid_shape
    params = ParameterSet(
        alpha=rng.normal(0, 1.0, (N, T, H, W)),
        color=rng.normal(0, 1.0, (N, T, H, W, 3)),
        flow=rng.normal(0, 0.7, (N, T, H, W, 2)),
        canvas=rng.normal(0, 1.0, (prob.canvas.height, prob.canvas.width, 3)),
        grid_warp=np.array([0.37, -0.41]) + rng.uniform(-0.1, 0.1, tg + (2,)),
        grid_gain=rng.uniform(0.8, 1.2, tg),
    )
    # keep L1 residuals away from zero so central differences never straddle a kink
    from .compositing import sort_layers
    from .objective import render

    fw = render(params, prob)
    push = lambda shape: rng.choice([-1.0, 1.0], size=shape) * rng.uniform(0.02, 0.2, size=shape)  # noqa: E731
    P = T - 1
    target = fw.composite.copy()
    if anchor == "photo":
        from .flowops import flow_sampler

        s = flow_sampler(fw.fhat[:, :P].reshape(N * P, H, W, 2))
        aw = s.apply(fw.alpha[:, 1:].reshape(N * P, H, W)).reshape(N, P, H, W)
        cw = s.apply(fw.color[:, 1:].reshape(N * P, H, W, 3)).reshape(N, P, H, W, 3)
        out, _ = over(fw.bg[:P], sort_layers(aw, prob.order[:P]), sort_layers(cw, prob.order[:P]))
        target[:P] = out * fw.gain[:P, ..., None]
    prob.frames = target + push(target.shape)
    comp_flow, _ = over(
        prob.bg_flow, sort_layers(fw.alpha[:, :P], prob.order[:P]), sort_layers(fw.fhat[:, :P], prob.order[:P])
    )
    prob.flow_target = comp_flow + 2.5 * push(comp_flow.shape)
    return prob, params


@dataclass
class GradcheckReport:
    errors: dict[str, dict[str, float]]  # term -> tensor -> max relative error
    skipped: list[str]

    def max_error(self, term: str | None = None) -> float:
        rows = [self.errors[term]] if term else list(self.errors.values())
        return max((e for r in rows for e in r.values()), default=0.0)

    def lines(self) -> list[str]:
        out = []
        for term in TERMS:
            if term in self.skipped:
                out.append(f"{term:>9s}: skipped")
            elif term in self.errors:
                detail = " ".join(f"{k}={v:.2e}" for k, v in self.errors[term].items())
                out.append(f"{term:>9s}: max rel err {self.max_error(term):.2e}  ({detail})")
        return out


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-8) -> float:
    """max |a - n| scaled by the largest gradient magnitude of the tensor (at least ``floor``)."""
    scale = max(float(np.max(np.abs(numeric), initial=0.0)), float(np.max(np.abs(analytic), initial=0.0)), floor)
    return float(np.max(np.abs(analytic - numeric), initial=0.0) / scale)


def gradcheck(
    height=16,
    width=24,
    frames=4,
    layers=1,
    seed=0,
    step=1e-4,
    samples=24,
    enable_photo=True,
) -> GradcheckReport:
    """Compare the analytic gradient of each loss term with central differences.

    For every term and every parameter tensor, ``samples`` entries are probed:
    the ones with the largest analytic gradient plus random others.
    """
    weights = LossWeights(lambda_r=1, lambda_m=1, lambda_w=1, lambda_p=1, lambda_res=1, enable_photo=enable_photo)
    rng = np.random.default_rng(seed + 1)
    errors: dict[str, dict[str, float]] = {}
    skipped = [] if enable_photo else ["photo"]
    for term in TERMS:
        if term in skipped:
            continue
        prob, params = random_problem(height, width, frames, layers, seed, "photo" if term == "photo" else "rgb")
        _, grads = evaluate(params, prob, weights, terms={term})
        errors[term] = {}
        for name, tensor in params.tensors().items():
            g = grads[name].reshape(-1)
            flat = tensor.reshape(-1)
            top = np.argsort(-np.abs(g), kind="stable")[: samples // 3]
            rand = rng.choice(flat.size, size=min(flat.size, samples - len(top)), replace=False)
            idx = np.unique(np.concatenate([top, rand]))
            num = np.empty(len(idx))
            for j, k in enumerate(idx):
                orig = flat[k]
                flat[k] = orig + step
                fp = evaluate(params, prob, weights, terms={term}, grad=False)[0].total
                flat[k] = orig - step
                fm = evaluate(params, prob, weights, terms={term}, grad=False)[0].total
                flat[k] = orig
                num[j] = (fp - fm) / (2 * step)
            errors[term][name] = relative_error(g[idx], num)
    return GradcheckReport(errors, skipped)
