"""Editing effects computed from a finished decomposition."""

from __future__ import annotations

import numpy as np
from scipy import ndimage

from .compositing import comp_alpha, reconstruct
from .geometry import hom_invert, warp_by_homography
from .objective import disk
from .solver import Decomposition, render_background

LUMA = np.array([0.299, 0.587, 0.114])


class EffectError(ValueError):
    pass


def _saturate(img: np.ndarray, s: float) -> np.ndarray:
    y = (img @ LUMA)[..., None]
    return y + s * (img - y)


def color_pop(frames: np.ndarray, alpha: np.ndarray, saturation_lo: float = 0.0, saturation_hi: float = 1.3) -> np.ndarray:
    """Keep color where ``alpha`` is high and fade it elsewhere.

    Blends a saturation-boosted copy over a desaturated copy using ``alpha``
    (same leading shape as ``frames``).  Output is clipped to [0, 1].
    """
    frames = np.asarray(frames, dtype=np.float64)
    alpha = np.asarray(alpha, dtype=np.float64)
    if alpha.shape != frames.shape[:-1]:
        raise EffectError(f"alpha shape {alpha.shape} does not match frames {frames.shape[:-1]}")
    a = alpha[..., None]
    out = a * _saturate(frames, saturation_hi) + (1.0 - a) * _saturate(frames, saturation_lo)
    return np.clip(out, 0.0, 1.0)


def layer_alpha(decomp: Decomposition, layers=None) -> np.ndarray:
    """Composite alpha (T, H, W) of the chosen layers (default: all)."""
    s = decomp.stack
    return np.stack([comp_alpha(s, t, layers) for t in range(s.num_frames)])


def reconstruction(decomp: Decomposition) -> np.ndarray:
    s = decomp.stack
    return np.stack([reconstruct(s, t) for t in range(s.num_frames)])


def background_replace(decomp: Decomposition, new_canvas: np.ndarray) -> np.ndarray:
    """Re-render every frame with ``new_canvas`` in place of the learned background canvas.

    The new image is aligned with the canvas origin; it must be at least as
    large as the learned canvas.  Foreground layers, the background warp and
    the brightness gain are kept.
    """
    new_canvas = np.asarray(new_canvas, dtype=np.float64)
    Hc, Wc = decomp.canvas.shape[:2]
    if new_canvas.ndim != 3 or new_canvas.shape[0] < Hc or new_canvas.shape[1] < Wc:
        raise EffectError(f"new canvas {new_canvas.shape[:2]} is smaller than the learned canvas {(Hc, Wc)}")
    s = decomp.stack
    _, T, H, W = s.alpha.shape
    bg, _ = render_background(new_canvas[:Hc, :Wc], decomp.canvas_spec, decomp.homographies, decomp.grid_warp, H, W)
    swapped = type(s)(s.alpha, s.color, s.flow, bg, s.order, s.gain)
    return np.stack([reconstruct(swapped, t) for t in range(T)])


def _to_canvas(decomp: Decomposition, img: np.ndarray, t: int) -> tuple[np.ndarray, np.ndarray]:
    spec = decomp.canvas_spec
    from_canvas = hom_invert(spec.frame_to_canvas_pixels(decomp.homographies[t]))
    return warp_by_homography(img, from_canvas, spec.size)


def stroboscopic(decomp: Decomposition, interval: int) -> np.ndarray:
    """One canvas-space image showing the foreground of frames 0, k, 2k, ... over a clean plate.

    The plate is built by compositing each frame's valid background pixels in
    temporal order, later frames on top; pixels never observed fall back to
    the learned canvas.
    """
    if interval < 1:
        raise EffectError(f"interval must be >= 1, got {interval}")
    s = decomp.stack
    T = s.num_frames
    gain = s.gain if s.gain is not None else np.ones(s.alpha.shape[1:])
    plate = decomp.canvas.copy()
    for t in range(T):
        bg, inside = _to_canvas(decomp, s.background[t] * gain[t][..., None], t)
        ok, _ = _to_canvas(decomp, decomp.valid[t].astype(np.float64), t)
        keep = (inside > 0) & (ok > 1.0 - 1e-9)
        plate[keep] = bg[keep]
    for t in range(0, T, interval):
        for i in s.order[t]:
            a, inside = _to_canvas(decomp, s.alpha[i, t], t)
            c, _ = _to_canvas(decomp, s.color[i, t] * gain[t][..., None], t)
            a = (a * inside)[..., None]
            plate = a * c + (1.0 - a) * plate
    return plate


def removal_mask(alpha: np.ndarray, threshold: float = 0.25, dilate_px: int = 20) -> np.ndarray:
    """Binary region to inpaint: alpha strictly above ``threshold``, grown by a disc.

    Accepts a single (H, W) matte or a (T, H, W) stack (dilated per frame).
    """
    m = np.asarray(alpha) > threshold
    if dilate_px <= 0 or not m.any():
        return m
    st = disk(dilate_px)
    if m.ndim == 3:
        st = st[None]
    return ndimage.binary_dilation(m, structure=st)
