"""Backward warping by optical flow and flow-confidence maps."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .geometry import Bilinear, pixel_grid


@dataclass(frozen=True)
class FlowConfidence:
    weight: np.ndarray  # W = W_lr * W_p * M
    e_lr: np.ndarray
    e_p: np.ndarray
    w_lr: np.ndarray
    w_p: np.ndarray


def flow_sampler(flow: np.ndarray, src_shape=None) -> Bilinear:
    """Sampler reading the source at p + flow(p); flow is (B, H, W, 2) or (H, W, 2)."""
    if flow.ndim == 3:
        flow = flow[None]
    B, H, W = flow.shape[:3]
    xs, ys = pixel_grid(H, W)
    xs = xs.astype(flow.dtype)
    ys = ys.astype(flow.dtype)
    return Bilinear(src_shape or (B, H, W), xs + flow[..., 0], ys + flow[..., 1])


def warp_by_flow(img: np.ndarray, flow: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Backward-warp a single (H, W[, C]) image: out(p) = img(p + flow(p))."""
    s = flow_sampler(np.asarray(flow, dtype=np.float64))
    return s.apply(np.asarray(img)[None])[0], s.valid[0].astype(np.float64)


def lr_consistency(fwd: np.ndarray, bwd: np.ndarray) -> np.ndarray:
    """Forward-backward error |fwd(p) + bwd(p + fwd(p))|; +inf where the lookup leaves the frame."""
    s = flow_sampler(np.asarray(fwd, dtype=np.float64))
    back = s.apply(np.asarray(bwd, dtype=np.float64)[None])[0]
    e = np.linalg.norm(fwd + back, axis=-1)
    return np.where(s.valid[0], e, np.inf)


def photometric_error(I_t: np.ndarray, I_t1: np.ndarray, fwd: np.ndarray) -> np.ndarray:
    """Mean absolute color difference on a 0-255 scale after warping I_t1 back to t.

    Rounded to 1e-9 so that a gap of exactly k/255 reads as k despite float error.
    """
    warped, _ = warp_by_flow(I_t1, fwd)
    return np.round(np.mean(np.abs(255.0 * (warped - I_t)), axis=-1), 9)


def photometric_gate(I_t: np.ndarray, I_t1: np.ndarray, fwd: np.ndarray, beta: float = 20.0) -> np.ndarray:
    return (photometric_error(I_t, I_t1, fwd) < beta).astype(np.float64)


def flow_confidence(fwd, bwd, I_t, I_t1, mask, beta: float = 20.0) -> FlowConfidence:
    """Confidence of a precomputed flow pair, zero outside ``mask`` (union of layer masks)."""
    e_lr = lr_consistency(fwd, bwd)
    w_lr = np.maximum(1.0 - e_lr, 0.0)
    e_p = photometric_error(I_t, I_t1, fwd)
    w_p = (e_p < beta).astype(np.float64)
    return FlowConfidence(w_lr * w_p * mask, e_lr, e_p, w_lr, w_p)
