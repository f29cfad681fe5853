"""Back-to-front straight-alpha compositing of layer stacks."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass
class LayerStack:
    """Realized layers for a whole video.

    Layer index grows toward the camera; ``order[t]`` lists layer indices
    back-to-front for frame t.  ``gain`` is the optional per-pixel brightness
    applied to the final composite.
    """

    alpha: np.ndarray  # (N, T, H, W)
    color: np.ndarray  # (N, T, H, W, 3)
    flow: np.ndarray  # (N, T, H, W, 2)
    background: np.ndarray  # (T, H, W, 3)
    order: np.ndarray  # (T, N)
    gain: np.ndarray | None = None  # (T, H, W)

    @property
    def num_layers(self) -> int:
        return self.alpha.shape[0]

    @property
    def num_frames(self) -> int:
        return self.alpha.shape[1]


# -- batched primitives with adjoints ----------------------------------------------


def over(bg: np.ndarray, alphas: list[np.ndarray], colors: list[np.ndarray]):
    """Composite ``colors`` (back to front) over ``bg``.

    Returns the composite and a cache of the intermediate results needed by
    :func:`over_backward`.  Alphas broadcast against colors via a trailing axis.
    """
    below = [bg]
    out = bg
    for a, c in zip(alphas, colors):
        a = a[..., None]
        out = a * c + (1.0 - a) * out
        below.append(out)
    return out, (alphas, colors, below)


def over_backward(g: np.ndarray, cache):
    """Adjoint of :func:`over`; returns (g_bg, [g_alpha], [g_color])."""
    alphas, colors, below = cache
    g_alphas: list[np.ndarray] = [None] * len(alphas)  # type: ignore[list-item]
    g_colors: list[np.ndarray] = [None] * len(alphas)  # type: ignore[list-item]
    for k in range(len(alphas) - 1, -1, -1):
        a = alphas[k][..., None]
        g_alphas[k] = np.sum(g * (colors[k] - below[k]), axis=-1)
        g_colors[k] = g * a
        g = g * (1.0 - a)
    return g, g_alphas, g_colors


def sort_layers(x: np.ndarray, order: np.ndarray) -> list[np.ndarray]:
    """Reorder per-layer arrays (N, T, ...) into back-to-front lists of (T, ...)."""
    T = order.shape[0]
    ts = np.arange(T)
    return [x[order[:, k], ts] for k in range(order.shape[1])]


def unsort_layers(parts: list[np.ndarray], order: np.ndarray, shape, dtype) -> np.ndarray:
    out = np.zeros(shape, dtype=dtype)
    ts = np.arange(order.shape[0])
    for k, p in enumerate(parts):
        out[order[:, k], ts] = p
    return out


# -- per-frame operations -----------------------------------------------------------


def comp_over(stack: LayerStack, t: int, layers=None) -> np.ndarray:
    """Over-composite the foreground layers of frame t onto its background."""
    keep = set(range(stack.num_layers)) if layers is None else set(layers)
    idx = [i for i in stack.order[t] if i in keep]
    out, _ = over(stack.background[t], [stack.alpha[i, t] for i in idx], [stack.color[i, t] for i in idx])
    return out


def reconstruct(stack: LayerStack, t: int) -> np.ndarray:
    """The model's rendering of frame t: composite times brightness gain."""
    out = comp_over(stack, t)
    if stack.gain is not None:
        out = out * stack.gain[t][..., None]
    return out


def comp_alpha(stack: LayerStack, t: int, layers=None) -> np.ndarray:
    """Alpha channel of the composite of ``layers`` (default: all), ignoring the background."""
    keep = set(range(stack.num_layers)) if layers is None else set(layers)
    a = np.zeros(stack.alpha.shape[2:], dtype=stack.alpha.dtype)
    for i in stack.order[t]:
        if i in keep:
            a = stack.alpha[i, t] + (1.0 - stack.alpha[i, t]) * a
    return a


def transmittance(stack: LayerStack, i: int, t: int) -> np.ndarray:
    """1 minus the composite alpha of layer i and every layer with a larger index."""
    if not 0 <= i < stack.num_layers:
        raise IndexError(f"layer {i} out of range for {stack.num_layers} layers")
    return 1.0 - comp_alpha(stack, t, range(i, stack.num_layers))


def detail_transfer(stack: LayerStack, frames: np.ndarray, t: int) -> np.ndarray:
    """Add the reconstruction residual of frame t to every layer color, weighted by transmittance.

    Returns (N, H, W, 3) colors clamped to [0, 1].
    """
    residual = frames[t] - reconstruct(stack, t)
    out = np.empty_like(stack.color[:, t])
    for i in range(stack.num_layers):
        tau = transmittance(stack, i, t)
        out[i] = stack.color[i, t] + tau[..., None] * residual
    return np.clip(out, 0.0, 1.0)


def composite_without(stack: LayerStack, removed, t: int) -> np.ndarray:
    """Composite frame t with the given layers left out."""
    removed = set(removed)
    bad = [i for i in removed if not 0 <= i < stack.num_layers]
    if bad:
        raise IndexError(f"no such layers: {bad}")
    return comp_over(stack, t, [i for i in range(stack.num_layers) if i not in removed])
