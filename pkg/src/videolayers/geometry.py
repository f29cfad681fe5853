"""Homographies, canvas layout, and differentiable resampling.

All samplers use clamp-to-edge lookups and report a validity mask that is 1
where the requested coordinate lies inside the source image.  Every forward
operation has an explicit adjoint so that gradients can be chained by hand.
"""

from __future__ import annotations

import functools
import math
from dataclasses import dataclass

import numpy as np
from scipy import sparse

VALID_TOL = 1e-6


class DegeneratePointError(ArithmeticError):
    pass


# -- homographies -------------------------------------------------------------


def hom_apply(H: np.ndarray, pts: np.ndarray) -> np.ndarray:
    """Apply a 3x3 homography to points of shape (..., 2)."""
    pts = np.asarray(pts, dtype=np.float64)
    x, y = pts[..., 0], pts[..., 1]
    w = H[2, 0] * x + H[2, 1] * y + H[2, 2]
    if np.any(np.abs(w) < 1e-12):
        raise DegeneratePointError("point maps to infinity under homography")
    u = (H[0, 0] * x + H[0, 1] * y + H[0, 2]) / w
    v = (H[1, 0] * x + H[1, 1] * y + H[1, 2]) / w
    return np.stack([u, v], axis=-1)


def hom_invert(H: np.ndarray) -> np.ndarray:
    Hi = np.linalg.inv(H)
    return Hi / Hi[2, 2]


def hom_compose(A: np.ndarray, B: np.ndarray) -> np.ndarray:
    """Return the homography applying B first, then A."""
    C = A @ B
    return C / C[2, 2]


def translation(tx: float, ty: float) -> np.ndarray:
    return np.array([[1.0, 0.0, tx], [0.0, 1.0, ty], [0.0, 0.0, 1.0]])


@dataclass(frozen=True)
class CanvasSpec:
    origin: tuple[float, float]  # (x0, y0) of canvas pixel (0, 0) in canvas coordinates
    size: tuple[int, int]  # (Wc, Hc)

    @property
    def width(self) -> int:
        return self.size[0]

    @property
    def height(self) -> int:
        return self.size[1]

    def frame_to_canvas_pixels(self, H: np.ndarray) -> np.ndarray:
        """Homography from frame pixels to canvas pixel indices."""
        return hom_compose(translation(-self.origin[0], -self.origin[1]), H)


def canvas_from_homographies(homs: np.ndarray, width: int, height: int) -> CanvasSpec:
    corners = np.array([[0.0, 0.0], [width, 0.0], [0.0, height], [width, height]])
    pts = np.concatenate([hom_apply(H, corners) for H in homs])
    lo = np.floor(pts.min(axis=0))
    hi = np.ceil(pts.max(axis=0))
    size = (max(int(hi[0] - lo[0]), width), max(int(hi[1] - lo[1]), height))
    return CanvasSpec((float(lo[0]), float(lo[1])), size)


def induced_flow(H_from: np.ndarray, H_to: np.ndarray, width: int, height: int) -> np.ndarray:
    """Apparent (H, W, 2) motion of a static canvas between two frames."""
    ys, xs = np.mgrid[0:height, 0:width].astype(np.float64)
    p = np.stack([xs, ys], axis=-1)
    q = hom_apply(hom_compose(hom_invert(H_to), H_from), p)
    return q - p


def pixel_grid(height: int, width: int) -> tuple[np.ndarray, np.ndarray]:
    ys, xs = np.mgrid[0:height, 0:width].astype(np.float64)
    return xs, ys


# -- bilinear sampling ----------------------------------------------------------


class Bilinear:
    """Bilinear lookup into a batch of images at fixed coordinates.

    ``src_shape`` is (B, H, W); ``x`` and ``y`` have shape (B, ...) and give,
    for every output sample, the continuous source coordinate inside image b.
    The lookup weights are built once and reused by :meth:`apply`,
    :meth:`adjoint` and :meth:`coord_grad`.
    """

    def __init__(self, src_shape: tuple[int, int, int], x: np.ndarray, y: np.ndarray):
        B, H, W = src_shape
        self.src_shape = src_shape
        self.out_shape = x.shape
        x = np.asarray(x).reshape(B, -1)
        y = np.asarray(y).reshape(B, -1)
        self.valid = (
            (x >= -VALID_TOL) & (x <= W - 1 + VALID_TOL) & (y >= -VALID_TOL) & (y <= H - 1 + VALID_TOL)
        ).reshape(self.out_shape)
        # derivative of the clamp: zero outside the image
        self.inside_x = ((x >= 0) & (x <= W - 1)).reshape(-1)
        self.inside_y = ((y >= 0) & (y <= H - 1)).reshape(-1)
        xc = np.clip(x, 0, W - 1)
        yc = np.clip(y, 0, H - 1)
        x0 = np.minimum(np.floor(xc), max(W - 2, 0)).astype(np.int64)
        y0 = np.minimum(np.floor(yc), max(H - 2, 0)).astype(np.int64)
        x1 = np.minimum(x0 + 1, W - 1)
        y1 = np.minimum(y0 + 1, H - 1)
        self.fx = (xc - x0).reshape(-1)
        self.fy = (yc - y0).reshape(-1)
        base = (np.arange(B) * H * W)[:, None]
        self.i00 = (base + y0 * W + x0).reshape(-1)
        self.i01 = (base + y0 * W + x1).reshape(-1)
        self.i10 = (base + y1 * W + x0).reshape(-1)
        self.i11 = (base + y1 * W + x1).reshape(-1)
        fx, fy = self.fx, self.fy
        self.w = ((1 - fx) * (1 - fy), fx * (1 - fy), (1 - fx) * fy, fx * fy)
        self.size = B * H * W

    def _flat(self, img: np.ndarray) -> np.ndarray:
        B, H, W = self.src_shape
        return img.reshape(B * H * W, -1)

    def _sparse(self, weights) -> sparse.csr_matrix:
        n = self.i00.size
        data = np.stack(weights, axis=1).ravel()
        cols = np.stack([self.i00, self.i01, self.i10, self.i11], axis=1).ravel()
        return sparse.csr_matrix((data, cols, np.arange(0, 4 * n + 1, 4)), shape=(n, self.size))

    @functools.cached_property
    def matrix(self) -> sparse.csr_matrix:
        """The lookup as a sparse (samples x source pixels) matrix."""
        return self._sparse(self.w)

    def apply(self, img: np.ndarray) -> np.ndarray:
        """Sample ``img`` of shape (B, H, W) or (B, H, W, C)."""
        out = self.matrix @ self._flat(img)
        return out.reshape(self.out_shape + img.shape[3:])

    def adjoint(self, g: np.ndarray) -> np.ndarray:
        """Scatter output gradients back onto the source images."""
        channels = g.shape[len(self.out_shape):]
        out = self.matrix.T @ g.reshape(self.i00.size, -1)
        return out.reshape(self.src_shape + channels)

    def coord_grad(self, img: np.ndarray, g: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Gradient of <g, apply(img)> with respect to the x and y coordinates."""
        flat = self._flat(img)
        gf = g.reshape(self.i00.size, -1)
        fx, fy = self.fx, self.fy
        dx = self._sparse((fy - 1, 1 - fy, -fy, fy)) @ flat
        dy = self._sparse((fx - 1, -fx, 1 - fx, fx)) @ flat
        gx = np.einsum("nc,nc->n", dx, gf) * self.inside_x
        gy = np.einsum("nc,nc->n", dy, gf) * self.inside_y
        return gx.reshape(self.out_shape), gy.reshape(self.out_shape)


def sample_bilinear(img: np.ndarray, x, y) -> tuple[np.ndarray, np.ndarray]:
    """Sample a single (H, W[, C]) image at coordinates x, y; returns (values, validity)."""
    img = np.asarray(img)
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    s = Bilinear((1,) + img.shape[:2], x[None], y[None])
    return s.apply(img[None])[0], s.valid[0].astype(np.float64)


def warp_by_homography(img: np.ndarray, H: np.ndarray, out_size: tuple[int, int], out_origin=(0.0, 0.0)):
    """Resample ``img`` onto an output grid: out(x) = img(H(x + origin)).

    ``out_size`` is (width, height).  Returns (image, validity).
    """
    w, h = out_size
    xs, ys = pixel_grid(h, w)
    p = hom_apply(H, np.stack([xs + out_origin[0], ys + out_origin[1]], axis=-1))
    return sample_bilinear(img, p[..., 0], p[..., 1])


# -- coarse adjustment grids -------------------------------------------------------


def grid_frames(num_frames: int) -> int:
    return max(1, math.ceil(num_frames / 10))


def hat_weights(n_samples: int, n_nodes: int) -> np.ndarray:
    """Linear-interpolation weights mapping samples 0..n_samples-1 onto nodes 0..n_nodes-1."""
    if n_nodes == 1:
        return np.ones((n_samples, 1))
    if n_samples == 1:
        u = np.zeros(1)
    else:
        u = np.arange(n_samples) * (n_nodes - 1) / (n_samples - 1)
    return np.maximum(0.0, 1.0 - np.abs(u[:, None] - np.arange(n_nodes)[None, :]))


class GridInterp:
    """Trilinear filtering of a (Tg, 4, 7, ...) grid over (t, y, x) of a video.

    Because the interpolation is separable and the sample positions are the
    pixel centers, the filter is a fixed linear map given by three small
    weight matrices.
    """

    def __init__(self, num_frames: int, height: int, width: int, grid_shape=None):
        tg, gh, gw = grid_shape or (grid_frames(num_frames), 4, 7)
        self.grid_shape = (tg, gh, gw)
        self.wt = hat_weights(num_frames, tg)
        self.wy = hat_weights(height, gh)
        self.wx = hat_weights(width, gw)

    def field(self, G: np.ndarray) -> np.ndarray:
        """Evaluate the grid at every (t, y, x); returns (T, H, W, ...)."""
        d = G.dtype
        a = np.tensordot(self.wt.astype(d), G, axes=(1, 0))  # T, gh, gw, ...
        a = np.tensordot(self.wy.astype(d), a, axes=(1, 1))  # H, T, gw, ...
        a = np.tensordot(self.wx.astype(d), a, axes=(1, 2))  # W, H, T, ...
        return np.ascontiguousarray(np.moveaxis(a, (0, 1, 2), (2, 1, 0)))

    def adjoint(self, g: np.ndarray) -> np.ndarray:
        d = g.dtype
        a = np.tensordot(self.wx.astype(d), g, axes=(0, 2))  # gw, T, H, ...
        a = np.tensordot(self.wy.astype(d), a, axes=(0, 2))  # gh, gw, T, ...
        return np.tensordot(self.wt.astype(d), a, axes=(0, 2))  # tg, gh, gw, ...

    def weights_at(self, t: int, y: int, x: int) -> np.ndarray:
        return np.einsum("a,b,c->abc", self.wt[t], self.wy[y], self.wx[x])


def background_warp(bg: np.ndarray, G_w: np.ndarray, t: int, num_frames: int) -> tuple[np.ndarray, np.ndarray]:
    """Resample frame ``t`` of the background by the smooth offset field of ``G_w``.

    out(x) = bg(x + offset(t, x)); offsets are in pixels, (dx, dy).
    Returns (image, validity).
    """
    H, W = bg.shape[:2]
    interp = GridInterp(num_frames, H, W, G_w.shape[:3])
    off = interp.field(G_w)[t]
    xs, ys = pixel_grid(H, W)
    return sample_bilinear(bg, xs + off[..., 0], ys + off[..., 1])


def brightness_adjust(img: np.ndarray, G_b: np.ndarray, t: int, num_frames: int) -> np.ndarray:
    """Scale frame ``t`` by the smooth gain field of ``G_b``."""
    H, W = img.shape[:2]
    gain = GridInterp(num_frames, H, W, G_b.shape[:3]).field(G_b)[t]
    return img * (gain[..., None] if img.ndim == 3 else gain)
