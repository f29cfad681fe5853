"""Loss terms of the layer decomposition and their exact gradients.

The whole objective is evaluated for every frame at once.  The forward pass
keeps the intermediate arrays it needs, and :func:`evaluate` then walks the
graph backward by hand: the adjoints of compositing, bilinear lookups and
grid filtering are in :mod:`compositing` and :mod:`geometry`.

Conventions
-----------
* Image losses are means over valid pixels (and channels), so the weights
  keep their magnitudes independent of resolution.
* Terms that couple frame t and t+1 (flow, alpha warp, photometric) average
  over the T-1 available pairs.
* The L1 subgradient at 0 is 0 (``np.sign``).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from .compositing import over, over_backward, sort_layers, unsort_layers
from .flowops import flow_confidence, flow_sampler
from .geometry import Bilinear, CanvasSpec, GridInterp, canvas_from_homographies, induced_flow, pixel_grid

TERMS = ("rgb", "reg", "mask", "flow", "warp", "photo", "residual")


class NumericalError(FloatingPointError):
    """A loss term or gradient became NaN/inf, or the optimization diverged."""


def sigmoid(x: np.ndarray) -> np.ndarray:
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def logit(p: np.ndarray) -> np.ndarray:
    return np.log(p) - np.log1p(-p)


def phi0(x):
    """Smooth approximate-L0 penalty 2*sigmoid(5x) - 1."""
    if np.isscalar(x):
        return float(2.0 * sigmoid(5.0 * float(x)) - 1.0)
    return 2.0 * sigmoid(5.0 * x) - 1.0


def phi0_grad(x):
    s = sigmoid(5.0 * x)
    return 10.0 * s * (1.0 - s)


def disk(radius: int) -> np.ndarray:
    r = int(radius)
    yy, xx = np.mgrid[-r : r + 1, -r : r + 1]
    return (xx * xx + yy * yy) <= r * r


def dilate(mask: np.ndarray, radius: int) -> np.ndarray:
    m = np.asarray(mask) > 0.5
    if radius <= 0:
        return m
    return ndimage.binary_dilation(m, structure=disk(radius))


def erosion_weight(mask: np.ndarray, radius: int = 5) -> np.ndarray:
    """1 - dilate(M) + M: zero on the ring just outside the mask, one elsewhere."""
    m = (np.asarray(mask) > 0.5).astype(np.float64)
    return 1.0 - dilate(m, radius).astype(np.float64) + m


@dataclass
class LossWeights:
    lambda_r: float = 0.005
    lambda_m: float = 50.0
    lambda_w: float = 0.005
    lambda_p: float = 0.25
    lambda_res: float = 1e-3
    gamma: float = 0.1
    mask_gate: float = 0.05
    enable_photo: bool = False
    bootstrap_active: bool = True

    def coefficients(self) -> dict[str, float]:
        return {
            "rgb": 1.0,
            "reg": self.lambda_r,
            "mask": self.lambda_m if self.bootstrap_active else 0.0,
            "flow": 1.0,
            "warp": self.lambda_w,
            "photo": self.lambda_p if self.enable_photo else 0.0,
            "residual": self.lambda_res,
        }

    def update_gate(self, mask_value: float) -> None:
        """Switch the mask bootstrap off for good once its loss falls below the gate."""
        if self.bootstrap_active and mask_value < self.mask_gate:
            self.bootstrap_active = False


@dataclass
class LossReport:
    values: dict[str, float]
    coefficients: dict[str, float]
    total: float
    grad_norms: dict[str, float] = field(default_factory=dict)

    def __getitem__(self, key: str) -> float:
        return self.values[key]

    def as_row(self) -> dict[str, float]:
        row = {k: float(v) for k, v in self.values.items()}
        row["total"] = float(self.total)
        row["lambda_m"] = float(self.coefficients["mask"])
        return row


# -- precomputed problem ----------------------------------------------------------------


@dataclass
class Problem:
    """Fixed inputs of the optimization, preprocessed once."""

    frames: np.ndarray  # (T, H, W, 3)
    masks: np.ndarray  # (N, T, H, W)
    order: np.ndarray  # (T, N)
    erosion: np.ndarray  # (N, T, H, W)
    confidence: np.ndarray  # (T-1, H, W)
    flow_target: np.ndarray  # (T-1, H, W, 2)
    flow_in: np.ndarray  # (N, T, H, W, 2) masked input flow per layer, zero at the last frame
    bg_flow: np.ndarray  # (T-1, H, W, 2)
    homographies: np.ndarray  # (T, 3, 3)
    canvas: CanvasSpec
    canvas_sampler: Bilinear
    grid_warp: GridInterp
    grid_gain: GridInterp
    use_warp: bool = True
    use_gain: bool = True

    @property
    def shape(self) -> tuple[int, int, int, int]:
        N, T, H, W = self.masks.shape
        return N, T, H, W

    @property
    def dtype(self):
        return self.frames.dtype


def canvas_coords(homs: np.ndarray, spec: CanvasSpec, height: int, width: int) -> np.ndarray:
    """Canvas pixel coordinates (T, H, W, 2) seen by every frame pixel."""
    from .geometry import hom_apply

    xs, ys = pixel_grid(height, width)
    p = np.stack([xs, ys], axis=-1)
    return np.stack([hom_apply(spec.frame_to_canvas_pixels(H), p) for H in homs])


def build_problem(
    frames: np.ndarray,
    masks: np.ndarray,
    order: np.ndarray,
    flow_fwd: np.ndarray,
    flow_bwd: np.ndarray,
    homographies: np.ndarray,
    *,
    beta: float = 20.0,
    dilate_radius: int = 5,
    use_warp: bool = True,
    use_gain: bool = True,
    confidence: np.ndarray | None = None,
    dtype=np.float32,
) -> Problem:
    N, T, H, W = masks.shape
    union = (masks.max(axis=0) > 0.5).astype(np.float64)
    if confidence is None:
        confidence = np.stack(
            [
                flow_confidence(flow_fwd[t], flow_bwd[t], frames[t], frames[t + 1], union[t], beta).weight
                for t in range(T - 1)
            ]
        )
    erosion = np.stack([[erosion_weight(masks[i, t], dilate_radius) for t in range(T)] for i in range(N)])
    fpad = np.concatenate([flow_fwd, np.zeros((1, H, W, 2))], axis=0)
    flow_in = masks[..., None] * fpad[None]
    bg_flow = np.stack([induced_flow(homographies[t], homographies[t + 1], W, H) for t in range(T - 1)])
    spec = canvas_from_homographies(homographies, W, H)
    cc = canvas_coords(homographies, spec, H, W).astype(dtype)
    sampler = Bilinear((1, spec.height, spec.width), cc[None, ..., 0], cc[None, ..., 1])
    c = lambda a: np.ascontiguousarray(a, dtype=dtype)  # noqa: E731
    return Problem(
        frames=c(frames),
        masks=c(masks),
        order=np.asarray(order, dtype=np.int64),
        erosion=c(erosion),
        confidence=c(confidence),
        flow_target=c(flow_fwd),
        flow_in=c(flow_in),
        bg_flow=c(bg_flow),
        homographies=np.asarray(homographies, dtype=np.float64),
        canvas=spec,
        canvas_sampler=sampler,
        grid_warp=GridInterp(T, H, W),
        grid_gain=GridInterp(T, H, W),
        use_warp=use_warp,
        use_gain=use_gain,
    )


# -- standalone loss terms (value, gradient w.r.t. their direct inputs) --------------------


def loss_rgb_recon(comp: np.ndarray, frames: np.ndarray, valid: np.ndarray | None = None):
    """Mean absolute error over valid pixels and channels, averaged over frames.

    Returns (value, d value / d comp).
    """
    T = frames.shape[0]
    if valid is None:
        valid = np.ones(frames.shape[:3], dtype=bool)
    nvalid = valid.reshape(T, -1).sum(axis=1)
    scale = (1.0 / (frames.shape[-1] * np.maximum(nvalid, 1) * T)).astype(comp.dtype)
    wv = valid * scale[:, None, None]
    diff = comp - frames
    value = float(np.sum(np.abs(diff) * wv[..., None]))
    return value, np.sign(diff) * wv[..., None]


def loss_reg(alpha: np.ndarray, gamma: float = 0.1):
    """Mean of gamma*alpha + phi0(alpha) over layers, frames and pixels."""
    value = float(np.mean(gamma * alpha + phi0(alpha)))
    return value, ((gamma + phi0_grad(alpha)) / alpha.size).astype(alpha.dtype)


def loss_mask(alpha: np.ndarray, masks: np.ndarray, erosion: np.ndarray):
    """Average over (layer, frame) of the RMS of the eroded mask residual."""
    r = erosion * (masks - alpha)
    npix = r.shape[-1] * r.shape[-2]
    ms = np.mean(r * r, axis=(-2, -1))
    rms = np.sqrt(ms)
    value = float(np.mean(rms))
    safe = np.where(rms > 0, rms, 1.0)
    g = np.where((rms > 0)[..., None, None], -erosion * r / (npix * safe[..., None, None]), 0.0)
    return value, (g / rms.size).astype(alpha.dtype)


def loss_flow_recon(comp_flow: np.ndarray, target: np.ndarray, confidence: np.ndarray):
    """Confidence-weighted mean L1 between composited and input flow."""
    P, H, W = confidence.shape
    if P == 0:
        return 0.0, np.zeros_like(comp_flow)
    scale = 1.0 / (2 * H * W * P)
    diff = comp_flow - target
    w = (confidence * scale)[..., None].astype(comp_flow.dtype)
    return float(np.sum(np.abs(diff) * w)), np.sign(diff) * w


def loss_residual(residual: np.ndarray):
    return float(np.mean(residual * residual)), (2.0 / residual.size) * residual


def _masked_pair_l1(diff: np.ndarray, valid: np.ndarray, channels: int):
    """Per-(batch) mean over valid pixels of |diff|, averaged over the batch."""
    B = valid.shape[0]
    if B == 0:
        return 0.0, np.zeros_like(diff)
    nvalid = valid.reshape(B, -1).sum(axis=1)
    scale = (1.0 / (channels * np.maximum(nvalid, 1) * B)).astype(diff.dtype)
    wv = valid * scale.reshape((B,) + (1,) * (valid.ndim - 1))
    if diff.ndim > valid.ndim:
        wv = wv[..., None]
    return float(np.sum(np.abs(diff) * wv)), np.sign(diff) * wv


def loss_alpha_warp(alpha: np.ndarray, fhat: np.ndarray):
    """Temporal alpha consistency: |alpha_t - warp(alpha_{t+1}, fhat_t)|, averaged.

    ``alpha`` is (N, T, H, W); ``fhat`` is (N, T, H, W, 2) (the last frame unused).
    Returns (value, d/d alpha, d/d fhat).
    """
    N, T, H, W = alpha.shape
    if T < 2:
        return 0.0, np.zeros_like(alpha), np.zeros_like(fhat)
    P = N * (T - 1)
    s = flow_sampler(fhat[:, : T - 1].reshape(P, H, W, 2))
    src = alpha[:, 1:].reshape(P, H, W)
    warped = s.apply(src)
    value, g = _masked_pair_l1(alpha[:, : T - 1].reshape(P, H, W) - warped, s.valid, 1)
    g_alpha = np.zeros_like(alpha)
    g_alpha[:, : T - 1] += g.reshape(N, T - 1, H, W)
    g_alpha[:, 1:] += s.adjoint(-g).reshape(N, T - 1, H, W)
    gx, gy = s.coord_grad(src, -g)
    g_fhat = np.zeros_like(fhat)
    g_fhat[:, : T - 1, ..., 0] = gx.reshape(N, T - 1, H, W)
    g_fhat[:, : T - 1, ..., 1] = gy.reshape(N, T - 1, H, W)
    return value, g_alpha, g_fhat


# -- full objective -------------------------------------------------------------------------


def _zeros(params) -> dict[str, np.ndarray]:
    return {k: np.zeros_like(v) for k, v in params.tensors().items()}


@dataclass
class _Forward:
    alpha: np.ndarray
    color: np.ndarray
    canvas: np.ndarray
    fhat: np.ndarray
    bg0: np.ndarray
    bg: np.ndarray
    valid: np.ndarray
    gain: np.ndarray
    composite: np.ndarray
    over_out: np.ndarray
    over_cache: tuple
    warp_sampler: Bilinear | None
    offsets: np.ndarray | None


def render(params, prob: Problem) -> _Forward:
    """Realize every layer from the latents and composite all frames."""
    N, T, H, W = prob.shape
    alpha = sigmoid(params.alpha)
    color = sigmoid(params.color)
    canvas = sigmoid(params.canvas)
    fhat = prob.flow_in + params.flow
    bg0 = prob.canvas_sampler.apply(canvas[None])[0]
    valid = prob.canvas_sampler.valid[0]
    ws, off = None, None
    if prob.use_warp:
        off = prob.grid_warp.field(params.grid_warp)
        xs, ys = pixel_grid(H, W)
        ws = Bilinear((T, H, W), xs.astype(off.dtype) + off[..., 0], ys.astype(off.dtype) + off[..., 1])
        bg = ws.apply(bg0)
        valid = valid & ws.valid
    else:
        bg = bg0
    gain = prob.grid_gain.field(params.grid_gain) if prob.use_gain else np.ones((T, H, W), dtype=bg.dtype)
    out, cache = over(bg, sort_layers(alpha, prob.order), sort_layers(color, prob.order))
    return _Forward(alpha, color, canvas, fhat, bg0, bg, valid, gain, out * gain[..., None], out, cache, ws, off)


class _Grads:
    """Gradients with respect to realized quantities, one bucket per term."""

    KEYS = ("alpha", "color", "fhat", "bg", "gain", "residual")

    def __init__(self):
        self.buckets: dict[str, dict[str, np.ndarray]] = {}

    def add(self, term: str, key: str, g: np.ndarray) -> None:
        b = self.buckets.setdefault(term, {})
        b[key] = b[key] + g if key in b else g


def _chain(realized: dict[str, np.ndarray], fw: _Forward, params, prob: Problem) -> dict[str, np.ndarray]:
    """Map gradients w.r.t. realized layers onto the latent parameters."""
    grads = _zeros(params)
    if "alpha" in realized:
        grads["alpha"] += realized["alpha"] * fw.alpha * (1.0 - fw.alpha)
    if "color" in realized:
        grads["color"] += realized["color"] * fw.color * (1.0 - fw.color)
    if "fhat" in realized:
        grads["flow"] += realized["fhat"]
    if "residual" in realized:
        grads["flow"] += realized["residual"]
    if "gain" in realized and prob.use_gain:
        grads["grid_gain"] += prob.grid_gain.adjoint(realized["gain"])
    if "bg" in realized:
        g_bg = realized["bg"]
        if prob.use_warp:
            gx, gy = fw.warp_sampler.coord_grad(fw.bg0, g_bg)
            grads["grid_warp"] += prob.grid_warp.adjoint(np.stack([gx, gy], axis=-1))
            g_bg0 = fw.warp_sampler.adjoint(g_bg)
        else:
            g_bg0 = g_bg
        g_canvas = prob.canvas_sampler.adjoint(g_bg0[None])[0]
        grads["canvas"] += g_canvas * fw.canvas * (1.0 - fw.canvas)
    return grads


def evaluate(params, prob: Problem, weights: LossWeights, terms=None, grad: bool = True, grad_norms: bool = False):
    """Compute every loss term, the weighted total and (optionally) exact gradients.

    ``terms`` restricts which terms contribute to the total and the gradient;
    the others are still reported.  Returns (LossReport, grads or None).
    """
    N, T, H, W = prob.shape
    coef = weights.coefficients()
    if terms is not None:
        coef = {k: (v if k in terms else 0.0) for k, v in coef.items()}
    fw = render(params, prob)
    values: dict[str, float] = {}
    G = _Grads()
    P = T - 1

    # frame reconstruction
    values["rgb"], g_comp = loss_rgb_recon(fw.composite, prob.frames, fw.valid)
    if grad and coef["rgb"]:
        _composite_backward(G, "rgb", coef["rgb"] * g_comp, fw, prob)

    values["reg"], g = loss_reg(fw.alpha, weights.gamma)
    if grad and coef["reg"]:
        G.add("reg", "alpha", coef["reg"] * g)

    values["mask"], g = loss_mask(fw.alpha, prob.masks, prob.erosion)
    if grad and coef["mask"]:
        G.add("mask", "alpha", coef["mask"] * g)

    # flow reconstruction: layer flows composited with the layer alphas over the camera flow
    al_s = sort_layers(fw.alpha[:, :P], prob.order[:P])
    fl_s = sort_layers(fw.fhat[:, :P], prob.order[:P])
    comp_flow, fcache = over(prob.bg_flow, al_s, fl_s)
    values["flow"], g_cf = loss_flow_recon(comp_flow, prob.flow_target, prob.confidence)
    if grad and coef["flow"] and P > 0:
        _, ga, gf = over_backward(coef["flow"] * g_cf, fcache)
        g_alpha = np.zeros_like(fw.alpha)
        g_alpha[:, :P] = unsort_layers(ga, prob.order[:P], (N, P, H, W), fw.alpha.dtype)
        g_fhat = np.zeros_like(fw.fhat)
        g_fhat[:, :P] = unsort_layers(gf, prob.order[:P], (N, P, H, W, 2), fw.fhat.dtype)
        G.add("flow", "alpha", g_alpha)
        G.add("flow", "fhat", g_fhat)

    values["warp"], ga, gf = loss_alpha_warp(fw.alpha, fw.fhat)
    if grad and coef["warp"]:
        G.add("warp", "alpha", coef["warp"] * ga)
        G.add("warp", "fhat", coef["warp"] * gf)

    if weights.enable_photo:
        values["photo"] = _photo(G, fw, params, prob, coef["photo"] if grad else 0.0)
    else:
        values["photo"] = 0.0

    values["residual"], g = loss_residual(params.flow)
    if grad and coef["residual"]:
        G.add("residual", "residual", coef["residual"] * g)

    for k, v in values.items():
        if not np.isfinite(v):
            raise NumericalError(f"loss term '{k}' is not finite ({v})")
    total = float(sum(coef[k] * values[k] for k in TERMS))
    report = LossReport(values, coef, total)
    if not grad:
        return report, None

    grads = _zeros(params)
    for term, bucket in G.buckets.items():
        g_term = _chain(bucket, fw, params, prob)
        if grad_norms:
            report.grad_norms[term] = float(np.sqrt(sum(np.sum(v.astype(np.float64) ** 2) for v in g_term.values())))
        for k in grads:
            grads[k] += g_term[k]
    for k, v in grads.items():
        if not np.all(np.isfinite(v)):
            raise NumericalError(f"gradient for '{k}' is not finite")
    return report, grads


def _composite_backward(G: _Grads, term: str, g_comp: np.ndarray, fw: _Forward, prob: Problem) -> None:
    """Push d loss / d composite back through brightness and compositing (all frames)."""
    G.add(term, "gain", np.sum(g_comp * fw.over_out, axis=-1))
    g_bg, ga, gc = over_backward(g_comp * fw.gain[..., None], fw.over_cache)
    G.add(term, "bg", g_bg)
    G.add(term, "alpha", unsort_layers(ga, prob.order, fw.alpha.shape, fw.alpha.dtype))
    G.add(term, "color", unsort_layers(gc, prob.order, fw.color.shape, fw.color.dtype))


def _photo(G: _Grads, fw: _Forward, params, prob: Problem, coef: float) -> float:
    """Layers of frame t+1 warped back by their own flow must re-render frame t."""
    N, T, H, W = prob.shape
    P = T - 1
    if P == 0:
        return 0.0
    s = flow_sampler(fw.fhat[:, :P].reshape(N * P, H, W, 2))
    a_src = fw.alpha[:, 1:].reshape(N * P, H, W)
    c_src = fw.color[:, 1:].reshape(N * P, H, W, 3)
    aw = s.apply(a_src).reshape(N, P, H, W)
    cw = s.apply(c_src).reshape(N, P, H, W, 3)
    order = prob.order[:P]
    out, cache = over(fw.bg[:P], sort_layers(aw, order), sort_layers(cw, order))
    gain = fw.gain[:P]
    comp = out * gain[..., None]
    valid = fw.valid[:P] & np.all(s.valid.reshape(N, P, H, W), axis=0)
    value, g = _masked_pair_l1(comp - prob.frames[:P], valid, 3)
    if not coef:
        return value
    g = coef * g
    g_gain = np.zeros_like(fw.gain)
    g_gain[:P] = np.sum(g * out, axis=-1)
    G.add("photo", "gain", g_gain)
    g_bg_p, ga, gc = over_backward(g * gain[..., None], cache)
    g_bg = np.zeros_like(fw.bg)
    g_bg[:P] = g_bg_p
    G.add("photo", "bg", g_bg)
    g_aw = unsort_layers(ga, order, (N, P, H, W), aw.dtype).reshape(N * P, H, W)
    g_cw = unsort_layers(gc, order, (N, P, H, W, 3), cw.dtype).reshape(N * P, H, W, 3)
    g_alpha = np.zeros_like(fw.alpha)
    g_alpha[:, 1:] = s.adjoint(g_aw).reshape(N, P, H, W)
    g_color = np.zeros_like(fw.color)
    g_color[:, 1:] = s.adjoint(g_cw).reshape(N, P, H, W, 3)
    ax, ay = s.coord_grad(a_src, g_aw)
    cx, cy = s.coord_grad(c_src, g_cw)
    g_fhat = np.zeros_like(fw.fhat)
    g_fhat[:, :P, ..., 0] = (ax + cx).reshape(N, P, H, W)
    g_fhat[:, :P, ..., 1] = (ay + cy).reshape(N, P, H, W)
    G.add("photo", "alpha", g_alpha)
    G.add("photo", "color", g_color)
    G.add("photo", "fhat", g_fhat)
    return value


def total_loss(params, prob: Problem, weights: LossWeights) -> LossReport:
    report, _ = evaluate(params, prob, weights, grad=False)
    return report


def grad_total(params, prob: Problem, weights: LossWeights) -> dict[str, np.ndarray]:
    _, grads = evaluate(params, prob, weights)
    return grads
