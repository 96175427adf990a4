"""Gradient saliency methods, subnetwork-swapped explanations and WSOL scoring.

Every method accepts optional gates; passing a class's gate vector runs
both the forward and the backward pass through that class's subnetwork.
"""

from __future__ import annotations

import csv
import io
import json
from collections.abc import Mapping, Sequence
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from . import tensor as T
from .model import ModelSpec, forward, predict

METHODS = ("gradient", "deconv", "guided_bp", "gradcam", "intgrad", "smoothgrad")
DEFAULT_ALPHAS = tuple(np.round(np.arange(0.5, 10.01, 0.5), 2))
IOU_THRESHOLD = 0.5


@dataclass
class SaliencyParams:
    intgrad_steps: int = 32
    smoothgrad_samples: int = 25
    smoothgrad_sigma: float = 0.15  # fraction of each image's value range
    seed: int = 0
    batch_size: int = 128

    def validate(self) -> None:
        if self.intgrad_steps < 1:
            raise ValueError("intgrad_steps must be >= 1")
        if self.smoothgrad_samples < 1:
            raise ValueError("smoothgrad_samples must be >= 1")
        if self.smoothgrad_sigma < 0:
            raise ValueError("smoothgrad_sigma must be >= 0")


@dataclass
class SaliencyMap:
    grid: np.ndarray
    method: str
    class_id: int
    mode: str


def _gates_arg(gates):
    return getattr(gates, "gates", gates)


def input_gradient(spec: ModelSpec, weights, x: np.ndarray, c, gates=None, rule: str = "standard") -> np.ndarray:
    """d logit_c / d input for each sample of the batch ``x`` (N×C×H×W)."""
    x = np.asarray(x, dtype=np.float64)
    c = np.broadcast_to(np.asarray(c, dtype=np.int64), (len(x),))
    with T.Tape():
        xt = T.Tensor(x, requires_grad=True)
        logits = forward(spec, weights, xt, _gates_arg(gates))
        grads = T.backward(T.sum(T.pick(logits, c)), rule)
    return grads[xt]


def _channel_max_abs(g: np.ndarray) -> np.ndarray:
    return np.abs(g).max(axis=1)


def _last_conv(spec: ModelSpec) -> str:
    return [layer.name for layer in spec.layers if layer.kind == "conv"][-1]


def bilinear_resize(maps: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Bilinear resize of N×h×w maps with half-pixel centers and edge clamping."""
    def weights(n_in, n_out):
        src = np.clip((np.arange(n_out) + 0.5) * n_in / n_out - 0.5, 0, n_in - 1)
        lo = np.floor(src).astype(int)
        hi = np.minimum(lo + 1, n_in - 1)
        frac = src - lo
        m = np.zeros((n_out, n_in))
        m[np.arange(n_out), lo] += 1 - frac
        m[np.arange(n_out), hi] += frac
        return m

    wy = weights(maps.shape[1], out_h)
    wx = weights(maps.shape[2], out_w)
    return np.einsum("ih,nhw,jw->nij", wy, maps, wx)


def gradcam(spec: ModelSpec, weights, x: np.ndarray, c, gates=None) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    c = np.broadcast_to(np.asarray(c, dtype=np.int64), (len(x),))
    layer = _last_conv(spec)
    with T.Tape():
        xt = T.Tensor(x, requires_grad=True)
        logits, taps = forward(spec, weights, xt, _gates_arg(gates), taps=True)
        feat = taps[layer]
        grads = T.backward(T.sum(T.pick(logits, c)))
    a = feat.data
    alpha = grads[feat].mean(axis=(2, 3))
    cam = np.maximum(np.einsum("nk,nkhw->nhw", alpha, a), 0.0)
    return bilinear_resize(cam, x.shape[2], x.shape[3])


def integrated_gradients(spec: ModelSpec, weights, x: np.ndarray, c, steps: int, gates=None,
                         baseline: np.ndarray | None = None, batch_size: int = 128) -> np.ndarray:
    """Signed attribution (x - x0) ⊙ mean_t ∇f_c(x0 + t/m (x - x0)), t = 1..m."""
    x = np.asarray(x, dtype=np.float64)
    c = np.broadcast_to(np.asarray(c, dtype=np.int64), (len(x),))
    x0 = np.zeros_like(x) if baseline is None else np.broadcast_to(baseline, x.shape)
    fractions = np.arange(1, steps + 1) / steps
    out = np.empty_like(x)
    for i in range(len(x)):
        diff = x[i] - x0[i]
        total = np.zeros_like(diff)
        for start in range(0, steps, batch_size):
            fr = fractions[start:start + batch_size]
            path = x0[i][None] + fr[:, None, None, None] * diff[None]
            total += input_gradient(spec, weights, path, c[i], gates).sum(axis=0)
        out[i] = diff * (total / steps)
    return out


def _smoothgrad(spec, weights, x, c, gates, params: SaliencyParams) -> np.ndarray:
    c = np.broadcast_to(np.asarray(c, dtype=np.int64), (len(x),))
    if params.smoothgrad_sigma == 0:
        return _channel_max_abs(input_gradient(spec, weights, x, c, gates))
    out = np.empty((len(x),) + x.shape[2:])
    n = params.smoothgrad_samples
    for i in range(len(x)):
        rng = np.random.default_rng([params.seed, i])
        sigma = params.smoothgrad_sigma * float(x[i].max() - x[i].min() or 1.0)
        noise = rng.standard_normal((n,) + x[i].shape) * sigma
        acc = np.zeros(x.shape[2:])
        for start in range(0, n, params.batch_size):
            batch = x[i][None] + noise[start:start + params.batch_size]
            acc += _channel_max_abs(input_gradient(spec, weights, batch, c[i], gates)).sum(axis=0)
        out[i] = acc / n
    return out


def saliency_batch(method: str, spec: ModelSpec, weights, x: np.ndarray, c, gates=None,
                   params: SaliencyParams | None = None) -> np.ndarray:
    """N×H×W nonnegative maps for a batch; ``c`` is a class id or one per sample."""
    params = params or SaliencyParams()
    params.validate()
    x = np.asarray(x, dtype=np.float64)
    if method == "gradient":
        return _channel_max_abs(input_gradient(spec, weights, x, c, gates, "standard"))
    if method == "deconv":
        return _channel_max_abs(input_gradient(spec, weights, x, c, gates, "deconv"))
    if method == "guided_bp":
        return _channel_max_abs(input_gradient(spec, weights, x, c, gates, "guided"))
    if method == "gradcam":
        return gradcam(spec, weights, x, c, gates)
    if method == "intgrad":
        return np.abs(integrated_gradients(spec, weights, x, c, params.intgrad_steps, gates, batch_size=params.batch_size)).max(axis=1)
    if method == "smoothgrad":
        return _smoothgrad(spec, weights, x, c, gates, params)
    raise ValueError(f"unknown saliency method {method!r}; expected one of {METHODS}")


def saliency(method: str, spec: ModelSpec, weights, x: np.ndarray, c: int, gates=None,
             params: SaliencyParams | None = None) -> SaliencyMap:
    """Saliency for one C×H×W image and class ``c``."""
    if not 0 <= c < spec.num_classes:
        raise ValueError(f"class {c} outside [0, {spec.num_classes})")
    grid = saliency_batch(method, spec, weights, np.asarray(x)[None], c, gates, params)[0]
    return SaliencyMap(grid, method, int(c), "normal" if gates is None else "subnet")


# ------------------------------------------------------------ localization


def saliency_mask(grid, alpha: float) -> np.ndarray:
    """Pixels whose saliency is at least alpha times the map mean."""
    grid = np.asarray(getattr(grid, "grid", grid), dtype=np.float64)
    if alpha <= 0:
        raise ValueError("alpha must be > 0")
    return grid >= alpha * grid.mean()


def saliency_to_bbox(grid, alpha: float) -> tuple[int, int, int, int]:
    """Tight box of the largest 4-connected region of :func:`saliency_mask`.

    An empty region yields the full-image box.
    """
    mask = saliency_mask(grid, alpha)
    h, w = mask.shape
    labels, count = ndimage.label(mask)
    if count == 0:
        return 0, 0, h - 1, w - 1
    sizes = np.bincount(labels.ravel())[1:]
    region = labels == (int(np.argmax(sizes)) + 1)
    rows = np.flatnonzero(region.any(axis=1))
    cols = np.flatnonzero(region.any(axis=0))
    return int(rows[0]), int(cols[0]), int(rows[-1]), int(cols[-1])


def iou(a, b) -> float:
    """Intersection over union of inclusive pixel boxes (row0, col0, row1, col1)."""
    ih = min(a[2], b[2]) - max(a[0], b[0]) + 1
    iw = min(a[3], b[3]) - max(a[1], b[1]) + 1
    inter = max(ih, 0) * max(iw, 0)
    area_a = (a[2] - a[0] + 1) * (a[3] - a[1] + 1)
    area_b = (b[2] - b[0] + 1) * (b[3] - b[1] + 1)
    return inter / (area_a + area_b - inter)


def localization_errors(maps: np.ndarray, gt_boxes: np.ndarray, correct: np.ndarray, alphas) -> np.ndarray:
    """Error rate per alpha: misclassified, or IoU(pred box, gt box) < 0.5."""
    out = []
    for a in alphas:
        hits = np.array([iou(saliency_to_bbox(m, a), g) >= IOU_THRESHOLD for m, g in zip(maps, gt_boxes)])
        out.append(float(np.mean(~(hits & correct))))
    return np.array(out)


@dataclass
class LocResult:
    method: str
    mode: str
    alphas: list[float]
    heldout_errors: list[float]
    test_errors: list[float]
    alpha_star: float
    test_error: float
    counts: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return dict(self.__dict__)


def explain_split(method: str, mode: str, spec: ModelSpec, weights, images: np.ndarray, classes: np.ndarray,
                  bundles: Mapping | None = None, params: SaliencyParams | None = None) -> np.ndarray:
    """Maps for each image, explaining ``classes[i]``; subnet mode swaps in that class's gates."""
    params = params or SaliencyParams()
    classes = np.asarray(classes)
    maps = np.empty((len(images),) + images.shape[2:])
    for c in np.unique(classes):
        idx = np.flatnonzero(classes == c)
        if mode == "subnet":
            if bundles is None or int(c) not in bundles:
                raise KeyError(f"subnet mode needs a bundle for class {int(c)}")
            gates = bundles[int(c)].gates
        elif mode == "normal":
            gates = None
        else:
            raise ValueError(f"unknown mode {mode!r}")
        for start in range(0, len(idx), params.batch_size):
            chunk = idx[start:start + params.batch_size]
            maps[chunk] = saliency_batch(method, spec, weights, images[chunk], c, gates, params)
    return maps


def wsol_eval(method: str, mode: str, spec: ModelSpec, weights, heldout, test,
              bundles: Mapping | None = None, alphas: Sequence[float] = DEFAULT_ALPHAS,
              params: SaliencyParams | None = None) -> LocResult:
    """Pick alpha* on ``heldout`` and report the ``test`` error there.

    The explained class is the full model's prediction in both modes, so the
    two modes share the misclassification component of the error.
    """
    alphas = [float(a) for a in alphas]
    if not alphas:
        raise ValueError("alpha grid is empty")
    errors = {}
    for name, split in (("heldout", heldout), ("test", test)):
        if split.bboxes is None:
            raise ValueError(f"{name} split has no ground-truth boxes")
        pred = predict(spec, weights, split.images).argmax(axis=1)
        maps = explain_split(method, mode, spec, weights, split.images, pred, bundles, params)
        errors[name] = localization_errors(maps, split.bboxes, pred == split.labels, alphas)
    best = int(np.argmin(errors["heldout"]))
    return LocResult(
        method=method,
        mode=mode,
        alphas=alphas,
        heldout_errors=errors["heldout"].tolist(),
        test_errors=errors["test"].tolist(),
        alpha_star=alphas[best],
        test_error=float(errors["test"][best]),
        counts={"heldout": len(heldout), "test": len(test)},
    )


# ----------------------------------------------------------------- outputs


def to_pgm(grid: np.ndarray) -> str:
    """Plain PGM (P2), 8-bit, scaled so the map maximum is 255."""
    grid = np.asarray(grid, dtype=np.float64)
    peak = grid.max()
    scaled = np.zeros(grid.shape, dtype=int) if peak <= 0 else np.rint(grid / peak * 255).astype(int)
    lines = ["P2", f"{grid.shape[1]} {grid.shape[0]}", "255"]
    lines += [" ".join(str(v) for v in row) for row in scaled]
    return "\n".join(lines) + "\n"


def to_csv(grid: np.ndarray) -> str:
    rows = np.asarray(grid, dtype=np.float32)
    return "\n".join(",".join(format(float(v), ".9g") for v in row) for row in rows) + "\n"


def table1_csv(results: Sequence[LocResult]) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["method", "mode", "alpha_star", "err"])
    for r in results:
        writer.writerow([r.method, r.mode, r.alpha_star, repr(r.test_error)])
    return buf.getvalue()


def loc_json(results: Sequence[LocResult]) -> str:
    return json.dumps([r.to_dict() for r in results], indent=1, sort_keys=True)
