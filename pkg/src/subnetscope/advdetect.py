"""Adversarial attacks and class-specific Mahalanobis detection.

Scores are the negative squared Mahalanobis distance of a layer feature to
the closest class mean under a pooled covariance.  In subnet mode the class
``c`` mean and the class ``c`` term of the score both use features computed
through class ``c``'s gated network.
"""

from __future__ import annotations

import csv
import io
import json
from collections.abc import Mapping, Sequence
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy import linalg
from scipy.stats import rankdata

from . import tensor as T
from ._container import pack_arrays, read_container, unpack_arrays, write_container
from .model import ModelSpec, cross_entropy, forward, predict

ADV_MAGIC = b"SSAD"
ATTACK_KINDS = ("fgsm", "bim", "deepfool")
MODES = ("full_model", "subnet")
SCORED_LAYERS = ("pool0", "pool1", "pool2", "dense0")
MIN_ADVERSARIAL = 50


class DetectionError(RuntimeError):
    pass


@dataclass(frozen=True)
class AttackSpec:
    kind: str
    eps: float = 0.1
    steps: int = 1
    overshoot: float = 0.02
    clip: tuple[float, float] = (0.0, 1.0)

    def __post_init__(self):
        object.__setattr__(self, "clip", tuple(self.clip))
        if self.kind not in ATTACK_KINDS:
            raise ValueError(f"unknown attack {self.kind!r}; expected one of {ATTACK_KINDS}")
        if self.kind != "deepfool" and self.eps <= 0:
            raise ValueError("eps must be > 0")
        if self.steps < 1:
            raise ValueError("steps must be >= 1")
        if self.overshoot < 0:
            raise ValueError("overshoot must be >= 0")
        if not self.clip[0] < self.clip[1]:
            raise ValueError("clip range must be increasing")

    @classmethod
    def default(cls, kind: str) -> AttackSpec:
        steps = {"fgsm": 1, "bim": 10, "deepfool": 50}
        if kind not in steps:
            raise ValueError(f"unknown attack {kind!r}; expected one of {ATTACK_KINDS}")
        return cls(kind, steps=steps[kind])

    def to_dict(self) -> dict:
        d = asdict(self)
        d["clip"] = list(self.clip)
        return d


# ----------------------------------------------------------------- attacks


def _loss_gradient(spec, weights, x, y, gates=None) -> np.ndarray:
    with T.Tape():
        xt = T.Tensor(x, requires_grad=True)
        loss = cross_entropy(forward(spec, weights, xt, gates), y)
        grads = T.backward(loss)
    if xt not in grads:
        raise T.DetachedError("input gradient unavailable")
    return grads[xt]


def _logit_gradients(spec, weights, x, classes: Sequence[int]) -> tuple[np.ndarray, np.ndarray]:
    """Logits (N×K) and d logit_k / dx for every k in ``classes`` (len×N×...)."""
    out = []
    logits = None
    for k in classes:
        with T.Tape():
            xt = T.Tensor(x, requires_grad=True)
            z = forward(spec, weights, xt)
            grads = T.backward(T.sum(T.pick(z, np.full(len(x), k))))
        logits = z.data
        out.append(grads[xt])
    return logits, np.stack(out)


def fgsm(spec, weights, x, y, eps: float, clip=(0.0, 1.0)) -> np.ndarray:
    g = _loss_gradient(spec, weights, x, y)
    return np.clip(x + eps * np.sign(g), *clip)


def bim(spec, weights, x, y, eps: float, steps: int, clip=(0.0, 1.0)) -> np.ndarray:
    step = eps / steps
    adv = x.copy()
    for _ in range(steps):
        adv = adv + step * np.sign(_loss_gradient(spec, weights, adv, y))
        adv = np.clip(np.clip(adv, x - eps, x + eps), *clip)
    return adv


def deepfool(spec, weights, x, y, steps: int = 50, overshoot: float = 0.02, clip=(0.0, 1.0)) -> np.ndarray:
    """Multi-class DeepFool: repeatedly step to the nearest linearized boundary."""
    n = len(x)
    k = spec.num_classes
    y = np.asarray(y, dtype=np.int64)
    r_total = np.zeros_like(x)
    active = np.ones(n, dtype=bool)
    adv = x.copy()
    for _ in range(steps):
        idx = np.flatnonzero(active)
        if idx.size == 0:
            break
        logits, grads = _logit_gradients(spec, weights, adv[idx], range(k))
        still = logits.argmax(axis=1) == y[idx]
        active[idx[~still]] = False
        idx, logits, grads = idx[still], logits[still], grads[:, still]
        if idx.size == 0:
            break
        rows = np.arange(idx.size)
        f_true = logits[rows, y[idx]]
        g_true = grads[y[idx], rows]
        flat = grads.reshape(k, idx.size, -1) - g_true.reshape(1, idx.size, -1)
        norms = np.linalg.norm(flat, axis=2) + 1e-12
        dist = np.abs(logits.T - f_true) / norms
        dist[y[idx], rows] = np.inf
        best = dist.argmin(axis=0)
        w = flat[best, rows]
        step = (dist[best, rows] + 1e-4)[:, None] * w / norms[best, rows][:, None]
        r_total[idx] += step.reshape((idx.size,) + x.shape[1:])
        adv[idx] = np.clip(x[idx] + (1 + overshoot) * r_total[idx], *clip)
    return np.clip(x + (1 + overshoot) * r_total, *clip)


def attack(spec: AttackSpec, model: ModelSpec, weights, x, y_true, batch_size: int = 250) -> tuple[np.ndarray, np.ndarray]:
    """Adversarial versions of ``x`` and a per-sample success flag."""
    x = np.asarray(x, dtype=np.float64)
    y_true = np.asarray(y_true, dtype=np.int64)
    lo, hi = spec.clip
    if x.size and (x.min() < lo or x.max() > hi):
        raise ValueError(f"inputs must lie in the clip range {spec.clip}")
    out = np.empty_like(x)
    for start in range(0, len(x), batch_size):
        xb, yb = x[start:start + batch_size], y_true[start:start + batch_size]
        if spec.kind == "fgsm":
            out[start:start + len(xb)] = fgsm(model, weights, xb, yb, spec.eps, spec.clip)
        elif spec.kind == "bim":
            out[start:start + len(xb)] = bim(model, weights, xb, yb, spec.eps, spec.steps, spec.clip)
        else:
            out[start:start + len(xb)] = deepfool(model, weights, xb, yb, spec.steps, spec.overshoot, spec.clip)
    success = predict(model, weights, out).argmax(axis=1) != y_true
    return out, success


# ------------------------------------------------------------- Mahalanobis


@dataclass
class LayerStats:
    means: np.ndarray  # K×d
    cov: np.ndarray  # d×d, unregularized
    delta: float
    factor: tuple = field(repr=False, default=None)

    def __post_init__(self):
        if self.factor is None:
            self.factor = _factorize(self.cov, self.delta)

    def precision_solve(self, v: np.ndarray) -> np.ndarray:
        return linalg.cho_solve(self.factor, v)


@dataclass
class MahalanobisStats:
    layers: dict[str, LayerStats]
    mode: str
    counts: np.ndarray
    total: int

    def to_dict(self) -> dict:
        return {
            "mode": self.mode,
            "counts": self.counts.tolist(),
            "total": self.total,
            "layers": {
                name: {"means": s.means.tolist(), "cov": s.cov.tolist(), "delta": s.delta}
                for name, s in self.layers.items()
            },
        }


def _factorize(cov: np.ndarray, delta: float, layer: str = ""):
    try:
        return linalg.cho_factor(cov + delta * np.eye(len(cov)), lower=True)
    except linalg.LinAlgError as err:
        raise linalg.LinAlgError(f"covariance of layer {layer!r} not positive definite with delta={delta:.3e}") from err


def regularizer(cov: np.ndarray) -> float:
    """delta = 1e-6 · trace/d, falling back to 1e-6 for an all-zero covariance."""
    delta = 1e-6 * float(np.trace(cov)) / len(cov)
    return delta if delta > 0 else 1e-6


def layer_features(spec: ModelSpec, weights, x, gates=None, layers=SCORED_LAYERS, batch_size: int = 256) -> dict[str, np.ndarray]:
    """Per-layer features: spatial means of 4-D taps, dense taps as they are."""
    chunks: dict[str, list[np.ndarray]] = {name: [] for name in layers}
    for start in range(0, len(x), batch_size):
        _, taps = forward(spec, weights, x[start:start + batch_size], gates, taps=True)
        for name in layers:
            h = taps[name].data
            chunks[name].append(h.mean(axis=(2, 3)) if h.ndim == 4 else h)
    width = {name: taps[name].shape[1] for name in layers} if len(x) else {}
    return {
        name: np.concatenate(v) if v else np.zeros((0, width.get(name, 0))) for name, v in chunks.items()
    }


def fit_from_features(per_class: Sequence[Mapping[str, np.ndarray]], mode: str = "full_model") -> MahalanobisStats:
    """Class means and pooled covariance from per-class feature tables.

    ``per_class[c][layer]`` holds the N_c×d features of class ``c``'s samples.
    """
    counts = np.array([len(next(iter(f.values()))) for f in per_class])
    if np.any(counts < 1):
        raise ValueError(f"every class needs samples, got counts {counts.tolist()}")
    total = int(counts.sum())
    layers = {}
    for name in per_class[0]:
        means = np.stack([f[name].mean(axis=0) for f in per_class])
        d = means.shape[1]
        scatter = np.zeros((d, d))
        for c, f in enumerate(per_class):
            dev = f[name] - means[c]
            scatter += dev.T @ dev
        cov = scatter / total
        cov = 0.5 * (cov + cov.T)
        delta = regularizer(cov)
        layers[name] = LayerStats(means, cov, delta, _factorize(cov, delta, name))
    return MahalanobisStats(layers, mode, counts, total)


def _check_bundles(bundles, k: int) -> list:
    table = dict(bundles) if isinstance(bundles, Mapping) else {b.class_id: b for b in bundles}
    missing = [c for c in range(k) if c not in table]
    if missing:
        raise KeyError(f"subnet mode needs a bundle for every class; missing {missing}")
    return [getattr(table[c], "gates", table[c]) for c in range(k)]


def fit_mahalanobis(spec: ModelSpec, weights, train, bundles=None, layers=SCORED_LAYERS) -> MahalanobisStats:
    """Fit class means and a shared covariance per scored layer.

    With ``bundles`` (one per class) class ``c``'s samples are featurized
    through class ``c``'s subnetwork.
    """
    k = spec.num_classes
    counts = np.bincount(train.labels, minlength=k)
    if np.any(counts < 2):
        raise ValueError(f"every class needs at least 2 samples, got {counts.tolist()}")
    gates = _check_bundles(bundles, k) if bundles is not None else [None] * k
    per_class = [layer_features(spec, weights, train.images[train.labels == c], gates[c], layers) for c in range(k)]
    return fit_from_features(per_class, "subnet" if bundles is not None else "full_model")


def score_from_features(stats: LayerStats, feats: np.ndarray) -> np.ndarray:
    """max_c of -(f_c - mu_c)^T P (f_c - mu_c).

    ``feats`` is N×d (one feature for all classes) or K×N×d (class-wise).
    """
    k = len(stats.means)
    feats = np.broadcast_to(feats, (k,) + feats.shape) if feats.ndim == 2 else feats
    terms = np.empty((k, feats.shape[1]))
    for c in range(k):
        dev = feats[c] - stats.means[c]
        terms[c] = -np.einsum("nd,dn->n", dev, stats.precision_solve(dev.T))
    return terms.max(axis=0)


def mahalanobis_score(stats: MahalanobisStats, spec: ModelSpec, weights, x, bundles=None,
                      subnet_feature: str = "per_class") -> np.ndarray:
    """N×L matrix of per-layer confidence scores (L = number of scored layers).

    ``subnet_feature`` picks, in subnet mode, whether the class ``c`` term
    uses class ``c``'s subnetwork ("per_class") or every term uses the
    subnetwork of the full model's predicted class ("predicted").
    """
    x = np.asarray(x, dtype=np.float64)
    names = list(stats.layers)
    if (stats.mode == "subnet") != (bundles is not None):
        raise ValueError(f"stats were fitted in {stats.mode} mode but bundles {'were' if bundles is not None else 'were not'} given")
    k = spec.num_classes
    if bundles is None:
        feats = layer_features(spec, weights, x, None, names)
    elif subnet_feature == "per_class":
        gates = _check_bundles(bundles, k)
        per_class = [layer_features(spec, weights, x, gates[c], names) for c in range(k)]
        feats = {name: np.stack([f[name] for f in per_class]) for name in names}
    elif subnet_feature == "predicted":
        gates = _check_bundles(bundles, k)
        pred = predict(spec, weights, x).argmax(axis=1)
        feats = {name: np.zeros((len(x), len(stats.layers[name].cov))) for name in names}
        for c in np.unique(pred):
            sel = pred == c
            for name, f in layer_features(spec, weights, x[sel], gates[c], names).items():
                feats[name][sel] = f
    else:
        raise ValueError(f"unknown subnet_feature {subnet_feature!r}")
    return np.stack([score_from_features(stats.layers[name], feats[name]) for name in names], axis=1)


# --------------------------------------------------------------- detection


def auroc(scores_pos, scores_neg) -> float:
    """Probability that a positive outranks a negative; ties count one half."""
    pos = np.asarray(scores_pos, dtype=np.float64).ravel()
    neg = np.asarray(scores_neg, dtype=np.float64).ravel()
    if pos.size == 0 or neg.size == 0:
        raise ValueError("auroc needs nonempty positive and negative sets")
    ranks = rankdata(np.concatenate([pos, neg]))
    return float((ranks[:pos.size].sum() - pos.size * (pos.size + 1) / 2) / (pos.size * neg.size))


@dataclass
class LogisticDetector:
    mean: np.ndarray
    std: np.ndarray
    w: np.ndarray
    b: float

    def decision(self, features) -> np.ndarray:
        z = (np.asarray(features, dtype=np.float64) - self.mean) / self.std
        return z @ self.w + self.b

    def predict_proba(self, features) -> np.ndarray:
        return T._sigmoid(self.decision(features))


def train_detector(features, labels, lr: float = 0.1, iterations: int = 2000, l2: float = 1e-4) -> LogisticDetector:
    """Full-batch gradient descent on the mean logistic loss plus l2/2·|w|^2.

    Label 1 marks adversarial samples.
    """
    x = np.asarray(features, dtype=np.float64)
    y = np.asarray(labels, dtype=np.float64)
    if x.ndim == 1:
        x = x[:, None]
    if len(np.unique(y)) < 2:
        raise ValueError("detector training needs both clean and adversarial samples")
    mean = x.mean(axis=0)
    std = x.std(axis=0)
    std = np.where(std > 0, std, 1.0)
    z = (x - mean) / std
    w = np.zeros(z.shape[1])
    b = 0.0
    n = len(y)
    for _ in range(iterations):
        err = T._sigmoid(z @ w + b) - y
        w -= lr * (z.T @ err / n + l2 * w)
        b -= lr * float(err.mean())
    return LogisticDetector(mean, std, w, b)


def detector_auroc(detector: LogisticDetector, features, labels) -> float:
    p = detector.decision(features if np.ndim(features) == 2 else np.asarray(features)[:, None])
    labels = np.asarray(labels)
    return auroc(p[labels == 1], p[labels == 0])


@dataclass
class DetectionReport:
    seen: dict[str, dict[str, float]]  # attack -> mode -> AUROC
    unknown: dict[str, dict[str, float]]  # attack -> mode -> AUROC of the FGSM-trained detector
    counts: dict[str, dict[str, int]]
    config: dict

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=1, sort_keys=True)

    def mean_auroc(self, mode: str) -> float:
        return float(np.mean([v[mode] for v in self.seen.values()]))


def _split(n: int, seed: int) -> tuple[np.ndarray, np.ndarray]:
    order = np.random.default_rng(seed).permutation(n)
    return np.sort(order[: n // 2]), np.sort(order[n // 2:])


def _paired(clean: np.ndarray, adv: np.ndarray, idx: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    feats = np.concatenate([clean[idx], adv[idx]])
    labels = np.concatenate([np.zeros(len(idx)), np.ones(len(idx))])
    return feats, labels


def run_detection_suite(spec: ModelSpec, weights, bundles, data, attacks: Sequence[AttackSpec] | None = None,
                        modes: Sequence[str] = MODES, seed: int = 0, max_samples: int | None = 500,
                        adversarial: Mapping[str, tuple[np.ndarray, np.ndarray]] | None = None,
                        subnet_feature: str = "per_class", layers: Sequence[str] = SCORED_LAYERS) -> DetectionReport:
    """Craft attacks on correctly classified test images and score detectors.

    ``data`` maps split names to labeled sets and needs ``train`` and
    ``test``.  ``adversarial`` may supply precomputed ``(x_adv, success)``
    per attack kind for the selected test samples.
    """
    attacks = list(attacks) if attacks is not None else [AttackSpec.default(k) for k in ATTACK_KINDS]
    for mode in modes:
        if mode not in MODES:
            raise ValueError(f"unknown mode {mode!r}")
    test = data["test"]
    correct = np.flatnonzero(predict(spec, weights, test.images).argmax(axis=1) == test.labels)
    if max_samples is not None and len(correct) > max_samples:
        correct = np.sort(np.random.default_rng(seed).choice(correct, max_samples, replace=False))
    images, labels = test.images[correct], test.labels[correct]

    stats = {mode: fit_mahalanobis(spec, weights, data["train"], bundles if mode == "subnet" else None, layers)
             for mode in modes}

    def scores(mode, x):
        return mahalanobis_score(stats[mode], spec, weights, x, bundles if mode == "subnet" else None, subnet_feature)

    clean_scores = {mode: scores(mode, images) for mode in modes}
    seen: dict[str, dict[str, float]] = {}
    counts: dict[str, dict[str, int]] = {}
    folds = {}
    adv_scores = {}
    for spec_a in attacks:
        if adversarial is not None and spec_a.kind in adversarial:
            x_adv, success = adversarial[spec_a.kind]
        else:
            x_adv, success = attack(spec_a, spec, weights, images, labels)
        kept = np.flatnonzero(success)
        if len(kept) < MIN_ADVERSARIAL:
            raise DetectionError(
                f"{spec_a.kind}: only {len(kept)} successful adversarial samples "
                f"(success rate {np.mean(success):.3f}); need {MIN_ADVERSARIAL}"
            )
        train_idx, test_idx = _split(len(kept), seed)
        folds[spec_a.kind] = (kept, train_idx, test_idx)
        counts[spec_a.kind] = {"attacked": int(len(images)), "successful": int(len(kept)),
                               "train_pairs": int(len(train_idx)), "test_pairs": int(len(test_idx))}
        seen[spec_a.kind] = {}
        adv_scores[spec_a.kind] = {}
        for mode in modes:
            clean = clean_scores[mode][kept]
            adv = scores(mode, x_adv[kept])
            adv_scores[spec_a.kind][mode] = adv
            det = train_detector(*_paired(clean, adv, train_idx))
            seen[spec_a.kind][mode] = detector_auroc(det, *_paired(clean, adv, test_idx))

    unknown: dict[str, dict[str, float]] = {}
    if "fgsm" in folds:
        kept, train_idx, _ = folds["fgsm"]
        detectors = {
            mode: train_detector(*_paired(clean_scores[mode][kept], adv_scores["fgsm"][mode], train_idx))
            for mode in modes
        }
        for kind, (kept_k, _, test_k) in folds.items():
            if kind == "fgsm":
                continue
            unknown[kind] = {
                mode: detector_auroc(detectors[mode], *_paired(clean_scores[mode][kept_k], adv_scores[kind][mode], test_k))
                for mode in modes
            }
    config = {"attacks": [a.to_dict() for a in attacks], "modes": list(modes), "seed": seed,
              "max_samples": max_samples, "layers": list(layers), "subnet_feature": subnet_feature}
    return DetectionReport(seen, unknown, counts, config)


METHOD_NAMES = {"full_model": "mahalanobis", "subnet": "subnet_mahalanobis"}


def table2_csv(report: DetectionReport, dataset: str = "shapes") -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["dataset", "method", "block", "attack", "auroc_percent"])
    for block, table in (("seen", report.seen), ("unknown", report.unknown)):
        for kind in sorted(table):
            for mode in sorted(table[kind]):
                writer.writerow([dataset, METHOD_NAMES[mode], block, kind, f"{100 * table[kind][mode]:.2f}"])
    return buf.getvalue()


def save_adversarial(path, spec: AttackSpec, x_adv: np.ndarray, success: np.ndarray, indices: np.ndarray) -> None:
    directory, payload = pack_arrays({"x_adv": x_adv}, "f4")
    header = {"attack": spec.to_dict(), "tensors": directory,
              "success": np.asarray(success, dtype=bool).astype(int).tolist(),
              "indices": np.asarray(indices).tolist()}
    write_container(path, ADV_MAGIC, header, payload)


def load_adversarial(path) -> tuple[AttackSpec, np.ndarray, np.ndarray, np.ndarray]:
    header, payload = read_container(path, ADV_MAGIC)
    arrays = unpack_arrays(header["tensors"], payload, path)
    spec = AttackSpec(**header["attack"])
    return (spec, arrays["x_adv"].astype(np.float64), np.asarray(header["success"], dtype=bool),
            np.asarray(header["indices"], dtype=np.int64))
