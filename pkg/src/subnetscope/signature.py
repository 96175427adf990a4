"""Gate vectors as class structure signatures: distances, clustering, 2-D projection."""

from __future__ import annotations

import csv
import io
import json
from collections.abc import Mapping, Sequence
from dataclasses import dataclass

import numpy as np


class ConvergenceError(RuntimeError):
    pass


@dataclass
class SignatureMatrix:
    rows: np.ndarray
    class_labels: list[str]
    family_labels: list[str]

    def __post_init__(self):
        self.rows = np.asarray(self.rows, dtype=np.float64)
        if self.rows.ndim != 2:
            raise ValueError("signature rows must form a 2-D matrix")
        if np.any(self.rows < 0):
            raise ValueError("signature entries must be nonnegative")


@dataclass
class Dendrogram:
    merges: list[tuple[int, int, float]]  # (cluster a, cluster b, linkage distance); new id = K + step
    leaf_order: list[int]

    def to_dict(self) -> dict:
        return {"merges": [[a, b, d] for a, b, d in self.merges], "leaf_order": self.leaf_order}


def build_signatures(bundles, class_labels: Sequence[str] | None = None,
                     family_labels: Sequence[str] | None = None) -> SignatureMatrix:
    """Row ``c`` is class ``c``'s (post-binarization) gate vector.

    ``bundles`` maps class id to bundle, or is a sequence indexed by class.
    """
    table = dict(bundles) if isinstance(bundles, Mapping) else {b.class_id: b for b in bundles}
    k = len(class_labels) if class_labels is not None else max(table) + 1
    missing = [c for c in range(k) if c not in table]
    if missing:
        raise KeyError(f"no bundle for classes {missing}")
    rows = [table[c].gates.flat() for c in range(k)]
    if len({r.size for r in rows}) != 1:
        raise ValueError(f"gate vectors have differing lengths {[r.size for r in rows]}")
    labels = list(class_labels) if class_labels is not None else [str(c) for c in range(k)]
    fams = list(family_labels) if family_labels is not None else labels
    return SignatureMatrix(np.stack(rows), labels, fams)


def _rows(sig) -> np.ndarray:
    return sig.rows if isinstance(sig, SignatureMatrix) else np.asarray(sig, dtype=np.float64)


def pairwise_distance(sig, metric: str = "cosine") -> np.ndarray:
    x = _rows(sig)
    if metric == "euclidean":
        sq = np.sum(x * x, axis=1)
        d = np.sqrt(np.maximum(sq[:, None] + sq[None, :] - 2 * x @ x.T, 0.0))
    elif metric == "cosine":
        norms = np.linalg.norm(x, axis=1)
        zero = np.flatnonzero(norms == 0)
        if zero.size:
            names = sig.class_labels if isinstance(sig, SignatureMatrix) else list(range(len(x)))
            raise ValueError(f"cosine distance undefined for all-zero signature of class {names[zero[0]]}")
        unit = x / norms[:, None]
        d = 1.0 - np.clip(unit @ unit.T, -1.0, 1.0)
    else:
        raise ValueError(f"unknown metric {metric!r}")
    d = 0.5 * (d + d.T)
    np.fill_diagonal(d, 0.0)
    return d


def agglomerate(dist: np.ndarray, n_clusters: int, linkage: str = "average") -> tuple[Dendrogram, np.ndarray]:
    """Average-linkage agglomeration; returns the full dendrogram and a flat cut.

    Ties between candidate pairs are broken by the smallest cluster ids.
    Flat labels are numbered in order of first appearance.
    """
    if linkage != "average":
        raise ValueError(f"unsupported linkage {linkage!r}")
    dist = np.asarray(dist, dtype=np.float64)
    k = dist.shape[0]
    if dist.shape != (k, k):
        raise ValueError("distance matrix must be square")
    if not 1 <= n_clusters <= k:
        raise ValueError(f"n_clusters must lie in [1, {k}], got {n_clusters}")
    members = {i: [i] for i in range(k)}
    d = {(i, j): dist[i, j] for i in range(k) for j in range(i + 1, k)}
    merges: list[tuple[int, int, float]] = []
    children: dict[int, tuple[int, int]] = {}
    flat = None
    next_id = k
    while len(members) > 1:
        if len(members) == n_clusters:
            flat = [list(v) for v in members.values()]
        (a, b), best = min(d.items(), key=lambda kv: (kv[1], kv[0]))
        na, nb = len(members[a]), len(members[b])
        merged = members.pop(a) + members.pop(b)
        for other in members:
            dao = d.pop((min(a, other), max(a, other)))
            dbo = d.pop((min(b, other), max(b, other)))
            d[(other, next_id)] = (na * dao + nb * dbo) / (na + nb)
        del d[(a, b)]
        members[next_id] = merged
        children[next_id] = (a, b)
        merges.append((a, b, float(best)))
        next_id += 1
    if flat is None:
        flat = [list(v) for v in members.values()]

    order: list[int] = []
    stack = [next_id - 1] if k > 1 else [0]
    while stack:
        node = stack.pop()
        if node < k:
            order.append(node)
        else:
            left, right = children[node]
            stack += [right, left]

    labels = np.empty(k, dtype=np.int64)
    for group in flat:
        for i in group:
            labels[i] = -1
    cluster_of = {i: gi for gi, group in enumerate(flat) for i in group}
    remap: dict[int, int] = {}
    for i in range(k):
        labels[i] = remap.setdefault(cluster_of[i], len(remap))
    return Dendrogram(merges, order), labels


def _top_eigvec(c: np.ndarray, rng: np.random.Generator, tol: float, max_iter: int,
                squarings: int = 4) -> tuple[float, np.ndarray]:
    """Power iteration on c^(2^squarings); convergence is judged by the residual on ``c``."""
    scale = max(float(np.abs(c).max()), 1e-300)
    p = c / scale
    for _ in range(squarings):
        p = p @ p
        peak = float(np.abs(p).max())
        if peak == 0.0:
            break
        p /= peak
    v = rng.standard_normal(c.shape[0])
    v /= np.linalg.norm(v)
    residual = np.inf
    for _ in range(max_iter):
        if np.linalg.norm(c @ v) <= tol * scale:
            return 0.0, v
        w = p @ v
        norm = np.linalg.norm(w)
        if norm == 0.0:
            return 0.0, v
        v = w / norm
        lam = float(v @ c @ v)
        residual = float(np.linalg.norm(c @ v - lam * v))
        if residual <= tol * scale:
            return lam, v
    raise ConvergenceError(f"power iteration did not converge in {max_iter} iterations (residual {residual:.3e})")


def principal_components(x, n: int = 2, tol: float = 1e-9, max_iter: int = 1000):
    """Top-``n`` (eigenvalue, direction) pairs of the row covariance by deflation."""
    x = _rows(x)
    centered = x - x.mean(axis=0)
    cov = centered.T @ centered / max(len(x) - 1, 1)
    rng = np.random.default_rng(0)
    values, vectors = [], []
    for _ in range(n):
        lam, v = _top_eigvec(cov, rng, tol, max_iter)
        if v[np.argmax(np.abs(v))] < 0:
            v = -v
        values.append(lam)
        vectors.append(v)
        cov = cov - lam * np.outer(v, v)
    return np.array(values), np.stack(vectors)


def project_2d(sig, tol: float = 1e-9, max_iter: int = 1000) -> np.ndarray:
    """K×2 coordinates on the top two principal directions."""
    x = _rows(sig)
    if len(x) < 2:
        raise ValueError("need at least two signatures to project")
    _, directions = principal_components(x, 2, tol, max_iter)
    return (x - x.mean(axis=0)) @ directions.T


def family_distances(dist: np.ndarray, families: Sequence[str]) -> tuple[float, float]:
    """Mean intra-family and mean inter-family distance (off-diagonal pairs)."""
    fam = np.asarray(families)
    same = fam[:, None] == fam[None, :]
    off = ~np.eye(len(fam), dtype=bool)
    return float(dist[same & off].mean()), float(dist[~same].mean())


def contingency(labels_true: Sequence, labels_pred: Sequence) -> tuple[list, list, np.ndarray]:
    rows, cols = sorted(set(labels_true)), sorted(set(labels_pred))
    table = np.zeros((len(rows), len(cols)), dtype=np.int64)
    for t, p in zip(labels_true, labels_pred):
        table[rows.index(t), cols.index(p)] += 1
    return rows, cols, table


def adjusted_rand_index(labels_true: Sequence, labels_pred: Sequence) -> float:
    _, _, table = contingency(labels_true, labels_pred)

    def pairs(x):
        return float(np.sum(x * (x - 1) / 2))

    n = table.sum()
    index = pairs(table)
    a, b = pairs(table.sum(axis=1)), pairs(table.sum(axis=0))
    expected = a * b / (n * (n - 1) / 2) if n > 1 else 0.0
    maximum = (a + b) / 2
    if maximum == expected:
        return 1.0
    return (index - expected) / (maximum - expected)


# ---------------------------------------------------------------- outputs

_FAMILY_COLORS = ("#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b")


def scatter_svg(coords: np.ndarray, sig: SignatureMatrix, size: int = 480) -> str:
    coords = np.asarray(coords, dtype=np.float64)
    lo, hi = coords.min(axis=0), coords.max(axis=0)
    span = np.where(hi - lo > 0, hi - lo, 1.0)
    pad = 40
    pts = pad + (coords - lo) / span * (size - 2 * pad)
    fams = list(dict.fromkeys(sig.family_labels))
    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{size}" height="{size}" viewBox="0 0 {size} {size}">',
        f'<rect width="{size}" height="{size}" fill="white"/>',
    ]
    for (x, y), name, fam in zip(pts, sig.class_labels, sig.family_labels):
        color = _FAMILY_COLORS[fams.index(fam) % len(_FAMILY_COLORS)]
        y = size - y
        parts.append(f'<circle cx="{x:.2f}" cy="{y:.2f}" r="6" fill="{color}"/>')
        parts.append(f'<text x="{x + 8:.2f}" y="{y + 4:.2f}" font-size="12" font-family="sans-serif">{name}</text>')
    for i, fam in enumerate(fams):
        color = _FAMILY_COLORS[i % len(_FAMILY_COLORS)]
        parts.append(f'<circle cx="14" cy="{14 + 16 * i}" r="5" fill="{color}"/>')
        parts.append(f'<text x="24" y="{18 + 16 * i}" font-size="11" font-family="sans-serif">{fam}</text>')
    parts.append("</svg>")
    return "\n".join(parts) + "\n"


def distance_csv(dist: np.ndarray, labels: Sequence[str]) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow([""] + list(labels))
    for name, row in zip(labels, dist):
        writer.writerow([name] + [repr(float(v)) for v in row])
    return buf.getvalue()


def clustering_json(dendrogram: Dendrogram, assignments: np.ndarray, sig: SignatureMatrix) -> str:
    return json.dumps(
        {
            "dendrogram": dendrogram.to_dict(),
            "assignments": {name: int(a) for name, a in zip(sig.class_labels, assignments)},
            "families": dict(zip(sig.class_labels, sig.family_labels)),
        },
        indent=1,
        sort_keys=True,
    )
