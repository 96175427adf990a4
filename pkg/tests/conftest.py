import numpy as np
import pytest

from subnetscope import tensor as T
from subnetscope.data import LabeledSet
from subnetscope.model import GateVector, LayerSpec, ModelSpec, init_weights


def numeric_grad(f, x: np.ndarray, h: float = 1e-5) -> np.ndarray:
    """Central differences of the scalar function ``f`` at ``x`` (modified in place, restored)."""
    g = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        i = it.multi_index
        old = x[i]
        x[i] = old + h
        up = f()
        x[i] = old - h
        down = f()
        x[i] = old
        g[i] = (up - down) / (2 * h)
    return g


def rel_error(a: np.ndarray, b: np.ndarray, floor: float = 1e-6) -> float:
    """Max coordinate-wise |a - b| / max(|a| + |b|, floor).

    The floor keeps gradients that are zero up to finite-difference noise
    from dominating the maximum.
    """
    return float(np.max(np.abs(a - b) / np.maximum(floor, np.abs(a) + np.abs(b))))


def tiny_cnn(num_classes: int = 3, size: int = 8, channels: int = 1) -> ModelSpec:
    """Two conv blocks and a gated hidden dense layer on ``size``×``size`` inputs."""
    return ModelSpec(
        (
            LayerSpec("conv", "conv0", channels, 3, kernel=3, stride=1, padding=1, gated=True),
            LayerSpec("relu", "relu0"),
            LayerSpec("maxpool", "pool0"),
            LayerSpec("conv", "conv1", 3, 4, kernel=3, stride=1, padding=1, gated=True),
            LayerSpec("relu", "relu1"),
            LayerSpec("maxpool", "pool1"),
            LayerSpec("flatten", "flatten"),
            LayerSpec("dense", "dense0", 4 * (size // 4) ** 2, 5, gated=True),
            LayerSpec("relu", "relu2"),
            LayerSpec("dense", "dense1", 5, num_classes),
        ),
        num_classes,
        (channels, size, size),
    )


def linear_model(w: np.ndarray, b: np.ndarray, shape=(1, 2, 2)):
    """Model computing x.ravel() @ w + b, through an identity gated hidden layer."""
    d = int(np.prod(shape))
    spec = ModelSpec(
        (
            LayerSpec("flatten", "flatten"),
            LayerSpec("dense", "dense0", d, d, gated=True),
            LayerSpec("dense", "dense1", d, w.shape[1]),
        ),
        w.shape[1],
        shape,
    )
    weights = {"dense0.weight": np.eye(d), "dense0.bias": np.zeros(d), "dense1.weight": w, "dense1.bias": b}
    return spec, weights


def toy_set(rng, n=60, size=8):
    """Bright left half for class 0, right half for class 1, lower half for class 2."""
    labels = np.arange(n) % 3
    images = rng.random((n, 1, size, size)) * 0.2
    half = size // 2
    for i, c in enumerate(labels):
        if c == 0:
            images[i, 0, :, :half] += 0.8
        elif c == 1:
            images[i, 0, :, half:] += 0.8
        else:
            images[i, 0, half:, :] += 0.8
    boxes = np.array([[(0, 0, size - 1, half - 1), (0, half, size - 1, size - 1), (half, 0, size - 1, size - 1)][c] for c in labels])
    return LabeledSet(images, labels, bboxes=boxes)


@pytest.fixture(scope="session")
def toy_trained():
    """Tiny CNN trained on the toy problem, with train/val/test splits."""
    r = np.random.default_rng(99)
    spec = tiny_cnn()
    train, val, test = toy_set(r, 90), toy_set(r, 30), toy_set(r, 30)
    from subnetscope.model import train_base

    weights, _ = train_base(spec, train, val, epochs=10, batch_size=16, lr=1e-2, seed=1)
    return spec, weights, {"train": train, "val": val, "test": test}


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def small_model():
    spec = tiny_cnn()
    return spec, init_weights(spec, seed=3)


@pytest.fixture
def random_gates():
    def make(spec, seed=0, zero_fraction=0.3):
        r = np.random.default_rng(seed)
        layers = {}
        for name, n in spec.gate_sizes.items():
            g = r.uniform(0.2, 1.5, n)
            g[r.random(n) < zero_fraction] = 0.0
            layers[name] = g
        return GateVector(layers)

    return make


__all__ = ["linear_model", "numeric_grad", "rel_error", "tiny_cnn", "toy_set", "T"]


_CRITERIA: dict[int, tuple[bool, str]] = {}


@pytest.fixture
def record_criterion():
    """Store a pass/fail line for the acceptance summary."""

    def record(number: int, ok: bool, detail: str) -> bool:
        _CRITERIA[number] = (bool(ok), detail)
        return bool(ok)

    return record


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_CRITERIA):
        ok, detail = _CRITERIA[number]
        terminalreporter.write_line(f"criterion {number:2d}: {'PASS' if ok else 'FAIL'}  {detail}")
