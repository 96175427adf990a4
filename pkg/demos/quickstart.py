"""Train a small CNN, carve out one class's subnetwork and look at what it keeps.

Run with ``python demos/quickstart.py``. Takes about a minute on one CPU.
"""

import numpy as np

from subnetscope import ExtractionConfig, ShapesConfig, build_reference_cnn, extract_subnetwork, generate_shapes, train_base
from subnetscope.explain import saliency, saliency_to_bbox
from subnetscope.model import accuracy, predict

CLASS_ID = 0


def main() -> None:
    shapes = ShapesConfig(train_per_class=200, val_per_class=40, test_per_class=40)
    splits = generate_shapes(shapes)
    spec = build_reference_cnn()
    weights, _ = train_base(spec, splits["train"], splits["val"], epochs=6)
    print(f"base model test accuracy: {accuracy(spec, weights, splits['test'].images, splits['test'].labels):.3f}")

    bundle = extract_subnetwork(spec, weights, splits["train"], splits["val"], CLASS_ID, ExtractionConfig())
    name = shapes.class_names[CLASS_ID]
    print(f"subnetwork for {name!r}: sparsity {bundle.sparsity:.3f}, met tau: {bundle.met_tau}")
    for layer, values in bundle.gates.layers.items():
        print(f"  {layer}: {int(np.sum(values > 0.01))}/{values.size} channels open")

    test = splits["test"]
    own = test.labels == CLASS_ID
    full = 1 / (1 + np.exp(-predict(spec, weights, test.images)[:, CLASS_ID]))
    sub = 1 / (1 + np.exp(-predict(spec, weights, test.images, bundle.gates)[:, CLASS_ID]))
    print(f"mean sigmoid of the {name!r} logit, own class vs rest")
    print(f"  full model: {full[own].mean():.3f} vs {full[~own].mean():.3f}")
    print(f"  subnetwork: {sub[own].mean():.3f} vs {sub[~own].mean():.3f}")

    idx = int(np.flatnonzero(own)[0])
    for gates, label in ((None, "full"), (bundle.gates, "subnet")):
        grid = saliency("gradient", spec, weights, test.images[idx], CLASS_ID, gates)
        print(f"{label} gradient box {saliency_to_bbox(grid.grid, 1.0)} vs ground truth {tuple(int(v) for v in test.bboxes[idx])}")


if __name__ == "__main__":
    main()
