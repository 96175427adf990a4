"""Class-specific gate learning under a sigmoid-BCE distillation objective."""

from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field

import numpy as np

from . import tensor as T
from .data import balanced_epoch
from .model import GateVector, ModelSpec, forward, predict

logger = logging.getLogger(__name__)

PROB_CLAMP = 1e-7
L1_REDUCTIONS = ("mean", "sum")


@dataclass(frozen=True)
class ExtractionConfig:
    gamma: float = 0.5
    epochs: int = 5
    tau: float = 0.5
    lr: float = 0.1
    batch_size: int = 64
    eps: float = 0.01
    seed: int = 0
    max_steps: int | None = None  # cap on total Adam steps; None means no cap
    l1_reduction: str = "mean"

    def __post_init__(self):
        if self.gamma < 0:
            raise ValueError("gamma must be >= 0")
        if not 0 < self.tau <= 1:
            raise ValueError("tau must lie in (0, 1]")
        if self.eps <= 0:
            raise ValueError("eps must be > 0")
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.l1_reduction not in L1_REDUCTIONS:
            raise ValueError(f"l1_reduction must be one of {L1_REDUCTIONS}")


@dataclass
class SubnetworkBundle:
    class_id: int
    gates: GateVector
    sparsity: float
    selected_epoch: int
    history: list[dict] = field(default_factory=list)
    met_tau: bool = False
    config: dict = field(default_factory=dict)

    def to_json(self) -> str:
        return json.dumps(
            {
                "class_id": self.class_id,
                "config": self.config,
                "gates": self.gates.to_dict(),
                "sparsity": self.sparsity,
                "selected_epoch": self.selected_epoch,
                "history": self.history,
                "met_tau": self.met_tau,
            },
            indent=1,
            sort_keys=True,
        )

    @classmethod
    def from_json(cls, text: str) -> SubnetworkBundle:
        d = json.loads(text)
        return cls(
            class_id=int(d["class_id"]),
            gates=GateVector({k: np.asarray(v) for k, v in d["gates"].items()}),
            sparsity=float(d["sparsity"]),
            selected_epoch=int(d["selected_epoch"]),
            history=list(d["history"]),
            met_tau=bool(d["met_tau"]),
            config=dict(d["config"]),
        )


def class_seed(seed: int, c: int) -> int:
    """Per-class seed that does not depend on the order classes are processed."""
    return int(np.random.SeedSequence([seed, c]).generate_state(1)[0])


def bce(a, b):
    """Binary cross-entropy ``-a log b - (1-a) log(1-b)`` with clamped probabilities."""
    a = np.clip(np.asarray(a, dtype=np.float64), PROB_CLAMP, 1 - PROB_CLAMP)
    b = np.clip(np.asarray(b, dtype=np.float64), PROB_CLAMP, 1 - PROB_CLAMP)
    return -a * np.log(b) - (1 - a) * np.log(1 - b)


def _values(x) -> np.ndarray:
    return x.data if isinstance(x, T.Tensor) else np.asarray(x, dtype=np.float64)


def distill_loss(teacher_logit, student_logit, gates, gamma: float, l1_reduction: str = "mean") -> T.Tensor:
    """Mean BCE(σ(teacher), σ(student)) + gamma · mean |gate| (or sum |gate|).

    ``teacher_logit`` is treated as a constant; ``student_logit`` and the
    gate arrays may be tape tensors.  ``gates`` is a GateVector or a mapping
    of per-layer gate arrays/tensors.
    """
    table = gates.layers if isinstance(gates, GateVector) else gates
    a = np.clip(T._sigmoid(_values(teacher_logit)), PROB_CLAMP, 1 - PROB_CLAMP)
    b = T.clip(T.sigmoid(student_logit), PROB_CLAMP, 1 - PROB_CLAMP)
    per_sample = T.add(T.mul(-a, T.log(b)), T.mul(-(1 - a), T.log(T.sub(1.0, b))))
    fit = T.mean(per_sample)
    # on the feasible set (gates >= 0) |λ| = λ, whose derivative stays 1 at zero
    sums = [T.sum(g) if np.all(_values(g) >= 0) else T.sum(T.absolute(g)) for g in table.values()]
    l1 = sums[0]
    for t in sums[1:]:
        l1 = T.add(l1, t)
    if l1_reduction == "mean":
        l1 = T.scale(l1, 1.0 / float(np.sum([g.shape[0] for g in table.values()])))
    return T.add(fit, T.scale(l1, gamma))


def sparsity_of(gates: GateVector, eps: float) -> float:
    flat = gates.flat()
    return float(np.mean(flat > eps))


def binarize(gates: GateVector, eps: float) -> GateVector:
    """Zero every gate at or below ``eps``; larger gates keep their magnitude."""
    return GateVector({k: np.where(v > eps, v, 0.0) for k, v in gates.layers.items()})


def _eval_loss(spec, weights, images, teacher, c, gates, config) -> float:
    student = predict(spec, weights, images, gates)[:, c]
    return float(distill_loss(teacher, student, gates, config.gamma, config.l1_reduction).data)


def extract_subnetwork(
    spec: ModelSpec,
    weights,
    train,
    val,
    c: int,
    config: ExtractionConfig = ExtractionConfig(),
    teacher_train: np.ndarray | None = None,
    teacher_val: np.ndarray | None = None,
) -> SubnetworkBundle:
    """Learn gates for class ``c`` with the base weights frozen.

    ``train``/``val`` carry ``images`` and ``labels``.  Teacher logits (full
    model, all classes) may be passed in to avoid recomputation.
    """
    seed = class_seed(config.seed, c)
    if teacher_train is None:
        teacher_train = predict(spec, weights, train.images)
    if teacher_val is None:
        teacher_val = predict(spec, weights, val.images)
    val_idx, _ = balanced_epoch(val.labels, c, seed, epoch=0)
    val_images, val_teacher = val.images[val_idx], teacher_val[val_idx, c]

    params = {name: T.Tensor(np.ones(n), requires_grad=True) for name, n in spec.gate_sizes.items()}
    state = T.AdamState()

    def snapshot() -> GateVector:
        return GateVector({k: p.data.copy() for k, p in params.items()})

    initial = snapshot()
    history = [{
        "epoch": 0,
        "val_loss": _eval_loss(spec, weights, val_images, val_teacher, c, initial, config),
        "sparsity": sparsity_of(initial, config.eps),
    }]
    snapshots = [initial]
    steps = 0
    for epoch in range(1, config.epochs + 1):
        idx, _ = balanced_epoch(train.labels, c, seed, epoch)
        train_loss, seen = 0.0, 0
        for start in range(0, len(idx), config.batch_size):
            if config.max_steps is not None and steps >= config.max_steps:
                break
            batch = idx[start:start + config.batch_size]
            with T.Tape():
                student = T.pick(forward(spec, weights, train.images[batch], params), np.full(len(batch), c))
                loss = distill_loss(teacher_train[batch, c], student, params, config.gamma, config.l1_reduction)
                grads = T.backward(loss)
            T.adam_step(params, grads, state, config.lr)
            for p in params.values():
                np.maximum(p.data, 0.0, out=p.data)
            steps += 1
            train_loss += float(loss.data) * len(batch)
            seen += len(batch)
        gates = snapshot()
        record = {
            "epoch": epoch,
            "train_loss": train_loss / seen if seen else None,
            "val_loss": _eval_loss(spec, weights, val_images, val_teacher, c, gates, config),
            "sparsity": sparsity_of(gates, config.eps),
        }
        logger.info("class %d epoch %d: %s", c, epoch, record)
        history.append(record)
        snapshots.append(gates)

    trained = history[1:]
    feasible = [h for h in trained if h["sparsity"] <= config.tau]
    if feasible:
        chosen = min(feasible, key=lambda h: (h["val_loss"], h["epoch"]))
        met = True
    else:
        chosen = min(trained, key=lambda h: (h["sparsity"], h["val_loss"], h["epoch"]))
        met = False
    gates = binarize(snapshots[chosen["epoch"]], config.eps)
    return SubnetworkBundle(
        class_id=int(c),
        gates=gates,
        sparsity=sparsity_of(gates, config.eps),
        selected_epoch=chosen["epoch"],
        history=history,
        met_tau=met,
        config=asdict(config),
    )


def subnet_forward(spec: ModelSpec, weights, bundle: SubnetworkBundle, x):
    """Logits of the class-specific subnetwork (full weights, bundle gates)."""
    return forward(spec, weights, x, bundle.gates)
