"""Command-line driver: config handling, pipeline stages and run manifests.

Stages run in order ``train → extract → signatures → explain → attack →
detect → report``; each reads its inputs from the output directory and
records the files it writes, with their SHA-256, in ``manifest.json``.
"""

from __future__ import annotations

import argparse
import dataclasses
import hashlib
import json
import logging
import os
import sys
import time
import types
import typing
from collections.abc import Callable, Sequence
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import __version__
from .advdetect import (
    ATTACK_KINDS,
    MODES,
    SCORED_LAYERS,
    AttackSpec,
    DetectionReport,
    load_adversarial,
    run_detection_suite,
    save_adversarial,
    table2_csv,
)
from .data import CLASS_NAMES, LabeledSet, ShapesConfig, generate_shapes, load_dataset, load_idx, save_dataset
from .explain import DEFAULT_ALPHAS, METHODS, LocResult, SaliencyParams, explain_split, loc_json, table1_csv, to_csv, to_pgm, wsol_eval
from .extract import ExtractionConfig, SubnetworkBundle, extract_subnetwork
from .model import accuracy, build_reference_cnn, load_model, predict, save_model, train_base
from .signature import (
    adjusted_rand_index,
    agglomerate,
    build_signatures,
    clustering_json,
    contingency,
    distance_csv,
    family_distances,
    pairwise_distance,
    project_2d,
    scatter_svg,
)

logger = logging.getLogger("subnetscope")

EXIT_CONFIG = 1
EXIT_MISSING = 2
EXIT_STAGE = 3


class ConfigError(ValueError):
    pass


class MissingArtifactError(FileNotFoundError):
    pass


# ------------------------------------------------------------------ config


@dataclass(frozen=True)
class IdxPaths:
    train_images: str
    train_labels: str
    test_images: str
    test_labels: str
    val_fraction: float = 0.1


@dataclass(frozen=True)
class DatasetSection:
    source: str = "shapes"
    shapes: ShapesConfig = ShapesConfig()
    idx: IdxPaths | None = None

    def __post_init__(self):
        if self.source not in ("shapes", "idx"):
            raise ValueError(f"source must be 'shapes' or 'idx', got {self.source!r}")
        if self.source == "idx" and self.idx is None:
            raise ValueError("source 'idx' needs the idx paths section")


@dataclass(frozen=True)
class TrainSection:
    epochs: int = 10
    batch_size: int = 64
    lr: float = 2e-3
    seed: int = 0
    ovr_weight: float = 1.0

    def __post_init__(self):
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("epochs and batch_size must be >= 1")
        if self.lr <= 0:
            raise ValueError("lr must be > 0")


@dataclass(frozen=True)
class SignatureSection:
    metric: str = "cosine"
    n_clusters: int = 3

    def __post_init__(self):
        if self.metric not in ("cosine", "euclidean"):
            raise ValueError(f"unknown metric {self.metric!r}")
        if self.n_clusters < 1:
            raise ValueError("n_clusters must be >= 1")


@dataclass(frozen=True)
class ExplainSection:
    methods: tuple[str, ...] = METHODS
    modes: tuple[str, ...] = ("normal", "subnet")
    alphas: tuple[float, ...] = tuple(float(a) for a in DEFAULT_ALPHAS)
    heldout_split: str = "val"
    test_split: str = "test"
    max_images: int | None = 500
    examples: int = 2
    intgrad_steps: int = 32
    smoothgrad_samples: int = 25
    smoothgrad_sigma: float = 0.15
    batch_size: int = 128
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "methods", tuple(self.methods))
        object.__setattr__(self, "modes", tuple(self.modes))
        object.__setattr__(self, "alphas", tuple(float(a) for a in self.alphas))
        bad = [m for m in self.methods if m not in METHODS]
        if bad:
            raise ValueError(f"unknown methods {bad}")
        if any(m not in ("normal", "subnet") for m in self.modes):
            raise ValueError(f"modes must be drawn from ('normal', 'subnet'), got {list(self.modes)}")
        if not self.alphas or min(self.alphas) <= 0:
            raise ValueError("alphas must be nonempty and positive")
        if self.max_images is not None and self.max_images < 1:
            raise ValueError("max_images must be >= 1 or null")
        self.params().validate()

    def params(self) -> SaliencyParams:
        return SaliencyParams(self.intgrad_steps, self.smoothgrad_samples, self.smoothgrad_sigma, self.seed, self.batch_size)


def _default_attacks() -> tuple[AttackSpec, ...]:
    return tuple(AttackSpec.default(k) for k in ATTACK_KINDS)


@dataclass(frozen=True)
class DetectSection:
    attacks: tuple[AttackSpec, ...] = field(default_factory=_default_attacks)
    modes: tuple[str, ...] = MODES
    max_samples: int | None = 500
    subnet_feature: str = "per_class"
    layers: tuple[str, ...] = SCORED_LAYERS
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "attacks", tuple(self.attacks))
        object.__setattr__(self, "modes", tuple(self.modes))
        object.__setattr__(self, "layers", tuple(self.layers))
        if not self.layers:
            raise ValueError("detect.layers must name at least one layer")
        if any(m not in MODES for m in self.modes):
            raise ValueError(f"modes must be drawn from {MODES}, got {list(self.modes)}")
        if self.subnet_feature not in ("per_class", "predicted"):
            raise ValueError(f"subnet_feature must be 'per_class' or 'predicted', got {self.subnet_feature!r}")


@dataclass(frozen=True)
class RunConfig:
    dataset: DatasetSection = DatasetSection()
    train: TrainSection = TrainSection()
    extract: ExtractionConfig = ExtractionConfig()
    signatures: SignatureSection = SignatureSection()
    explain: ExplainSection = ExplainSection()
    detect: DetectSection = field(default_factory=DetectSection)
    out: str = "runs/default"
    workers: int = 1

    def __post_init__(self):
        if self.workers < 1:
            raise ValueError("workers must be >= 1")

    def to_dict(self) -> dict:
        return _jsonable(asdict(self))


def _jsonable(x):
    if isinstance(x, dict):
        return {k: _jsonable(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_jsonable(v) for v in x]
    return x


def _build(cls, data, path: str):
    """Instantiate dataclass ``cls`` from ``data``, rejecting unknown keys."""
    if not isinstance(data, dict):
        raise ConfigError(f"{path or 'config'}: expected an object, got {type(data).__name__}")
    hints = typing.get_type_hints(cls)
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(data) - names)
    if unknown:
        raise ConfigError(f"unknown config key {_join(path, unknown[0])!r}")
    kwargs = {}
    for name, value in data.items():
        kwargs[name] = _convert(hints[name], value, _join(path, name))
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as err:
        raise ConfigError(f"{path or 'config'}: {err}") from None


def _join(path: str, key: str) -> str:
    return f"{path}.{key}" if path else key


def _convert(hint, value, path: str):
    origin = typing.get_origin(hint)
    args = typing.get_args(hint)
    if origin in (typing.Union, types.UnionType):
        if value is None and type(None) in args:
            return None
        inner = [a for a in args if a is not type(None)]
        return _convert(inner[0], value, path)
    if dataclasses.is_dataclass(hint):
        return _build(hint, value, path)
    if origin is tuple:
        if not isinstance(value, (list, tuple)):
            raise ConfigError(f"{path}: expected a list")
        return tuple(_convert(args[0], v, f"{path}[{i}]") for i, v in enumerate(value))
    if hint is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{path}: expected a number, got {value!r}")
        return float(value)
    if hint is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{path}: expected an integer, got {value!r}")
        return value
    if hint is str:
        if not isinstance(value, str):
            raise ConfigError(f"{path}: expected a string, got {value!r}")
        return value
    return value


def parse_config(data: dict) -> RunConfig:
    return _build(RunConfig, data, "")


def _set_path(d: dict, key: str, value) -> None:
    parts = key.split(".")
    node = d
    for p in parts[:-1]:
        child = node.get(p)
        if child is None:
            child = node[p] = {}
        if not isinstance(child, dict):
            raise ConfigError(f"cannot set {key!r}: {p!r} is not a section")
        node = child
    node[parts[-1]] = value


def _parse_value(text: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def load_config(path: str | None = None, overrides: Sequence[str] = (), out: str | None = None,
                workers: int | None = None, seed: int | None = None) -> RunConfig:
    """Defaults, then the JSON file at ``path``, then ``key=value`` overrides."""
    data = RunConfig().to_dict()
    if path is not None:
        try:
            user = json.loads(Path(path).read_text())
        except FileNotFoundError:
            raise ConfigError(f"config file {path} not found") from None
        except json.JSONDecodeError as err:
            raise ConfigError(f"config file {path} is not valid JSON: {err}") from None
        if not isinstance(user, dict):
            raise ConfigError("config: top level must be an object")
        _merge(data, user, "")
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"override {item!r} must look like key=value")
        key, text = item.split("=", 1)
        _set_path(data, key.strip(), _parse_value(text))
    if out is not None:
        data["out"] = out
    if workers is not None:
        data["workers"] = workers
    if seed is not None:
        data["dataset"]["shapes"]["seed"] = seed
        for section in ("train", "extract", "explain", "detect"):
            data[section]["seed"] = seed
    return parse_config(data)


def _merge(base: dict, user: dict, path: str) -> None:
    for key, value in user.items():
        if isinstance(value, dict) and isinstance(base.get(key), dict):
            _merge(base[key], value, _join(path, key))
        else:
            base[key] = value


# --------------------------------------------------------------- artifacts


def sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


class Run:
    """Output directory plus the manifest that tracks what each stage wrote."""

    def __init__(self, config: RunConfig):
        self.config = config
        self.root = Path(config.out)
        self.root.mkdir(parents=True, exist_ok=True)
        self.manifest_path = self.root / "manifest.json"
        if self.manifest_path.exists():
            self.manifest = json.loads(self.manifest_path.read_text())
        else:
            self.manifest = {"stages": {}}
        self.manifest["config"] = config.to_dict()
        self.manifest["tool_version"] = __version__
        self._written: list[Path] = []

    def path(self, rel: str) -> Path:
        p = self.root / rel
        p.parent.mkdir(parents=True, exist_ok=True)
        return p

    def require(self, rel: str) -> Path:
        p = self.root / rel
        if not p.exists():
            raise MissingArtifactError(f"missing upstream artifact {p}")
        return p

    def write_text(self, rel: str, text: str) -> Path:
        p = self.path(rel)
        p.write_text(text)
        self._written.append(p)
        return p

    def record(self, rel: str) -> None:
        self._written.append(self.root / rel)

    def finish(self, stage: str, seconds: float) -> None:
        files = {str(p.relative_to(self.root)): sha256(p) for p in sorted(set(self._written))}
        self.manifest["stages"][stage] = {"files": files, "seconds": round(seconds, 3)}
        self.manifest_path.write_text(json.dumps(self.manifest, indent=1, sort_keys=True) + "\n")
        self._written = []


def _json(obj) -> str:
    return json.dumps(obj, indent=1, sort_keys=True) + "\n"


def _load_splits(run: Run) -> dict[str, LabeledSet]:
    _, splits = load_dataset(run.require("dataset.ssds"))
    return splits


def _load_bundles(run: Run, num_classes: int) -> dict[int, SubnetworkBundle]:
    return {c: SubnetworkBundle.from_json(run.require(f"bundles/class_{c}.json").read_text()) for c in range(num_classes)}


def _class_names(k: int) -> list[str]:
    return list(CLASS_NAMES) if k == len(CLASS_NAMES) else [str(c) for c in range(k)]


def _pool_map(fn: Callable, jobs: list, workers: int) -> list:
    if workers <= 1 or len(jobs) <= 1:
        return [fn(*job) for job in jobs]
    with ProcessPoolExecutor(max_workers=min(workers, len(jobs))) as pool:
        return list(pool.map(fn, *zip(*jobs)))


# ------------------------------------------------------------------ stages


def _idx_splits(paths: IdxPaths, seed: int) -> dict[str, LabeledSet]:
    train = load_idx(paths.train_images, paths.train_labels)
    test = load_idx(paths.test_images, paths.test_labels)
    order = np.random.default_rng(seed).permutation(len(train))
    n_val = max(1, int(round(paths.val_fraction * len(train))))
    return {"train": train.subset(np.sort(order[n_val:])), "val": train.subset(np.sort(order[:n_val])), "test": test}


def cmd_train(run: Run) -> None:
    cfg = run.config
    if cfg.dataset.source == "shapes":
        splits = generate_shapes(cfg.dataset.shapes)
        save_dataset(run.path("dataset.ssds"), cfg.dataset.shapes, splits)
    else:
        splits = _idx_splits(cfg.dataset.idx, cfg.train.seed)
        save_dataset(run.path("dataset.ssds"), cfg.dataset.shapes, splits)
    run.record("dataset.ssds")
    splits = _load_splits(run)
    train = splits["train"]
    k = int(train.labels.max()) + 1
    spec = build_reference_cnn(train.images.shape[1:], k)
    t = cfg.train
    weights, log = train_base(spec, train, splits["val"], t.epochs, t.batch_size, t.lr, t.seed, t.ovr_weight)
    save_model(run.path("model.ssnm"), spec, weights)
    run.record("model.ssnm")
    spec, weights = load_model(run.root / "model.ssnm")
    summary = {
        "initial_loss": log.initial_loss,
        "epochs": log.epochs,
        "test_accuracy": accuracy(spec, weights, splits["test"].images, splits["test"].labels),
    }
    run.write_text("train_log.json", _json(summary))


def _extract_job(spec, weights, train, val, c, config, teacher_train, teacher_val):
    return extract_subnetwork(spec, weights, train, val, c, config, teacher_train, teacher_val)


def cmd_extract(run: Run) -> None:
    spec, weights = load_model(run.require("model.ssnm"))
    splits = _load_splits(run)
    train, val = splits["train"], splits["val"]
    teacher_train = predict(spec, weights, train.images)
    teacher_val = predict(spec, weights, val.images)
    jobs = [(spec, weights, train, val, c, run.config.extract, teacher_train, teacher_val) for c in range(spec.num_classes)]
    bundles = _pool_map(_extract_job, jobs, run.config.workers)
    summary = {}
    for b in bundles:
        run.write_text(f"bundles/class_{b.class_id}.json", b.to_json() + "\n")
        summary[str(b.class_id)] = {"sparsity": b.sparsity, "met_tau": b.met_tau, "selected_epoch": b.selected_epoch}
    run.write_text("bundles/summary.json", _json(summary))


def cmd_signatures(run: Run) -> None:
    spec, _ = load_model(run.require("model.ssnm"))
    bundles = _load_bundles(run, spec.num_classes)
    names = _class_names(spec.num_classes)
    families = ShapesConfig().family_labels() if names == list(CLASS_NAMES) else names
    sig = build_signatures(bundles, names, families)
    cfg = run.config.signatures
    dist = pairwise_distance(sig, cfg.metric)
    dendrogram, assignments = agglomerate(dist, min(cfg.n_clusters, len(names)))
    coords = project_2d(sig)
    intra, inter = family_distances(dist, families)
    rows, cols, table = contingency(families, assignments.tolist())
    run.write_text("signatures/distance.csv", distance_csv(dist, names))
    run.write_text("signatures/clustering.json", clustering_json(dendrogram, assignments, sig) + "\n")
    run.write_text("signatures/projection.svg", scatter_svg(coords, sig))
    run.write_text("signatures/summary.json", _json({
        "metric": cfg.metric,
        "intra_family": intra,
        "inter_family": inter,
        "adjusted_rand_index": adjusted_rand_index(families, assignments.tolist()),
        "contingency": {"families": rows, "clusters": cols, "counts": table.tolist()},
        "coordinates": {n: [float(v) for v in xy] for n, xy in zip(names, coords)},
    }))


def _head(split: LabeledSet, n: int | None) -> LabeledSet:
    return split if n is None or n >= len(split) else split.subset(np.arange(n))


def _explain_job(method, mode, spec, weights, heldout, test, bundles, alphas, params):
    return wsol_eval(method, mode, spec, weights, heldout, test, bundles if mode == "subnet" else None, alphas, params)


def cmd_explain(run: Run) -> None:
    spec, weights = load_model(run.require("model.ssnm"))
    splits = _load_splits(run)
    bundles = _load_bundles(run, spec.num_classes) if "subnet" in run.config.explain.modes else None
    cfg = run.config.explain
    heldout = _head(splits[cfg.heldout_split], cfg.max_images)
    test = _head(splits[cfg.test_split], cfg.max_images)
    params = cfg.params()
    jobs = [(m, mode, spec, weights, heldout, test, bundles, cfg.alphas, params) for m in cfg.methods for mode in cfg.modes]
    results: list[LocResult] = _pool_map(_explain_job, jobs, run.config.workers)
    run.write_text("explain/loc.json", loc_json(results) + "\n")
    run.write_text("explain/table1.csv", table1_csv(results))
    if cfg.examples:
        picks = [int(np.flatnonzero(test.labels == c)[0]) for c in range(spec.num_classes) if np.any(test.labels == c)]
        picks = picks[: cfg.examples]
        pred = predict(spec, weights, test.images[picks]).argmax(axis=1)
        for method in cfg.methods:
            for mode in cfg.modes:
                maps = explain_split(method, mode, spec, weights, test.images[picks], pred, bundles, params)
                for i, grid in zip(picks, maps):
                    stem = f"explain/maps/{method}_{mode}_{int(test.ids[i])}"
                    run.write_text(stem + ".pgm", to_pgm(grid))
                    run.write_text(stem + ".csv", to_csv(grid))


def _detection_inputs(spec, weights, splits, cfg: DetectSection):
    test = splits["test"]
    correct = np.flatnonzero(predict(spec, weights, test.images).argmax(axis=1) == test.labels)
    if cfg.max_samples is not None and len(correct) > cfg.max_samples:
        correct = np.sort(np.random.default_rng(cfg.seed).choice(correct, cfg.max_samples, replace=False))
    return correct


def _attack_job(attack_spec, spec, weights, images, labels):
    from .advdetect import attack

    return attack(attack_spec, spec, weights, images, labels)


def cmd_attack(run: Run) -> None:
    spec, weights = load_model(run.require("model.ssnm"))
    splits = _load_splits(run)
    cfg = run.config.detect
    chosen = _detection_inputs(spec, weights, splits, cfg)
    images, labels = splits["test"].images[chosen], splits["test"].labels[chosen]
    jobs = [(a, spec, weights, images, labels) for a in cfg.attacks]
    outputs = _pool_map(_attack_job, jobs, run.config.workers)
    summary = {}
    for a, (x_adv, success) in zip(cfg.attacks, outputs):
        save_adversarial(run.path(f"adversarial/{a.kind}.ssad"), a, x_adv, success, chosen)
        run.record(f"adversarial/{a.kind}.ssad")
        summary[a.kind] = {"attacked": int(len(chosen)), "success_rate": float(np.mean(success)),
                           "linf_max": float(np.abs(x_adv - images).max()) if len(chosen) else 0.0}
    run.write_text("adversarial/summary.json", _json(summary))


def cmd_detect(run: Run) -> None:
    spec, weights = load_model(run.require("model.ssnm"))
    splits = _load_splits(run)
    cfg = run.config.detect
    bundles = _load_bundles(run, spec.num_classes) if "subnet" in cfg.modes else None
    chosen = _detection_inputs(spec, weights, splits, cfg)
    cached = {}
    for a in cfg.attacks:
        stored, x_adv, success, indices = load_adversarial(run.require(f"adversarial/{a.kind}.ssad"))
        if stored != a or not np.array_equal(indices, chosen):
            raise MissingArtifactError(f"adversarial cache for {a.kind} does not match the current config; rerun attack")
        cached[a.kind] = (x_adv, success)
    report = run_detection_suite(spec, weights, bundles, splits, cfg.attacks, cfg.modes, cfg.seed,
                                 cfg.max_samples, cached, cfg.subnet_feature, cfg.layers)
    run.write_text("detect/report.json", report.to_json() + "\n")
    run.write_text("detect/table2.csv", table2_csv(report))


def cmd_report(run: Run) -> None:
    train_log = json.loads(run.require("train_log.json").read_text())
    extract = json.loads(run.require("bundles/summary.json").read_text())
    signatures = json.loads(run.require("signatures/summary.json").read_text())
    loc = [LocResult(**r) for r in json.loads(run.require("explain/loc.json").read_text())]
    detect = DetectionReport(**json.loads(run.require("detect/report.json").read_text()))
    run.write_text("report/table1.csv", table1_csv(loc))
    run.write_text("report/table2.csv", table2_csv(detect))
    by_method = {}
    for r in loc:
        by_method.setdefault(r.method, {})[r.mode] = r.test_error
    improved = sorted(m for m, v in by_method.items() if "subnet" in v and "normal" in v and v["subnet"] <= v["normal"])
    modes = sorted({m for v in detect.seen.values() for m in v})
    summary = {
        "test_accuracy": train_log["test_accuracy"],
        "sparsity": {c: v["sparsity"] for c, v in extract.items()},
        "all_met_tau": all(v["met_tau"] for v in extract.values()),
        "intra_family_distance": signatures["intra_family"],
        "inter_family_distance": signatures["inter_family"],
        "wsol_error": by_method,
        "wsol_subnet_not_worse": improved,
        "detection_mean_auroc": {m: detect.mean_auroc(m) for m in modes},
        "unknown_attack_auroc": detect.unknown,
    }
    run.write_text("report/summary.json", _json(summary))


STAGES: dict[str, Callable[[Run], None]] = {
    "train": cmd_train,
    "extract": cmd_extract,
    "signatures": cmd_signatures,
    "explain": cmd_explain,
    "attack": cmd_attack,
    "detect": cmd_detect,
    "report": cmd_report,
}


# -------------------------------------------------------------------- main


def _configure_logging() -> None:
    level = os.environ.get("SUBNETSCOPE_LOG", "error").lower()
    levels = {"error": logging.ERROR, "info": logging.INFO, "debug": logging.DEBUG}
    if level not in levels:
        raise ConfigError(f"SUBNETSCOPE_LOG must be one of {sorted(levels)}, got {level!r}")
    logging.basicConfig(level=levels[level], format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="subnetscope", description="Class-specific subnetwork extraction pipeline.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in [*STAGES, "all"]:
        p = sub.add_parser(name, help="run every stage in order" if name == "all" else f"run the {name} stage")
        p.add_argument("--config", help="JSON config file")
        p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="override a config key (repeatable)")
        p.add_argument("--out", help="output directory")
        p.add_argument("--workers", type=int, help="worker processes for per-class and per-method jobs")
        p.add_argument("--seed", type=int, help="seed for every stage")
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        _configure_logging()
        config = load_config(args.config, args.set, args.out, args.workers, args.seed)
    except ConfigError as err:
        print(f"error: invalid config: {err}", file=sys.stderr)
        return EXIT_CONFIG
    run = Run(config)
    stages = list(STAGES) if args.command == "all" else [args.command]
    for stage in stages:
        start = time.perf_counter()
        try:
            STAGES[stage](run)
        except MissingArtifactError as err:
            print(f"error: {stage}: {err}", file=sys.stderr)
            return EXIT_MISSING
        except Exception as err:  # noqa: BLE001
            logger.debug("stage %s failed", stage, exc_info=True)
            print(f"error: {stage} failed: {type(err).__name__}: {err}", file=sys.stderr)
            return EXIT_STAGE
        run.finish(stage, time.perf_counter() - start)
        logger.info("stage %s done in %.1fs", stage, time.perf_counter() - start)
    return 0


if __name__ == "__main__":
    sys.exit(main())
