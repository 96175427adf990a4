import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import linalg

from conftest import linear_model, toy_set
from subnetscope.advdetect import (
    AttackSpec,
    DetectionError,
    LayerStats,
    MahalanobisStats,
    attack,
    auroc,
    bim,
    deepfool,
    detector_auroc,
    fgsm,
    fit_from_features,
    fit_mahalanobis,
    load_adversarial,
    mahalanobis_score,
    regularizer,
    run_detection_suite,
    save_adversarial,
    score_from_features,
    table2_csv,
    train_detector,
)
from subnetscope.data import LabeledSet
from subnetscope.extract import SubnetworkBundle
from subnetscope.model import GateVector, predict

TINY_LAYERS = ("pool0", "pool1", "dense0")


def _pair_count_auroc(pos, neg):
    """O(n·m) oracle: ordered pairs score 1, ties 1/2."""
    total = 0.0
    for p in pos:
        for q in neg:
            total += 1.0 if p > q else 0.5 if p == q else 0.0
    return total / (len(pos) * len(neg))


def _direct_score(means, cov, delta, f):
    prec = np.linalg.inv(cov + delta * np.eye(len(cov)))
    return max(-(f - m) @ prec @ (f - m) for m in means)


def _identity_bundles(spec):
    return {c: SubnetworkBundle(c, GateVector.ones(spec), 1.0, 0) for c in range(spec.num_classes)}


def _sign_model():
    """Two-class linear model on 1×1×2 inputs; CE gradient for class 0 has signs (+, -)."""
    return linear_model(np.array([[0.0, 0.3], [0.0, -0.2]]), np.zeros(2), (1, 1, 2))


class TestAttacks:
    def test_fgsm_sign_rule(self):
        spec, w = _sign_model()
        x = np.full((1, 1, 1, 2), 0.5)
        np.testing.assert_allclose(fgsm(spec, w, x, np.array([0]), 0.1)[0, 0, 0], [0.6, 0.4], rtol=1e-15)

    def test_bim_total_step(self):
        spec, w = _sign_model()
        x = np.full((1, 1, 1, 2), 0.5)
        out = bim(spec, w, x, np.array([0]), 0.1, 2)
        np.testing.assert_allclose(out[0, 0, 0] - 0.5, [0.1, -0.1], atol=1e-15)

    def test_deepfool_linear_closed_form(self, rng):
        w = rng.normal(size=(4, 2))
        x = np.full((1, 1, 2, 2), 0.5)
        plain = x.ravel() @ w
        b = np.array([0.2 - plain[0] + plain[1], 0.0])
        spec, weights = linear_model(w, b)
        normal = w[:, 1] - w[:, 0]
        distance = 0.2 / np.linalg.norm(normal)
        adv, success = attack(AttackSpec("deepfool", steps=50, overshoot=0.02), spec, weights, x, np.array([0]))
        r = (adv - x).ravel()
        assert np.abs(r).max() < 0.5
        np.testing.assert_allclose(np.linalg.norm(r), 1.02 * distance, atol=1.02e-4 + 1e-12)
        np.testing.assert_allclose(r / np.linalg.norm(r), normal / np.linalg.norm(normal), atol=1e-9)
        assert success[0]

    def test_deepfool_picks_nearest_boundary(self, rng):
        for _ in range(5):
            w = rng.normal(size=(4, 3))
            x = np.full((1, 1, 2, 2), 0.5)
            plain = x.ravel() @ w
            b = rng.uniform(0.05, 0.2, 3) - plain
            b[0] += 0.3
            spec, weights = linear_model(w, b)
            z = predict(spec, weights, x)[0]
            dist = [abs(z[0] - z[k]) / np.linalg.norm(w[:, k] - w[:, 0]) for k in (1, 2)]
            nearest = 1 + int(np.argmin(dist))
            adv = deepfool(spec, weights, x, np.array([0]), steps=50, clip=(-10.0, 10.0))
            assert predict(spec, weights, adv)[0].argmax() == nearest

    @pytest.mark.parametrize("kind", ["fgsm", "bim", "deepfool"])
    def test_outputs_valid(self, small_model, rng, kind):
        spec, w = small_model
        x = rng.random((3, 1, 8, 8))
        y = np.array([0, 1, 2])
        a = AttackSpec.default(kind)
        adv, success = attack(a, spec, w, x, y)
        assert adv.min() >= 0.0 and adv.max() <= 1.0
        if kind != "deepfool":
            assert np.abs(adv - x).max() <= a.eps + 1e-9
        np.testing.assert_array_equal(success, predict(spec, w, adv).argmax(axis=1) != y)

    def test_inputs_outside_clip_range(self, small_model):
        spec, w = small_model
        with pytest.raises(ValueError, match="clip"):
            attack(AttackSpec.default("fgsm"), spec, w, np.full((1, 1, 8, 8), 1.5), np.array([0]))

    def test_spec_validation(self):
        assert AttackSpec.default("bim").steps == 10
        assert AttackSpec.default("deepfool").steps == 50
        for bad in ({"kind": "cw"}, {"kind": "fgsm", "eps": 0}, {"kind": "bim", "steps": 0},
                    {"kind": "deepfool", "overshoot": -1}, {"kind": "fgsm", "clip": (1, 0)}):
            with pytest.raises(ValueError):
                AttackSpec(**bad)

    def test_cache_round_trip(self, tmp_path, rng):
        x = rng.random((3, 1, 4, 4))
        save_adversarial(tmp_path / "a.ssad", AttackSpec.default("bim"), x, np.array([True, False, True]), np.array([4, 7, 9]))
        spec, x2, success, idx = load_adversarial(tmp_path / "a.ssad")
        assert spec == AttackSpec.default("bim")
        np.testing.assert_allclose(x2, x, atol=1e-7)
        assert success.tolist() == [True, False, True] and idx.tolist() == [4, 7, 9]


class TestMahalanobis:
    def test_hand_dataset(self):
        stats = fit_from_features([{"l": np.array([[0.0, 0.0], [2.0, 0.0]])}, {"l": np.array([[0.0, 2.0], [2.0, 2.0]])}])
        layer = stats.layers["l"]
        np.testing.assert_array_equal(layer.means, [[1.0, 0.0], [1.0, 2.0]])
        np.testing.assert_array_equal(layer.cov, np.diag([1.0, 0.0]))
        assert layer.delta == pytest.approx(5e-7)
        assert stats.counts.tolist() == [2, 2] and stats.total == 4

    def test_single_sample_classes(self):
        stats = fit_from_features([{"l": np.array([[0.0, 1.0]])}, {"l": np.array([[3.0, 1.0]])}])
        assert not stats.layers["l"].cov.any()
        assert stats.layers["l"].delta == 1e-6
        assert np.isfinite(score_from_features(stats.layers["l"], np.zeros((1, 2)))).all()

    def test_regularizer(self):
        assert regularizer(np.diag([2.0, 4.0])) == pytest.approx(3e-6)
        assert regularizer(np.zeros((3, 3))) == 1e-6

    def test_score_example(self):
        layer = LayerStats(np.array([[1.0, 0.0], [3.0, 4.0]]), np.eye(2), 0.0)
        assert score_from_features(layer, np.zeros((1, 2)))[0] == pytest.approx(-1.0, abs=1e-15)
        assert score_from_features(layer, np.array([[3.0, 4.0]]))[0] == 0.0

    def test_covariance_scaling(self, rng):
        means = rng.normal(size=(3, 4))
        a = rng.normal(size=(4, 4))
        cov = a @ a.T + np.eye(4)
        f = rng.normal(size=(10, 4))
        base = LayerStats(means, cov, 0.0)
        scaled = LayerStats(means, 4 * cov, 0.0)
        np.testing.assert_allclose(score_from_features(scaled, f), score_from_features(base, f) / 4, rtol=1e-12)

    @settings(max_examples=40, deadline=None)
    @given(st.integers(1, 5), st.integers(2, 4), st.integers(0, 2**16))
    def test_matches_dense_solve_oracle(self, d, k, seed):
        r = np.random.default_rng(seed)
        feats = [{"l": r.normal(size=(r.integers(2, 6), d))} for _ in range(k)]
        layer = fit_from_features(feats).layers["l"]
        x = r.normal(size=(6, d))
        ours = score_from_features(layer, x)
        oracle = [_direct_score(layer.means, layer.cov, layer.delta, f) for f in x]
        np.testing.assert_allclose(ours, oracle, rtol=1e-9, atol=1e-9)

    @settings(max_examples=30, deadline=None)
    @given(st.integers(0, 2**16), st.floats(0.01, 100.0))
    def test_argmax_class_scale_invariant(self, seed, scale):
        r = np.random.default_rng(seed)
        means = r.normal(size=(4, 3))
        a = r.normal(size=(3, 3))
        cov = a @ a.T + 0.1 * np.eye(3)
        f = r.normal(size=3)

        def best(c):
            prec = np.linalg.inv(c)
            return int(np.argmax([-(f - m) @ prec @ (f - m) for m in means]))

        assert best(cov) == best(scale * cov)

    def test_failed_factorization_names_layer(self):
        with pytest.raises(linalg.LinAlgError, match="'bad'.*delta"):
            from subnetscope.advdetect import _factorize

            _factorize(-np.eye(2), 1e-6, "bad")

    def test_identity_bundles_match_full_model(self, toy_trained):
        spec, w, data = toy_trained
        bundles = _identity_bundles(spec)
        full = fit_mahalanobis(spec, w, data["train"], None, TINY_LAYERS)
        sub = fit_mahalanobis(spec, w, data["train"], bundles, TINY_LAYERS)
        assert sub.mode == "subnet" and full.mode == "full_model"
        for name in TINY_LAYERS:
            np.testing.assert_array_equal(sub.layers[name].means, full.layers[name].means)
            np.testing.assert_array_equal(sub.layers[name].cov, full.layers[name].cov)
        x = data["test"].images
        ref = mahalanobis_score(full, spec, w, x)
        assert ref.shape == (len(x), 3)
        for feature in ("per_class", "predicted"):
            np.testing.assert_array_equal(mahalanobis_score(sub, spec, w, x, bundles, feature), ref)

    def test_mode_mismatch(self, toy_trained):
        spec, w, data = toy_trained
        full = fit_mahalanobis(spec, w, data["train"], None, TINY_LAYERS)
        with pytest.raises(ValueError, match="mode"):
            mahalanobis_score(full, spec, w, data["test"].images, _identity_bundles(spec))

    def test_too_few_samples(self, toy_trained):
        spec, w, data = toy_trained
        few = toy_set(np.random.default_rng(0), 4)
        with pytest.raises(ValueError, match="at least 2"):
            fit_mahalanobis(spec, w, few, None, TINY_LAYERS)

    def test_missing_bundle(self, toy_trained):
        spec, w, data = toy_trained
        with pytest.raises(KeyError):
            fit_mahalanobis(spec, w, data["train"], {0: _identity_bundles(spec)[0]}, TINY_LAYERS)

    def test_stats_dict(self):
        stats = fit_from_features([{"l": np.ones((2, 2))}, {"l": np.zeros((2, 2))}])
        assert isinstance(stats, MahalanobisStats)
        assert stats.to_dict()["layers"]["l"]["delta"] == 1e-6


class TestAuroc:
    def test_examples(self):
        assert auroc([0.9, 0.8], [0.2, 0.1]) == 1.0
        assert auroc([0.9, 0.4], [0.6, 0.1]) == 0.75
        assert auroc([0.3, 0.5, 0.5], [0.5, 0.3, 0.5]) == 0.5

    def test_empty(self):
        with pytest.raises(ValueError):
            auroc([], [1.0])

    @settings(max_examples=60, deadline=None)
    @given(st.lists(st.integers(0, 20), min_size=1, max_size=200), st.lists(st.integers(0, 20), min_size=1, max_size=200))
    def test_matches_pair_counting(self, pos, neg):
        assert auroc(np.array(pos) / 7, np.array(neg) / 7) == _pair_count_auroc(np.array(pos) / 7, np.array(neg) / 7)


class TestDetector:
    def test_separated_scores(self):
        clean = np.linspace(1.0, 2.0, 20)
        adv = np.linspace(-2.0, -1.0, 20)
        x = np.concatenate([clean, adv])[:, None]
        y = np.concatenate([np.zeros(20), np.ones(20)])
        assert detector_auroc(train_detector(x, y), x, y) == 1.0

    def test_shuffled_labels_near_chance(self):
        values = []
        for seed in range(10):
            r = np.random.default_rng(seed)
            x = r.normal(size=(200, 3))
            y = r.permutation(np.repeat([0.0, 1.0], 100))
            det = train_detector(x[:100], y[:100])
            values.append(detector_auroc(det, x[100:], y[100:]))
        assert abs(np.mean(values) - 0.5) <= 0.1

    def test_redundant_feature(self, rng):
        x = rng.normal(size=(80, 1))
        y = (x[:, 0] + rng.normal(scale=1.0, size=80) < 0).astype(float)
        single = train_detector(x, y)
        double = train_detector(np.hstack([x, x]), y)
        assert abs(detector_auroc(single, x, y) - detector_auroc(double, np.hstack([x, x]), y)) <= 1e-6

    def test_single_label_rejected(self):
        with pytest.raises(ValueError, match="both"):
            train_detector(np.ones((4, 2)), np.zeros(4))

    def test_deterministic(self, rng):
        x = rng.normal(size=(30, 2))
        y = (x[:, 0] > 0).astype(float)
        a, b = train_detector(x, y), train_detector(x, y)
        np.testing.assert_array_equal(a.w, b.w)
        assert a.b == b.b


def _blob_set(rng, n):
    """Three Gaussian blobs in [0.2, 0.8]^4, one per class."""
    centers = np.array([[0.35, 0.35, 0.65, 0.65], [0.65, 0.35, 0.35, 0.65], [0.5, 0.65, 0.5, 0.35]])
    labels = np.arange(n) % 3
    x = np.clip(centers[labels] + rng.normal(scale=0.05, size=(n, 4)), 0.2, 0.8)
    return LabeledSet(x.reshape(n, 1, 2, 2), labels)


@pytest.fixture(scope="module")
def blob_problem():
    rng = np.random.default_rng(8)
    centers = np.array([[0.35, 0.35, 0.65, 0.65], [0.65, 0.35, 0.35, 0.65], [0.5, 0.65, 0.5, 0.35]])
    w = 10 * (centers - centers.mean(axis=0)).T
    spec, weights = linear_model(w, -0.5 * np.sum((w * centers.T), axis=0))
    return spec, weights, {"train": _blob_set(rng, 90), "test": _blob_set(rng, 240)}


class TestDetectionSuite:
    def test_identity_bundles_give_equal_modes(self, blob_problem):
        spec, w, data = blob_problem
        assert np.mean(predict(spec, w, data["test"].images).argmax(axis=1) == data["test"].labels) > 0.9
        attacks = [AttackSpec("fgsm", eps=0.2), AttackSpec("bim", eps=0.2, steps=5)]
        report = run_detection_suite(spec, w, _identity_bundles(spec), data, attacks, max_samples=200,
                                     layers=("flatten", "dense0"))
        for kind in ("fgsm", "bim"):
            assert report.seen[kind]["subnet"] == report.seen[kind]["full_model"]
            assert 0.0 <= report.seen[kind]["subnet"] <= 1.0
            c = report.counts[kind]
            assert c["train_pairs"] + c["test_pairs"] == c["successful"] >= 50
            assert c["attacked"] == 200
        assert set(report.unknown) == {"bim"}
        assert report.config["layers"] == ["flatten", "dense0"]
        lines = table2_csv(report).splitlines()
        assert lines[0] == "dataset,method,block,attack,auroc_percent"
        assert len(lines) == 1 + 4 + 2

    def test_too_few_adversarial(self, blob_problem):
        spec, w, data = blob_problem
        with pytest.raises(DetectionError, match="success rate"):
            run_detection_suite(spec, w, None, data, [AttackSpec("fgsm", eps=1e-4)], modes=("full_model",),
                                layers=("dense0",))
