import numpy as np
import pytest
import torch

from manifold_attack.attack import FREnsemble
from manifold_attack.au_space import AUSpaceConfig, AUVector, preset
from manifold_attack.data_io import synthesize_dataset
from manifold_attack.errors import EmptyInput, OutOfRange, TooFewPairs
from manifold_attack.evaluation import (
    EvalReport,
    attack_success_rate,
    calibrate_far_threshold,
    default_traversal_path,
    evaluate,
    impostor_pairs_from_dataset,
    manifold_traverse,
    mean_confidence,
    pairwise_cosines,
    save_image_grid,
    threshold_from_similarities,
)
from manifold_attack.networks import EmbeddingModel, GeneratorModel


def brute_force_threshold(sims, far):
    """Independent scan: try every observed value ascending, first FAR-ok wins."""
    s = np.asarray(sims, dtype=np.float64)
    for t in sorted(set(s.tolist())):
        if np.mean(s >= t) <= far:
            return t
    return float(np.nextafter(s.max(), np.inf))


class StubEmbed:
    """Maps an image's top-left pixel value (an angle) to a unit 2-vector."""

    def embed(self, x):
        theta = x[:, 0, 0, 0].double()
        return torch.stack([torch.cos(theta), torch.sin(theta)], dim=1).float()


def angle_image(theta, size=8):
    im = np.zeros((3, size, size), dtype=np.float32)
    im[0, 0, 0] = theta
    return im


class TestThresholdRule:
    def test_grid_of_hundred_similarities(self):
        sims = [i / 100.0 for i in range(100)]
        assert threshold_from_similarities(sims, 0.01) == pytest.approx(0.99)

    def test_all_identical_values_fall_back_above_max(self):
        sims = [-1.0] * 100
        t = threshold_from_similarities(sims, 0.01)
        assert t > -1.0
        assert t == np.nextafter(-1.0, np.inf)
        assert np.mean(np.asarray(sims) >= t) == 0.0

    def test_ties_resolve_upward(self):
        sims = [0.5] * 50 + [0.6] * 50
        assert threshold_from_similarities(sims, 0.5) == pytest.approx(0.6)
        t = threshold_from_similarities(sims, 0.49)
        assert t == np.nextafter(0.6, np.inf)

    def test_matches_brute_force_on_randomized_sets(self):
        rng = np.random.default_rng(11)
        for trial in range(5):
            sims = rng.uniform(-1, 1, size=rng.integers(100, 400))
            if trial % 2:
                sims = np.round(sims, 2)  # force ties
            far = float(rng.uniform(0.005, 0.2))
            assert threshold_from_similarities(sims, far) == brute_force_threshold(sims, far)

    def test_recomputed_far_never_exceeds_target(self):
        rng = np.random.default_rng(5)
        for _ in range(20):
            sims = rng.normal(0, 0.4, size=500).clip(-1, 1)
            far = float(rng.uniform(0.005, 0.1))
            t = threshold_from_similarities(sims, far)
            assert np.mean(sims >= t) <= far

    def test_threshold_monotone_in_far_target(self):
        rng = np.random.default_rng(6)
        sims = rng.uniform(-1, 1, size=300)
        t_strict = threshold_from_similarities(sims, 0.01)
        t_loose = threshold_from_similarities(sims, 0.1)
        assert t_strict >= t_loose

    def test_rejects_bad_far_target(self):
        with pytest.raises(OutOfRange):
            threshold_from_similarities([0.1] * 100, 0.0)
        with pytest.raises(OutOfRange):
            threshold_from_similarities([0.1] * 100, 1.0)

    def test_rejects_empty(self):
        with pytest.raises(EmptyInput):
            threshold_from_similarities([], 0.01)


class TestCalibrateOnModel:
    def test_too_few_pairs(self):
        model = StubEmbed()
        pairs = [(angle_image(0.0), angle_image(1.0))] * 99
        with pytest.raises(TooFewPairs):
            calibrate_far_threshold(model, pairs, 0.01)

    def test_threshold_reproduces_known_similarities(self):
        # pair k has similarity cos(theta_k); thresholds must match the
        # pure-similarity rule applied to those cosines
        rng = np.random.default_rng(3)
        thetas = rng.uniform(0, np.pi, size=120)
        pairs = [(angle_image(0.0), angle_image(t)) for t in thetas]
        got = calibrate_far_threshold(StubEmbed(), pairs, 0.05)
        want = threshold_from_similarities(np.cos(thetas.astype(np.float32)), 0.05)
        assert got == pytest.approx(want, abs=1e-6)


class TestSuccessRate:
    def test_hand_built_five_pairs_three_above(self):
        # similarities vs the single test image: 0.9, 0.8, 0.7, 0.2, 0.1
        sims = [0.9, 0.8, 0.7, 0.2, 0.1]
        adv = np.stack([angle_image(np.arccos(s)) for s in sims])
        test = angle_image(0.0)[None]
        rate = attack_success_rate(adv, test, StubEmbed(), threshold=0.5)
        assert rate == pytest.approx(60.0)

    def test_every_pair_counts(self):
        # 2 adv x 3 test = 6 pairs, 4 above threshold -> 66.66..%
        adv = np.stack([angle_image(0.0), angle_image(np.pi / 2)])
        test = np.stack([angle_image(0.0), angle_image(0.1), angle_image(np.pi)])
        rate = attack_success_rate(adv, test, StubEmbed(), threshold=0.5)
        assert rate == pytest.approx(100.0 * 2 / 6)

    def test_monotone_in_threshold(self):
        rng = np.random.default_rng(9)
        adv = np.stack([angle_image(t) for t in rng.uniform(0, np.pi, 12)])
        test = np.stack([angle_image(t) for t in rng.uniform(0, np.pi, 7)])
        model = StubEmbed()
        rates = [attack_success_rate(adv, test, model, t) for t in (-1.0, 0.0, 0.5, 0.9, 1.1)]
        assert all(a >= b for a, b in zip(rates[:-1], rates[1:]))

    def test_bounds(self):
        adv = np.stack([angle_image(0.0)])
        test = np.stack([angle_image(0.0)])
        assert attack_success_rate(adv, test, StubEmbed(), -2.0) == 100.0
        assert attack_success_rate(adv, test, StubEmbed(), 2.0) == 0.0

    def test_empty_inputs_rejected(self):
        with pytest.raises(EmptyInput):
            pairwise_cosines(np.zeros((0, 3, 8, 8), np.float32), np.zeros((1, 3, 8, 8), np.float32), StubEmbed())

    def test_confidence_closed_form(self):
        adv = np.stack([angle_image(0.0), angle_image(np.pi)])
        test = angle_image(0.0)[None]
        # cosines 1 and -1 -> confidences 100 and 0 -> mean 50
        assert mean_confidence(adv, test, StubEmbed()) == pytest.approx(50.0, abs=1e-4)


@pytest.fixture(scope="module")
def gen():
    torch.manual_seed(0)
    return GeneratorModel(au_dim=17, in_hw=(32, 32), width=4, res_blocks=1)


@pytest.fixture(scope="module")
def cfg():
    return AUSpaceConfig()


class TestTraversal:
    def test_frame_count(self, gen, cfg):
        base = np.random.default_rng(0).uniform(0, 1, (3, 32, 32)).astype(np.float32)
        path = default_traversal_path(cfg)
        frames = manifold_traverse(gen, base, path, steps_per_segment=3)
        assert len(frames) == (len(path) - 1) * 3 + 1

    def test_endpoints_match_direct_calls(self, gen, cfg):
        base = np.random.default_rng(1).uniform(0, 1, (3, 32, 32)).astype(np.float32)
        a, b = preset("neutral", cfg), preset("happy", cfg)
        frames = manifold_traverse(gen, base, [a, b], steps_per_segment=2)
        x = torch.from_numpy(base).unsqueeze(0)
        with torch.no_grad():
            first, _, _ = gen(x, torch.from_numpy(a.as_array()).float().unsqueeze(0))
            last, _, _ = gen(x, torch.from_numpy(b.as_array()).float().unsqueeze(0))
        assert np.array_equal(frames[0], first.squeeze(0).numpy())
        assert np.array_equal(frames[-1], last.squeeze(0).numpy())

    def test_constant_path_gives_identical_frames(self, gen, cfg):
        base = np.random.default_rng(2).uniform(0, 1, (3, 32, 32)).astype(np.float32)
        a = preset("sad", cfg)
        frames = manifold_traverse(gen, base, [a, a], steps_per_segment=4)
        for fr in frames[1:]:
            assert np.array_equal(fr, frames[0])

    def test_rejects_bad_arguments(self, gen, cfg):
        base = np.zeros((3, 32, 32), np.float32)
        with pytest.raises(OutOfRange):
            manifold_traverse(gen, base, default_traversal_path(cfg), steps_per_segment=0)
        with pytest.raises(EmptyInput):
            manifold_traverse(gen, base, [preset("neutral", cfg)], steps_per_segment=2)

    def test_grid_written(self, gen, cfg, tmp_path):
        frames = [np.full((3, 16, 16), 0.5, np.float32) for _ in range(5)]
        out = tmp_path / "grid.png"
        save_image_grid(frames, out, cols=3)
        from PIL import Image

        with Image.open(out) as im:
            assert im.size == (3 * 16, 2 * 16)


class TestImpostorPairs:
    def test_pairs_have_distinct_identities(self):
        cfg = AUSpaceConfig()
        ds = synthesize_dataset(3, 4, cfg, size=48, seed=0)
        by_image = {}
        for im in ds.images:
            by_image[im.image.tobytes()] = im.identity
        rng = np.random.default_rng(0)
        for a, b in impostor_pairs_from_dataset(ds, rng, count=50):
            assert by_image[a.tobytes()] != by_image[b.tobytes()]

    def test_single_identity_rejected(self):
        cfg = AUSpaceConfig()
        ds = synthesize_dataset(1, 4, cfg, size=48, seed=0)
        with pytest.raises(TooFewPairs):
            impostor_pairs_from_dataset(ds, np.random.default_rng(0), count=10)


@pytest.fixture(scope="module")
def setup():
    space = AUSpaceConfig()
    ds = synthesize_dataset(4, 6, space, size=48, seed=7)
    torch.manual_seed(0)
    g = GeneratorModel(au_dim=17, in_hw=(48, 48), width=4, res_blocks=1)
    models = []
    for s in range(4):
        torch.manual_seed(100 + s)
        models.append(EmbeddingModel(image_size=48, embed_dim=16, width=4))
    ens = FREnsemble(whitebox=models[:3], blackbox=models[3])
    target = np.stack([im.image for im in ds.images if im.identity == 0][:3])
    return space, ds, g, ens, target


class TestEvaluateDriver:
    def test_report_fields_and_artifacts(self, setup, tmp_path):
        cfg, ds, gen, ens, target = setup
        rep = evaluate(
            gen, ens, ds, target, cfg, seed=3, n_adv=6, out_dir=tmp_path, target_identity=0
        )
        names = {"whitebox_0", "whitebox_1", "whitebox_2", "blackbox"}
        assert set(rep.asr) == names
        assert set(rep.thresholds) == names
        for v in rep.asr.values():
            assert 0.0 <= v <= 100.0
        for v in rep.confidence.values():
            assert 0.0 <= v <= 100.0
        assert rep.sample_counts["adv"] == 6
        assert rep.sample_counts["target_test"] == 3
        for f in ("report.csv", "report.txt", "asr.png", "traversal.png"):
            assert (tmp_path / f).exists(), f

    def test_same_seed_same_numbers(self, setup):
        cfg, ds, gen, ens, target = setup
        r1 = evaluate(gen, ens, ds, target, cfg, seed=5, n_adv=5, target_identity=0)
        r2 = evaluate(gen, ens, ds, target, cfg, seed=5, n_adv=5, target_identity=0)
        assert r1.asr == r2.asr
        assert r1.thresholds == r2.thresholds

    def test_report_validation(self):
        with pytest.raises(OutOfRange):
            EvalReport(
                asr={"m": 140.0},
                clean_asr={"m": 1.0},
                confidence={"m": 50.0},
                thresholds={"m": 0.5},
                sample_counts={"adv": 1},
                seed=0,
            )
