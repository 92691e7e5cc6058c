"""Defense behaviors: transforms, barrage, quantization, voting, detection,
code decoding, distribution features, activation swap."""

import itertools

import numpy as np
import pytest

from bbeval import data, metrics, nn
from bbeval.defenses import (NULL_LABEL, BuzzDefense, Codebook, FdDefense,
                             OddsDefense, OddsStatistics, StubDefense,
                             VanillaDefense, ecoc_decode, fit_bart, fit_distc,
                             fit_ecoc, fit_kwta, generate_codebook,
                             nearest_codeword, odds_classify, odds_fit,
                             transform_catalog_apply, unanimous_or_null,
                             usable_transforms)
from bbeval.defenses.bart import BartDefense, barrage_images
from bbeval.defenses.distc import default_nsamp, kde_features, random_resize_pad
from bbeval.defenses.fd import (band_steps, fd_preprocess, quantize_coefficients,
                                zigzag_order)
from bbeval.exceptions import CodebookError, StatisticsError
from bbeval.rng import generator


class TestTransformCatalog:
    def test_empty_chain_is_identity(self, tiny_test):
        x = tiny_test.images[0]
        np.testing.assert_array_equal(transform_catalog_apply(x, [], seed=1), x)

    def test_zero_sigma_noise_is_identity(self, tiny_test):
        x = tiny_test.images[0]
        out = transform_catalog_apply(x, ["gaussian-noise"], {0: {"sigma": 0.0}}, seed=1)
        np.testing.assert_array_equal(out, x)

    def test_channel_transforms_skipped_on_grayscale(self, tiny_test):
        x = tiny_test.images[0]
        out = transform_catalog_apply(x, ["channel-permute", "grayscale-mix"], seed=2)
        np.testing.assert_array_equal(out, x)
        assert "channel-permute" not in usable_transforms(1)
        assert "channel-permute" in usable_transforms(3)

    def test_random_chains_preserve_range(self):
        rng = np.random.default_rng(0)
        for trial in range(30):
            channels = int(rng.choice([1, 3]))
            x = rng.uniform(-0.5, 0.5, size=(channels, 16, 16)).astype(np.float32)
            pool = usable_transforms(channels)
            count = int(rng.integers(1, 6))
            chain = [pool[i] for i in rng.choice(len(pool), count, replace=False)]
            out = transform_catalog_apply(x, chain, seed=trial)
            assert out.min() >= -0.5 - 1e-7 and out.max() <= 0.5 + 1e-7
            assert out.shape == x.shape
            assert np.all(np.isfinite(out))


@pytest.fixture(scope="module")
def bart_defense(desk_train, desk_model):
    return fit_bart(desk_train, desk_model, t_max=5,
                    config=nn.TrainConfig(epochs=6, seed=1), seed=2)


class TestBarrage:
    def test_tmax_zero_equals_vanilla_on_retrained(self, bart_defense, desk_test):
        frozen = BartDefense(bart_defense.model, t_max=0, seed=3)
        x = desk_test.images[:40]
        np.testing.assert_array_equal(frozen.classify_batch(x, seed=5),
                                      bart_defense.model.predict_labels(x))

    def test_same_seed_same_labels(self, bart_defense, desk_test):
        x = desk_test.images[:30]
        a = bart_defense.classify_batch(x, seed=7)
        b = bart_defense.classify_batch(x, seed=7)
        np.testing.assert_array_equal(a, b)

    def test_different_seeds_can_differ(self, bart_defense, desk_test):
        x = desk_test.images[:60]
        a = barrage_images(x, 5, seed=1)
        b = barrage_images(x, 5, seed=2)
        assert not np.array_equal(a, b)

    def test_retrained_clean_accuracy_within_25_points(self, bart_defense, desk_test,
                                                       desk_clean_accuracy):
        acc = metrics.defense_accuracy(bart_defense, desk_test.images,
                                       desk_test.labels, seed=11)
        assert acc >= desk_clean_accuracy - 0.25


class TestFrequencyQuantization:
    def test_unit_steps_near_identity_on_byte_aligned(self):
        rng = np.random.default_rng(1)
        raw = rng.integers(0, 256, size=(1, 16, 16), dtype=np.uint8)
        x = (raw.astype(np.float32) / 255.0) - 0.5
        out = fd_preprocess(x, qs_as=1, qs_md=1)
        assert np.max(np.abs(out - x)) <= 1.0 / 255.0 + 1e-6

    def test_default_steps(self, desk_model):
        d = FdDefense(desk_model)
        assert (d.qs_as, d.qs_md) == (40, 70)

    def test_quantization_idempotent_per_coefficient(self):
        rng = np.random.default_rng(2)
        coeffs = rng.normal(scale=300.0, size=(4, 4, 8, 8))
        steps = band_steps(40, 70)
        once = quantize_coefficients(coeffs, steps)
        twice = quantize_coefficients(once, steps)
        np.testing.assert_array_equal(once, twice)

    def test_zigzag_band_split(self):
        order = zigzag_order()
        assert order[0] == 0            # DC first
        assert len(set(order.tolist())) == 64
        steps = band_steps(3, 9, band_split=16)
        assert np.sum(steps == 3) == 16
        assert np.sum(steps == 9) == 48

    def test_output_in_range_and_shape(self, desk_test):
        out = fd_preprocess(desk_test.images[:8], 40, 70)
        assert out.shape == desk_test.images[:8].shape
        assert out.min() >= -0.5 and out.max() <= 0.5

    def test_grid_search_counts_and_threshold(self, tiny_model, tiny_test):
        from bbeval.attacks import AttackConfig, fgsm
        from bbeval.defenses import fd_grid_search
        clean = tiny_test.take(np.arange(60))
        adv = fgsm(tiny_model, clean.images, clean.labels,
                   AttackConfig(kind="fgsm", epsilon=0.15)).adversarial
        grid = fd_grid_search(tiny_model, clean, adv, clean.labels,
                              as_grid=[20, 60], md_grid=[30, 90], clean_floor=0.5)
        assert grid.clean_surface.shape == (2, 2)
        assert grid.adv_surface.shape == (2, 2)
        ok = grid.clean_surface >= 0.5
        if np.any(ok):
            i = grid.as_grid.index(grid.qs_as)
            j = grid.md_grid.index(grid.qs_md)
            assert grid.clean_surface[i, j] >= 0.5
            assert grid.adv_surface[i, j] == np.max(np.where(ok, grid.adv_surface, -1))


class TestUnanimousVote:
    class FixedMember:
        def __init__(self, label):
            self.label = label

        def classify_batch(self, images):
            return np.full(len(images), self.label, dtype=np.int64)

    def _defense(self, labels, k=3):
        return BuzzDefense([self.FixedMember(l) for l in labels], num_classes=k)

    def test_single_member_never_null(self, tiny_test):
        d = self._defense([2])
        out = d.classify_batch(tiny_test.images[:10])
        assert np.all(out == 2)

    def test_agreement_and_disagreement(self, tiny_test):
        x = tiny_test.images[:4]
        assert np.all(self._defense([2, 2]).classify_batch(x) == 2)
        assert np.all(self._defense([2, 3]).classify_batch(x) == NULL_LABEL)

    @pytest.mark.parametrize("p", [2, 3])
    def test_exhaustive_enumeration_matches_reference(self, p, tiny_test):
        x = tiny_test.images[:1]
        for combo in itertools.product(range(3), repeat=p):
            got = int(self._defense(list(combo)).classify_batch(x)[0])
            assert got == unanimous_or_null(combo)

    def test_fitted_members_vote(self, desk_train, desk_model, desk_test):
        from bbeval.defenses import fit_buzz
        defense = fit_buzz(desk_train.take(np.arange(400)), desk_model, p=2,
                           config=nn.TrainConfig(epochs=4, seed=5), seed=6)
        out = defense.classify_batch(desk_test.images[:60])
        assert set(np.unique(out)) <= set(range(10)) | {NULL_LABEL}


class _NoiseShiftModel:
    """3-class logit fixture: class 2's logit responds to noise only past a
    mean-intensity threshold, so calibration data (far below it) has frozen
    odds while the crafted input sits exactly on the threshold."""

    num_classes = 3

    def __init__(self, threshold=0.3, gain=50.0):
        self.threshold = threshold
        self.gain = gain

    def logits(self, x):
        m = np.asarray(x).reshape(len(x), -1).mean(axis=1)
        z = np.zeros((len(x), 3))
        z[:, 0] = 1.0
        z[:, 1] = 0.2
        z[:, 2] = self.gain * np.maximum(m - self.threshold, 0.0)
        return z

    def predict_labels(self, x):
        return np.argmax(self.logits(x), axis=1)


class TestOdds:
    def test_degenerate_model_fires_on_nothing(self):
        class Frozen:
            num_classes = 3

            def logits(self, x):
                z = np.tile(np.array([2.0, 1.0, 0.0]), (len(x), 1))
                return z

            def predict_labels(self, x):
                return np.argmax(self.logits(x), axis=1)

        model = Frozen()
        rng = np.random.default_rng(3)
        calib = data.ImageDataset(rng.uniform(-0.4, 0.4, (40, 1, 4, 4)).astype(np.float32),
                                  np.zeros(40, np.int64), 3)
        for fpr in (0.1, 0.3, 0.5):
            stats = odds_fit(model, calib, fpr=fpr, draws=16, seed=4,
                             adv_set=calib.images)
            out = [odds_classify(model, stats, calib.images[i], seed=i)
                   for i in range(20)]
            assert out == [0] * 20

    def test_infinite_tau_equals_vanilla(self, tiny_model, tiny_test):
        k = tiny_model.num_classes
        stats = OddsStatistics(mu=np.zeros((k, k)), sigma=np.ones((k, k)),
                               tau=np.full((k, k), np.inf), noise_std=0.05, draws=8,
                               fpr_target=0.1)
        defense = OddsDefense(tiny_model, stats)
        x = tiny_test.images[:20]
        np.testing.assert_array_equal(defense.classify_batch(x, seed=5),
                                      tiny_model.predict_labels(x))

    def test_constructed_shift_detected_and_corrected(self):
        model = _NoiseShiftModel()
        rng = np.random.default_rng(6)
        calib_imgs = (0.02 * rng.standard_normal((60, 1, 4, 4))).astype(np.float32)
        calib = data.ImageDataset(np.clip(calib_imgs, -0.5, 0.5),
                                  np.zeros(60, np.int64), 3)
        stats = odds_fit(model, calib, fpr=0.1, noise_std=0.05, draws=32, seed=7,
                         adv_set=calib.images)
        probe = np.full((1, 4, 4), model.threshold, dtype=np.float32)
        for seed in range(100):
            assert odds_classify(model, stats, probe, seed=seed) == 2

    def test_correct_mode_never_null(self, tiny_model, tiny_test):
        calib = tiny_test.take(np.arange(80))
        stats = odds_fit(tiny_model, calib, fpr=0.2, draws=8, seed=8,
                         adv_set=calib.images, min_per_class=5)
        defense = OddsDefense(tiny_model, stats, mode="correct")
        out = defense.classify_batch(tiny_test.images[80:110], seed=9)
        assert np.all(out != NULL_LABEL)

    def test_detect_mode_can_abstain(self):
        model = _NoiseShiftModel()
        rng = np.random.default_rng(10)
        calib_imgs = (0.02 * rng.standard_normal((40, 1, 4, 4))).astype(np.float32)
        calib = data.ImageDataset(np.clip(calib_imgs, -0.5, 0.5),
                                  np.zeros(40, np.int64), 3)
        stats = odds_fit(model, calib, fpr=0.1, draws=32, seed=11, adv_set=calib.images)
        probe = np.full((1, 4, 4), model.threshold, dtype=np.float32)
        assert odds_classify(model, stats, probe, seed=0, mode="detect") == NULL_LABEL

    def test_too_few_samples_per_class_errors(self, tiny_model, tiny_test):
        calib = tiny_test.take(np.arange(12))
        with pytest.raises(StatisticsError):
            odds_fit(tiny_model, calib, fpr=0.1, draws=4, seed=12,
                     adv_set=calib.images, min_per_class=10)

    def test_statistics_serialize_round_trip(self, tmp_path, tiny_model, tiny_test):
        from bbeval import checkpoint
        calib = tiny_test.take(np.arange(80))
        stats = odds_fit(tiny_model, calib, fpr=0.2, draws=8, seed=13,
                         adv_set=calib.images, min_per_class=5)
        path = tmp_path / "stats.bbgw"
        checkpoint.save_tensors(stats.to_tensors(), path)
        back = OddsStatistics.from_tensors(checkpoint.load_tensors(path))
        np.testing.assert_allclose(back.tau, stats.tau.astype(np.float32), rtol=1e-6)
        assert back.draws == stats.draws


class TestEcoc:
    def test_two_class_decode(self):
        code = Codebook(np.array([[1.0, 1.0], [-1.0, -1.0]]), 2)
        assert ecoc_decode(np.array([[0.9, 0.7]]), code)[0] == 0

    def test_exact_codeword_decodes_to_itself(self):
        code = generate_codebook(4, 8, 3, seed=1)
        for cls in range(4):
            assert ecoc_decode(code.codes[cls][None, :], code)[0] == cls

    def test_correlation_equals_nearest_codeword_oracle(self):
        code = generate_codebook(10, 16, 5, seed=2)
        rng = np.random.default_rng(3)
        acts = rng.uniform(-1, 1, size=(10_000, 16))
        dists = ((acts[:, None, :] - code.codes[None, :, :]) ** 2).sum(axis=2)
        sorted_d = np.sort(dists, axis=1)
        unique = sorted_d[:, 0] < sorted_d[:, 1] - 1e-12
        fast = ecoc_decode(acts[unique], code)
        slow = nearest_codeword(acts[unique], code)
        assert unique.sum() > 9000
        np.testing.assert_array_equal(fast, slow)

    def test_sign_vector_hamming_equals_sign_correlation(self):
        code = generate_codebook(6, 12, 4, seed=4)
        rng = np.random.default_rng(5)
        acts = rng.uniform(-1, 1, size=(500, 12))
        signs = np.where(acts > 0, 1.0, -1.0)
        ham = np.array([[np.sum(s != c) for c in code.codes] for s in signs])
        corr_pick = ecoc_decode(signs, code)
        ham_pick = np.argmin(ham, axis=1)
        unique = np.sum(ham == ham.min(axis=1, keepdims=True), axis=1) == 1
        np.testing.assert_array_equal(corr_pick[unique], ham_pick[unique])

    def test_codebook_examples(self):
        small = generate_codebook(2, 2, 2, seed=6)
        assert small.min_distance == 2
        big = generate_codebook(10, 32, 10, seed=7)
        assert big.min_distance >= 10
        assert big.codes.shape == (10, 32)
        with pytest.raises(CodebookError):
            generate_codebook(3, 2, 2, seed=8, attempts=500)

    def test_fitted_ensemble_classifies(self, tiny_train, tiny_test):
        defense = fit_ecoc(tiny_train, bits=8, members=2, min_distance=3,
                           config=nn.TrainConfig(epochs=6, seed=9), seed=10)
        acts = defense.activations(tiny_test.images[:20])
        assert acts.shape == (20, 8)
        assert np.all(np.abs(acts) < 1.0)
        acc = np.mean(defense.classify_batch(tiny_test.images) == tiny_test.labels)
        assert acc >= 0.5


class TestDistributionClassifier:
    def test_kde_rows_normalized(self):
        rng = np.random.default_rng(11)
        scores = rng.dirichlet(np.ones(5), size=30)
        feats = kde_features(scores)
        assert feats.shape == (5, 100)
        assert np.all(feats >= 0)
        np.testing.assert_allclose(feats.sum(axis=1), 1.0, atol=1e-6)

    def test_resize_pad_shape_and_content(self, tiny_test):
        rng = generator(12, "t")
        out = random_resize_pad(tiny_test.images[0], (7, 11), rng)
        assert out.shape == tiny_test.images[0].shape

    def test_nsamp_defaults(self):
        assert default_nsamp(3) == 50
        assert default_nsamp(1) == 100

    def test_degenerate_pipeline_matches_vanilla(self, tiny_model, tiny_train):
        subset = tiny_train.take(np.arange(250))
        h = subset.shape[1]
        defense = fit_distc(tiny_model, subset, resize_range=(h, h), nsamp=1,
                            config=nn.TrainConfig(epochs=20, seed=13,
                                                  learning_rate=3e-3),
                            seed=14)
        predicted = tiny_model.predict_labels(subset.images)
        keep = predicted == subset.labels
        out = defense.classify_batch(subset.images[keep], seed=15)
        agreement = np.mean(out == predicted[keep])
        assert agreement >= 0.99


class TestKwtaDefense:
    def test_full_keep_equals_identity_activation(self):
        spec = nn.desk_defended_spec((1, 8, 8), 4)
        passthrough = nn.ModelSpec([l for l in spec.layers if l.kind != "relu"],
                                   4, (1, 8, 8))
        full = nn.with_kwta(spec, keep=1.0)
        a = nn.Model(full, seed=15)
        b = nn.Model(passthrough, seed=16)
        # layer indices differ between the specs; map weights by order
        for pa, pb in zip(a.params.values(), b.params.values()):
            pb.data = pa.data.copy()
        x = np.random.default_rng(17).uniform(-0.5, 0.5, (5, 1, 8, 8)).astype(np.float32)
        np.testing.assert_allclose(a.logits(x), b.logits(x), atol=1e-5)

    def test_fine_tuned_clean_accuracy_within_six_points(self, desk_train, desk_model,
                                                         desk_test, desk_clean_accuracy):
        defense = fit_kwta(desk_model, desk_train, nn.TrainConfig(epochs=4, seed=18),
                           keep=0.2, seed=19)
        acc = metrics.defense_accuracy(defense, desk_test.images, desk_test.labels)
        assert acc >= desk_clean_accuracy - 0.06

    def test_exact_k_survivors_per_layer(self):
        spec = nn.with_kwta(nn.desk_defended_spec((1, 8, 8), 4), keep=0.2)
        model = nn.Model(spec, seed=20)
        from bbeval.autodiff import Tensor
        t = Tensor(np.random.default_rng(21).uniform(-0.5, 0.5, (4, 1, 8, 8))
                   .astype(np.float32))
        for i, layer in enumerate(model.spec.layers):
            before = t
            t = nn._apply_layer(model, i, t)
            if layer.kind == "kwta":
                d = int(np.prod(before.data.shape[1:]))
                k = max(1, int(layer.keep * d))
                assert np.all(np.count_nonzero(t.data.reshape(len(t.data), -1), axis=1) == k)


class TestRandomizedSeedContract:
    def test_odds_same_seed_identical(self, tiny_model, tiny_test):
        calib = tiny_test.take(np.arange(80))
        stats = odds_fit(tiny_model, calib, fpr=0.2, draws=8, seed=30,
                         adv_set=calib.images, min_per_class=5)
        defense = OddsDefense(tiny_model, stats)
        x = tiny_test.images[80:100]
        np.testing.assert_array_equal(defense.classify_batch(x, seed=4),
                                      defense.classify_batch(x, seed=4))

    def test_distc_same_seed_identical(self, tiny_model, tiny_train, tiny_test):
        defense = fit_distc(tiny_model, tiny_train.take(np.arange(120)),
                            resize_range=(8, 11), nsamp=5,
                            config=nn.TrainConfig(epochs=3, seed=31), seed=32)
        x = tiny_test.images[:15]
        np.testing.assert_array_equal(defense.classify_batch(x, seed=6),
                                      defense.classify_batch(x, seed=6))


class TestCodebookSerialization:
    def test_round_trip_through_checkpoint(self, tmp_path):
        from bbeval import checkpoint
        code = generate_codebook(6, 12, 4, seed=33)
        path = tmp_path / "code.bbgw"
        checkpoint.save_tensors(code.to_tensors(), path)
        back = Codebook.from_tensors(checkpoint.load_tensors(path))
        np.testing.assert_array_equal(back.codes, code.codes)
        assert back.min_distance == code.min_distance


class TestDefenseTotality:
    def test_every_defense_returns_for_every_input(self, tiny_model, tiny_test):
        rng = np.random.default_rng(22)
        weird = np.stack([np.full((1, 12, 12), -0.5, np.float32),
                          np.full((1, 12, 12), 0.5, np.float32),
                          rng.uniform(-0.5, 0.5, (1, 12, 12)).astype(np.float32)])
        defenses = [VanillaDefense(tiny_model), FdDefense(tiny_model),
                    StubDefense(1, num_classes=4)]
        for d in defenses:
            out = d.classify_batch(weird, seed=1)
            assert out.shape == (3,)
            assert np.all((out == NULL_LABEL) | ((out >= 0) & (out < d.num_classes)))
