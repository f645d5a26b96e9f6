import dataclasses
import math

import numpy as np
import pytest

import zsldata
import zslgan
import zsltext
from zslautodiff import Graph
from zslerrors import ConfigError, NumericalError, ShapeError

SMALL = dict(batch_size=16, g_batch_size=16, n_d=2, z_dim=4, h_g=16, h_d=16, d_text=4)


def two_class_bundle(seed=0):
    rng = np.random.default_rng(seed)
    features = np.concatenate([rng.normal([2.0, 0.0], 0.3, size=(30, 2)),
                               rng.normal([0.0, 2.0], 0.3, size=(30, 2))])
    documents = {1: zsltext.Document(1, 'Red crest and long tail feathers.'),
                 2: zsltext.Document(2, 'Blue wings with a short beak.')}
    return zsldata.DatasetBundle(features=features, labels=np.array([1] * 30 + [2] * 30),
                                 documents=documents, seen=[1, 2], unseen=[], name='twoclass')


def small_model(rng, text_dim=5, x_dim=3, classes=(1, 2), **overrides):
    config = zslgan.TrainConfig(**{**SMALL, **overrides})
    return zslgan.init_model(config, text_dim, x_dim, list(classes), rng)


class TestTrainConfig:

    def test_defaults(self):
        config = zslgan.TrainConfig()
        assert (config.n_d, config.batch_size, config.g_batch_size, config.steps) == (5, 64, 256, 2000)
        assert (config.alpha, config.beta1, config.beta2) == (0.001, 0.5, 0.9)
        assert (config.lambda_p, config.gp_coeff, config.z_dim) == (1.0, 10.0, 100)

    def test_gan_only_zeroes_the_regularizer(self):
        config = zslgan.TrainConfig(ablation='gan-only', lambda_p=2.0)
        assert config.resolved().lambda_p == 0.0
        assert config.lambda_p == 2.0

    @pytest.mark.parametrize('overrides', [{'ablation': 'bogus'}, {'beta1': 1.0}, {'n_d': 0},
                                           {'ablation': 'vp-only', 'lambda_p': 0.0},
                                           {'seen_holdout': 1.0}, {'vp_distance': 'manhattan'}])
    def test_invalid(self, overrides):
        with pytest.raises(ConfigError):
            zslgan.TrainConfig(**overrides).validate()

    def test_text_width(self):
        assert zslgan.TrainConfig().text_width(5000) == 1000
        assert zslgan.TrainConfig().text_width(300) == 128
        assert zslgan.TrainConfig().text_width(40) == 40
        assert zslgan.TrainConfig(d_text=7).text_width(300) == 7
        assert zslgan.TrainConfig(text_fc=False).text_width(300) == 300


class TestInitModel:

    def test_shapes(self):
        model = small_model(np.random.default_rng(0))
        named = model.generator.named()
        assert named['fc_text.weight'].shape == (5, 4)
        assert named['fc_hidden.weight'].shape == (8, 16)
        assert named['fc_out.weight'].shape == (16, 3)
        d_named = model.discriminator.named()
        assert d_named['head_real.weight'].shape == (16, 1)
        assert d_named['head_cls.weight'].shape == (16, 2)

    def test_without_text_layer(self):
        model = small_model(np.random.default_rng(0), text_fc=False)
        assert model.generator.fc_text is None
        assert 'fc_text.weight' not in model.generator.named()
        assert model.generator.named()['fc_hidden.weight'].shape == (9, 16)


class TestGeneratorForward:

    def test_zero_weights_give_tanh_of_bias(self):
        model = small_model(np.random.default_rng(0))
        for layer in ('fc_text', 'fc_hidden', 'fc_out'):
            dense = getattr(model.generator, layer)
            dense.weight = np.zeros_like(dense.weight)
        model.generator.fc_out.bias = np.array([0.5, -1.0, 0.0])
        out = zslgan.generator_forward(model, np.ones(5), np.ones(4))
        np.testing.assert_allclose(out, np.tanh([0.5, -1.0, 0.0]))

    def test_deterministic_and_noise_dependent(self):
        rng = np.random.default_rng(1)
        model = small_model(rng)
        text = rng.uniform(size=5)
        z = rng.standard_normal(4)
        first = zslgan.generator_forward(model, text, z)
        np.testing.assert_array_equal(first, zslgan.generator_forward(model, text, z))
        assert not np.array_equal(first, zslgan.generator_forward(model, text, z + 1.0))
        assert np.all(np.abs(first) < 1)

    def test_batch(self):
        rng = np.random.default_rng(2)
        model = small_model(rng)
        out = zslgan.generator_forward(model, rng.uniform(size=5), rng.standard_normal((7, 4)))
        assert out.shape == (7, 3)

    def test_text_dimension_mismatch(self):
        model = small_model(np.random.default_rng(0))
        with pytest.raises(ShapeError):
            zslgan.generator_forward(model, np.ones(6), np.ones(4))


class TestDiscriminatorForward:

    def test_zero_weights_give_biases(self):
        model = small_model(np.random.default_rng(0))
        for layer in ('fc_shared', 'head_real', 'head_cls'):
            dense = getattr(model.discriminator, layer)
            dense.weight = np.zeros_like(dense.weight)
        model.discriminator.head_real.bias = np.array([0.7])
        model.discriminator.head_cls.bias = np.array([1.0, -2.0])
        score, logits = zslgan.discriminator_forward(model, np.ones(3))
        assert score == pytest.approx(0.7)
        np.testing.assert_allclose(logits, [1.0, -2.0])

    def test_hand_set_critic(self):
        model = small_model(np.random.default_rng(0), x_dim=2, h_d=2)
        model.discriminator = zslgan.DiscriminatorParams(
            fc_shared=zslgan.Dense(np.array([[1.0, -1.0], [2.0, 1.0]]), np.array([0.0, 0.5])),
            head_real=zslgan.Dense(np.array([[1.0], [2.0]]), np.array([0.1])),
            head_cls=zslgan.Dense(np.eye(2), np.zeros(2)))
        # hidden = relu([3, 0.5])
        score, logits = zslgan.discriminator_forward(model, np.array([1.0, 1.0]))
        assert score == pytest.approx(4.1)
        np.testing.assert_allclose(logits, [3.0, 0.5])

    def test_dimension_mismatch(self):
        model = small_model(np.random.default_rng(0))
        with pytest.raises(ShapeError):
            zslgan.discriminator_forward(model, np.ones(4))


def linear_critic(weights, classes=2):
    '''Critic that is linear on the positive orthant: identity shared layer'''
    dim = len(weights)
    return {'fc_shared.weight': np.eye(dim), 'fc_shared.bias': np.zeros(dim),
            'head_real.weight': np.array(weights, dtype=float)[:, None], 'head_real.bias': np.zeros(1),
            'head_cls.weight': np.zeros((dim, classes)), 'head_cls.bias': np.zeros(classes)}


class TestLosses:

    def test_generator_loss_perfect_logits(self):
        graph = Graph()
        loss = zslgan.loss_generator(graph, graph.constant([5.0, 5.0]),
                                     graph.constant([[100.0, 0.0], [0.0, 100.0]]), [0, 1])
        assert float(loss.value) == pytest.approx(-5.0, abs=1e-12)

    def test_generator_loss_uniform_logits(self):
        graph = Graph()
        loss = zslgan.loss_generator(graph, graph.constant([0.0, 0.0, 0.0]),
                                     graph.constant(np.zeros((3, 2))), [0, 1, 1])
        assert float(loss.value) == pytest.approx(math.log(2))

    def test_generator_loss_empty_batch(self):
        graph = Graph()
        with pytest.raises(ValueError):
            zslgan.loss_generator(graph, graph.constant(np.zeros(0)), graph.constant(np.zeros((0, 2))), [])

    def test_penalty_of_a_linear_critic(self):
        rng = np.random.default_rng(4)
        graph = Graph()
        params = zslgan.leaves(graph, linear_critic([3.0, 4.0]))
        interpolates = graph.constant(rng.uniform(0.1, 1.0, size=(6, 2)))
        penalty = zslgan.gradient_penalty(graph, params, interpolates, 10.0)
        assert float(penalty.value) == pytest.approx(10.0 * (5.0 - 1.0) ** 2)

    def test_discriminator_loss_constructed_case(self):
        rng = np.random.default_rng(5)
        batch = rng.uniform(0.1, 1.0, size=(4, 2))
        graph = Graph()
        params = zslgan.leaves(graph, linear_critic([0.6, 0.8], classes=3))
        loss = zslgan.loss_discriminator(graph, params, batch, batch, [0, 1, 2, 0], 10.0,
                                         rng.uniform(size=4))
        assert float(loss.value) == pytest.approx(math.log(3))

    def test_discriminator_loss_against_numpy(self):
        rng = np.random.default_rng(6)
        named = small_model(rng, x_dim=3, h_d=5, classes=(1, 2, 3)).discriminator.named()
        real = rng.uniform(-0.9, 0.9, size=(4, 3))
        fake = rng.uniform(-0.9, 0.9, size=(4, 3))
        labels = np.array([0, 2, 1, 1])
        epsilon = rng.uniform(size=4)
        graph = Graph()
        loss = zslgan.loss_discriminator(graph, zslgan.leaves(graph, named), real, fake, labels,
                                         10.0, epsilon)

        w1, b1 = named['fc_shared.weight'], named['fc_shared.bias']
        w2, b2 = named['head_real.weight'], named['head_real.bias']
        wc, bc = named['head_cls.weight'], named['head_cls.bias']

        def critic(x):
            hidden = np.maximum(x @ w1 + b1, 0)
            return (hidden @ w2 + b2)[:, 0], hidden @ wc + bc

        def cross_entropy(logits):
            shifted = logits - logits.max(axis=1, keepdims=True)
            return np.mean(np.log(np.exp(shifted).sum(axis=1)) - shifted[np.arange(4), labels])

        real_scores, real_logits = critic(real)
        fake_scores, fake_logits = critic(fake)
        x_hat = epsilon[:, None] * real + (1 - epsilon[:, None]) * fake
        mask = (x_hat @ w1 + b1 > 0).astype(float)
        grads = (mask * w2[:, 0]) @ w1.T
        penalty = 10.0 * np.mean((np.linalg.norm(grads, axis=1) - 1) ** 2)
        expected = (fake_scores.mean() - real_scores.mean() + penalty
                    + 0.5 * (cross_entropy(fake_logits) + cross_entropy(real_logits)))
        assert float(loss.value) == pytest.approx(expected, rel=1e-12)

    def test_discriminator_loss_batch_mismatch(self):
        graph = Graph()
        params = zslgan.leaves(graph, linear_critic([1.0, 0.0]))
        with pytest.raises(ValueError):
            zslgan.loss_discriminator(graph, params, np.ones((3, 2)), np.ones((2, 2)), [0, 0, 0], 10.0,
                                      np.ones(3))


class TestVisualPivots:

    def test_mean_per_class(self):
        pivots = zslgan.compute_visual_pivots(np.array([[0.0, 0.0], [2.0, 2.0], [5.0, 1.0]]),
                                              np.array([1, 1, 2]))
        np.testing.assert_allclose(pivots[1], [1.0, 1.0])
        np.testing.assert_allclose(pivots[2], [5.0, 1.0])
        assert pivots.classes == [1, 2]

    def test_brute_force_mean(self):
        rng = np.random.default_rng(7)
        features = rng.normal(size=(100, 4))
        labels = rng.integers(1, 4, size=100)
        pivots = zslgan.compute_visual_pivots(features, labels)
        for class_id in (1, 2, 3):
            members = [f for f, l in zip(features, labels) if l == class_id]
            np.testing.assert_allclose(pivots[class_id], sum(members) / len(members), atol=1e-12)

    def test_empty_class_is_reported(self, caplog):
        with caplog.at_level('WARNING'):
            pivots = zslgan.compute_visual_pivots(np.ones((2, 2)), np.array([1, 1]), classes=[1, 9])
        assert 9 not in pivots
        assert '[9]' in caplog.text


class TestVpLoss:

    def test_zero_at_the_pivots(self):
        pivots = zslgan.VisualPivots({1: np.array([0.5, 0.5]), 2: np.array([-1.0, 0.0])})
        graph = Graph()
        generated = graph.constant([[0.0, 0.5], [1.0, 0.5], [-1.0, 0.0]])
        assert float(zslgan.vp_loss(graph, generated, [1, 1, 2], pivots).value) == 0.0

    def test_unit_offset(self):
        pivots = zslgan.VisualPivots({3: np.array([0.2, 0.4, 0.1])})
        graph = Graph()
        generated = graph.constant([[1.2, 0.4, 0.1]])
        assert float(zslgan.vp_loss(graph, generated, [3], pivots).value) == pytest.approx(1.0)

    def test_brute_force(self):
        rng = np.random.default_rng(8)
        generated = rng.normal(size=(20, 3))
        labels = rng.choice([1, 2, 5], size=20)
        pivots = zslgan.VisualPivots({c: rng.normal(size=3) for c in (1, 2, 5, 7)})
        distances = []
        for class_id in sorted(set(labels.tolist())):
            members = generated[labels == class_id]
            distances.append(np.sum((members.mean(axis=0) - pivots[class_id]) ** 2))
        graph = Graph()
        squared = zslgan.vp_loss(graph, graph.constant(generated), labels, pivots)
        euclidean = zslgan.vp_loss(graph, graph.constant(generated), labels, pivots, 'euclidean')
        assert float(squared.value) == pytest.approx(np.mean(distances), abs=1e-12)
        assert float(euclidean.value) == pytest.approx(np.mean(np.sqrt(distances)), abs=1e-12)

    def test_missing_pivot(self):
        graph = Graph()
        with pytest.raises(ValueError, match='pivot'):
            zslgan.vp_loss(graph, graph.constant(np.zeros((1, 2))), [4],
                           zslgan.VisualPivots({1: np.zeros(2)}))


class TestSynthesizeFeatures:

    def test_single_draw_matches_generator(self):
        model = small_model(np.random.default_rng(9))
        text = np.linspace(0, 1, 5)
        z = np.random.default_rng(11).standard_normal((1, 4))
        np.testing.assert_array_equal(zslgan.synthesize_features(model, text, 1, 11),
                                      zslgan.generator_forward(model, text, z))

    def test_many_draws_stay_in_range(self):
        model = small_model(np.random.default_rng(9))
        samples = zslgan.synthesize_features(model, np.ones(5), 1000, 3)
        assert samples.shape == (1000, 3)
        assert np.all(np.abs(samples.mean(axis=0)) < 1)

    def test_seeds(self):
        model = small_model(np.random.default_rng(9))
        first = zslgan.synthesize_features(model, np.ones(5), 10, 1)
        np.testing.assert_array_equal(first, zslgan.synthesize_features(model, np.ones(5), 10, 1))
        assert not np.array_equal(first, zslgan.synthesize_features(model, np.ones(5), 10, 2))

    def test_needs_at_least_one(self):
        model = small_model(np.random.default_rng(9))
        with pytest.raises(ValueError):
            zslgan.synthesize_features(model, np.ones(5), 0, 1)


class TestTrain:

    def test_zero_steps_keep_the_initialization(self):
        config = zslgan.TrainConfig(**SMALL, steps=0, seed=3)
        data = zslgan.prepare_training(two_class_bundle(), config)
        result = zslgan.fit(data, config)
        initial = zslgan.init_model(config, data.text_dim, 2, [1, 2], np.random.default_rng(3))
        for name, value in initial.generator.named().items():
            np.testing.assert_array_equal(result.model.generator.named()[name], value)
        assert result.history == []

    def test_same_seed_same_history(self):
        config = zslgan.TrainConfig(**SMALL, steps=5)
        first = zslgan.train(two_class_bundle(), config)
        second = zslgan.train(two_class_bundle(), config)
        assert first.history == second.history
        assert len(first.history) == 5
        assert [r.step for r in first.history] == [1, 2, 3, 4, 5]
        assert all(r.wall_ms == 0.0 for r in first.history)

    def test_model_provenance(self):
        result = zslgan.train(two_class_bundle(), zslgan.TrainConfig(**SMALL, steps=1))
        model = result.model
        assert model.classes == [1, 2]
        assert model.dataset == 'twoclass'
        assert len(model.vocabulary_digest) == 64
        assert model.scaler is not None

    def test_vp_only_skips_the_critic(self):
        result = zslgan.train(two_class_bundle(), zslgan.TrainConfig(**SMALL, steps=3, ablation='vp-only'))
        assert all(r.loss_d == 0.0 and r.loss_g == 0.0 for r in result.history)
        assert all(r.loss_e > 0.0 for r in result.history)

    @pytest.mark.parametrize('ablation,critic_updates', [('none', 4 * 3), ('gan-only', 4 * 3), ('vp-only', 0)])
    def test_optimizer_step_counts(self, ablation, critic_updates):
        result = zslgan.train(two_class_bundle(), zslgan.TrainConfig(**{**SMALL, 'n_d': 3}, steps=4,
                                                                      ablation=ablation))
        assert result.d_state.step_count == critic_updates
        assert result.g_state.step_count == 4
        assert set(result.g_state.first_moment) == set(result.model.generator.named())

    def test_gan_only_model_records_zero_weight(self):
        result = zslgan.train(two_class_bundle(), zslgan.TrainConfig(**SMALL, steps=1, ablation='gan-only'))
        assert result.model.config.lambda_p == 0.0

    def test_without_text_layer(self):
        result = zslgan.train(two_class_bundle(), zslgan.TrainConfig(**SMALL, steps=1, text_fc=False))
        assert result.model.generator.fc_text is None

    def test_non_finite_loss_aborts(self):
        config = zslgan.TrainConfig(**SMALL, steps=2)
        data = zslgan.prepare_training(two_class_bundle(), config)
        data.features[:] = np.nan
        with pytest.raises(NumericalError, match='loop 1'):
            zslgan.fit(data, config)

    def test_regularizer_pulls_generated_means_to_pivots(self):
        bundle = two_class_bundle()
        config = zslgan.TrainConfig(**SMALL, ablation='vp-only', alpha=0.005, steps=0)
        data = zslgan.prepare_training(bundle, config)
        pivots = zslgan.compute_visual_pivots(data.features, data.labels)
        before = zslgan.pivot_distance(zslgan.fit(data, config).model, data.texts, pivots)
        trained = zslgan.fit(data, dataclasses.replace(config, steps=500)).model
        after = zslgan.pivot_distance(trained, data.texts, pivots)
        assert after <= 0.2 * before


class TestModelFile:

    def test_round_trip(self, tmp_path):
        model = zslgan.train(two_class_bundle(), zslgan.TrainConfig(**SMALL, steps=2)).model
        path = tmp_path / 'model.json'
        zslgan.save_model(path, model)
        loaded = zslgan.load_model(path)
        assert loaded.config == model.config
        assert loaded.classes == model.classes
        assert loaded.scaler == model.scaler
        for name, value in model.generator.named().items():
            np.testing.assert_array_equal(loaded.generator.named()[name], value)
        for name, value in model.discriminator.named().items():
            np.testing.assert_array_equal(loaded.discriminator.named()[name], value)
        zslgan.save_model(tmp_path / 'again.json', loaded)
        assert (tmp_path / 'again.json').read_bytes() == path.read_bytes()

    def test_not_a_model(self, tmp_path):
        path = tmp_path / 'model.json'
        path.write_text('{"format_version": 99}')
        with pytest.raises(ConfigError, match='unsupported'):
            zslgan.load_model(path)
        path.write_text('garbage')
        with pytest.raises(ConfigError):
            zslgan.load_model(path)

    def test_history_file(self, tmp_path):
        config = zslgan.TrainConfig(**SMALL, steps=3)
        result = zslgan.train(two_class_bundle(), config)
        path = tmp_path / 'losses.csv'
        zslgan.write_history(path, result.history, result.model.config)
        lines = path.read_text().splitlines()
        assert lines[0] == f'# config_digest={zslgan.config_digest(result.model.config)} seed=0'
        assert lines[1] == 'step,L_D,L_G,L_e,wall_ms'
        assert len(lines) == 5
        assert lines[2].startswith('1,') and lines[2].endswith(',0.0')


@pytest.mark.slow
class TestBenchmarkTraining:

    def test_pivot_distance_shrinks(self):
        bundle = zsldata.generate_synthetic(zsldata.SyntheticSpec()).bundle
        config = zslgan.TrainConfig(steps=0)
        data = zslgan.prepare_training(bundle, config)
        pivots = zslgan.compute_visual_pivots(data.features, data.labels)
        before = zslgan.pivot_distance(zslgan.fit(data, config).model, data.texts, pivots)
        trained = zslgan.fit(data, dataclasses.replace(config, steps=2000)).model
        after = zslgan.pivot_distance(trained, data.texts, pivots)
        assert after <= 0.2 * before
