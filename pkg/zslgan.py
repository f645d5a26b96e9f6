#!/usr/bin/env python3

# Text conditioned feature generator for zero-shot recognition.
#
# The generator maps a TF-IDF vector (through a noise suppressing FC layer)
# together with Gaussian noise to a visual feature. The discriminator has a
# shared ReLU layer and two heads: a Wasserstein critic score and a
# classifier over the seen classes. Training alternates n_d critic updates
# (Wasserstein loss, gradient penalty, classification) with one generator
# update (Wasserstein loss, classification, visual pivot regularizer).
#
# SPDX-License-Identifier: GPL-3.0-only

import csv
import dataclasses
import json
import logging
import math
import time
from dataclasses import dataclass, field

import numpy as np
from dataclasses_json import dataclass_json

import zsldata
import zsltext
from zslautodiff import (AdamState, Graph, adam_step, backward, central_difference,
                         input_gradient, relative_error)
from zslerrors import ConfigError, NumericalError, ShapeError

logger = logging.getLogger(__name__)

MODEL_FORMAT_VERSION = 1

ABLATIONS = ('none', 'gan-only', 'vp-only')
VP_DISTANCES = ('squared', 'euclidean')


@dataclass_json
@dataclass
class TrainConfig:
    '''Default training configuration'''
    n_d: int = 5
    batch_size: int = 64
    g_batch_size: int = 256
    steps: int = 2000
    alpha: float = 0.001
    beta1: float = 0.5
    beta2: float = 0.9
    epsilon: float = 1e-8
    lambda_p: float = 1.0
    gp_coeff: float = 10.0
    z_dim: int = 100
    # 0 picks 1000 for large vocabularies and up to 128 otherwise
    d_text: int = 0
    h_g: int = 256
    h_d: int = 256
    leaky_slope: float = 0.2
    seed: int = 0
    text_fc: bool = True
    ablation: str = 'none'
    vp_distance: str = 'squared'
    seen_holdout: float = 0.2
    progress_every: int = 50
    wall_clock: bool = False

    def validate(self):
        positive = {'n_d': self.n_d, 'batch_size': self.batch_size,
                    'g_batch_size': self.g_batch_size, 'z_dim': self.z_dim,
                    'h_g': self.h_g, 'h_d': self.h_d, 'progress_every': self.progress_every}
        for key, value in positive.items():
            if value < 1:
                raise ConfigError(f'{key} must be at least 1, got {value}')
        if self.steps < 0 or self.d_text < 0:
            raise ConfigError('steps and d_text cannot be negative')
        if self.alpha <= 0 or self.epsilon <= 0:
            raise ConfigError('alpha and epsilon must be positive')
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise ConfigError('beta1 and beta2 must lie in [0, 1)')
        if self.lambda_p < 0 or self.gp_coeff < 0 or self.leaky_slope < 0:
            raise ConfigError('loss weights and the leaky slope cannot be negative')
        if self.ablation not in ABLATIONS:
            raise ConfigError(f'unknown ablation {self.ablation}, expected one of {", ".join(ABLATIONS)}')
        if self.vp_distance not in VP_DISTANCES:
            raise ConfigError(f'unknown vp_distance {self.vp_distance}')
        if not 0 <= self.seen_holdout < 1:
            raise ConfigError('seen_holdout must lie in [0, 1)')
        if self.ablation == 'vp-only' and self.lambda_p == 0:
            raise ConfigError('vp-only training needs a positive lambda_p')

    def resolved(self):
        '''Validated copy with the ablation applied to the loss weights'''
        self.validate()
        if self.ablation == 'gan-only':
            return dataclasses.replace(self, lambda_p=0.0)
        return dataclasses.replace(self)

    def text_width(self, text_dim):
        if not self.text_fc:
            return text_dim
        if self.d_text:
            return self.d_text
        return 1000 if text_dim > 2000 else min(text_dim, 128)


@dataclass
class Dense:
    weight: np.ndarray
    bias: np.ndarray


@dataclass
class GeneratorParams:
    fc_text: Dense | None
    fc_hidden: Dense
    fc_out: Dense

    def named(self):
        return _named(self, ('fc_text', 'fc_hidden', 'fc_out'))

    @classmethod
    def from_named(cls, values):
        return cls(**_layers(values, ('fc_text', 'fc_hidden', 'fc_out')))


@dataclass
class DiscriminatorParams:
    fc_shared: Dense
    head_real: Dense
    head_cls: Dense

    def named(self):
        return _named(self, ('fc_shared', 'head_real', 'head_cls'))

    @classmethod
    def from_named(cls, values):
        return cls(**_layers(values, ('fc_shared', 'head_real', 'head_cls')))


def _named(params, layers):
    values = {}
    for layer in layers:
        dense = getattr(params, layer)
        if dense is not None:
            values[f'{layer}.weight'] = dense.weight
            values[f'{layer}.bias'] = dense.bias
    return values


def _layers(values, layers):
    result = {}
    for layer in layers:
        if f'{layer}.weight' in values:
            result[layer] = Dense(np.asarray(values[f'{layer}.weight']), np.asarray(values[f'{layer}.bias']))
        else:
            result[layer] = None
    return result


@dataclass
class VisualPivots:
    '''Per-class mean of the real training features'''
    vectors: dict[int, np.ndarray]

    def __contains__(self, class_id):
        return class_id in self.vectors

    def __getitem__(self, class_id):
        return self.vectors[class_id]

    @property
    def classes(self):
        return sorted(self.vectors)


@dataclass
class GanModel:
    config: TrainConfig
    generator: GeneratorParams
    discriminator: DiscriminatorParams
    # seen classes in the order of the classifier head
    classes: list[int]
    text_dim: int
    x_dim: int
    scaler: zsldata.FeatureScaler | None = None
    vocabulary_digest: str = ''
    dataset: str = ''


@dataclass
class LossRecord:
    step: int
    loss_d: float
    loss_g: float
    loss_e: float
    wall_ms: float = 0.0


@dataclass
class TrainingData:
    features: np.ndarray
    labels: np.ndarray
    texts: dict[int, np.ndarray]
    classes: list[int]
    scaler: zsldata.FeatureScaler | None = None
    vocabulary_digest: str = ''
    dataset: str = ''

    @property
    def text_dim(self):
        return len(next(iter(self.texts.values())))


@dataclass
class TrainResult:
    model: GanModel
    history: list[LossRecord] = field(default_factory=list)
    d_state: AdamState | None = None
    g_state: AdamState | None = None


def _glorot(rng, fan_in, fan_out):
    limit = math.sqrt(6.0 / (fan_in + fan_out))
    return Dense(rng.uniform(-limit, limit, size=(fan_in, fan_out)), np.zeros(fan_out))


def init_model(config, text_dim, x_dim, classes, rng):
    '''Freshly initialized generator and discriminator'''
    width = config.text_width(text_dim)
    generator = GeneratorParams(
        fc_text=_glorot(rng, text_dim, width) if config.text_fc else None,
        fc_hidden=_glorot(rng, width + config.z_dim, config.h_g),
        fc_out=_glorot(rng, config.h_g, x_dim))
    discriminator = DiscriminatorParams(
        fc_shared=_glorot(rng, x_dim, config.h_d),
        head_real=_glorot(rng, config.h_d, 1),
        head_cls=_glorot(rng, config.h_d, len(classes)))
    return GanModel(config=config, generator=generator, discriminator=discriminator,
                    classes=list(classes), text_dim=text_dim, x_dim=x_dim)


def leaves(graph, named, trainable=True):
    '''Put named arrays into a graph, as parameters or as constants'''
    if trainable:
        return {name: graph.parameter(value, name) for name, value in named.items()}
    return {name: graph.constant(value) for name, value in named.items()}


def _dense(graph, params, layer, x):
    return graph.bias_add(graph.matmul(x, params[f'{layer}.weight']), params[f'{layer}.bias'])


def generator_graph(graph, params, text, z, slope=0.2):
    hidden = text
    if 'fc_text.weight' in params:
        hidden = _dense(graph, params, 'fc_text', text)
    hidden = graph.leaky_relu(_dense(graph, params, 'fc_hidden', graph.concat_cols(hidden, z)), slope)
    return graph.tanh(_dense(graph, params, 'fc_out', hidden))


def discriminator_graph(graph, params, x):
    '''Returns (critic scores of shape (m,), class logits of shape (m, C))'''
    hidden = graph.relu(_dense(graph, params, 'fc_shared', x))
    scores = graph.row_sum(_dense(graph, params, 'head_real', hidden))
    logits = _dense(graph, params, 'head_cls', hidden)
    return scores, logits


def _as_rows(value, width, what):
    if isinstance(value, zsltext.TfIdfVector):
        value = value.to_dense()
    array = np.asarray(value, dtype=np.float64)
    if array.ndim == 1:
        array = array[None, :]
    if array.ndim != 2 or array.shape[1] != width:
        raise ShapeError(f'{what} has shape {np.shape(value)}, expected width {width}')
    return array


def generator_forward(model, text_vec, z):
    '''Generated feature(s) for text vector(s) and noise vector(s)'''
    single = np.ndim(z) == 1
    text = _as_rows(text_vec, model.text_dim, 'text vector')
    noise = _as_rows(z, model.config.z_dim, 'noise vector')
    if text.shape[0] == 1 and noise.shape[0] > 1:
        text = np.repeat(text, noise.shape[0], axis=0)
    if text.shape[0] != noise.shape[0]:
        raise ShapeError(f'{text.shape[0]} text vectors but {noise.shape[0]} noise vectors')
    graph = Graph()
    out = generator_graph(graph, leaves(graph, model.generator.named(), False),
                          graph.constant(text), graph.constant(noise), model.config.leaky_slope)
    return out.value[0] if single else np.array(out.value)


def discriminator_forward(model, x):
    '''(critic score, class logits) for feature vector(s) x'''
    single = np.ndim(x) == 1
    features = _as_rows(x, model.x_dim, 'feature vector')
    graph = Graph()
    scores, logits = discriminator_graph(graph, leaves(graph, model.discriminator.named(), False),
                                         graph.constant(features))
    if single:
        return float(scores.value[0]), np.array(logits.value[0])
    return np.array(scores.value), np.array(logits.value)


def loss_generator(graph, fake_scores, fake_logits, labels):
    '''L_G = -mean(critic(fake)) + cross entropy of the fake logits'''
    if len(labels) == 0:
        raise ValueError('loss_generator: empty batch')
    wasserstein = graph.affine(graph.mean(fake_scores), -1.0)
    return graph.add(wasserstein, graph.mean(graph.softmax_cross_entropy(fake_logits, labels)))


def gradient_penalty(graph, params, interpolates, gp_coeff):
    '''gp_coeff * mean((|grad critic(x)| - 1)^2) over the interpolates'''
    scores, _ = discriminator_graph(graph, params, interpolates)
    grad = input_gradient(graph, graph.sum(scores), interpolates)
    deviation = graph.affine(graph.sqrt(graph.sq_norm_rows(grad)), 1.0, -1.0)
    return graph.affine(graph.mean(graph.mul(deviation, deviation)), gp_coeff)


def loss_discriminator(graph, params, real, fake, labels, gp_coeff, epsilon):
    '''L_D = mean critic(fake) - mean critic(real) + penalty + mean classification loss.
    epsilon holds one interpolation weight per (real, fake) pair.'''
    real = np.asarray(real, dtype=np.float64)
    fake = np.asarray(fake, dtype=np.float64)
    if real.shape != fake.shape:
        raise ValueError(f'loss_discriminator: real batch {real.shape} and fake batch {fake.shape} differ')
    if real.shape[0] == 0:
        raise ValueError('loss_discriminator: empty batch')
    epsilon = np.asarray(epsilon, dtype=np.float64).reshape(-1, 1)
    real_scores, real_logits = discriminator_graph(graph, params, graph.constant(real))
    fake_scores, fake_logits = discriminator_graph(graph, params, graph.constant(fake))
    interpolates = graph.constant(epsilon * real + (1.0 - epsilon) * fake)

    wasserstein = graph.sub(graph.mean(fake_scores), graph.mean(real_scores))
    penalty = gradient_penalty(graph, params, interpolates, gp_coeff)
    classification = graph.affine(graph.add(
        graph.mean(graph.softmax_cross_entropy(fake_logits, labels)),
        graph.mean(graph.softmax_cross_entropy(real_logits, labels))), 0.5)
    return graph.add(graph.add(wasserstein, penalty), classification)


def vp_loss(graph, generated, labels, pivots, distance='squared'):
    '''Mean over the classes in the batch of the distance between the
    generated class mean and the class pivot'''
    labels = np.asarray(labels)
    present = sorted(set(labels.tolist()))
    if not present:
        raise ValueError('vp_loss: empty batch')
    missing = [c for c in present if c not in pivots]
    if missing:
        raise ValueError(f'vp_loss: no visual pivot for classes {missing}')
    grouping = np.zeros((len(present), len(labels)))
    for row, class_id in enumerate(present):
        members = labels == class_id
        grouping[row, members] = 1.0 / members.sum()
    means = graph.matmul(graph.constant(grouping), generated)
    offsets = graph.sub(means, graph.constant(np.stack([pivots[c] for c in present])))
    distances = graph.sq_norm_rows(offsets)
    if distance == 'euclidean':
        distances = graph.sqrt(distances)
    return graph.mean(distances)


def compute_visual_pivots(features, labels, classes=None):
    features = np.asarray(features, dtype=np.float64)
    labels = np.asarray(labels)
    if classes is None:
        classes = sorted(set(labels.tolist()))
    vectors = {}
    empty = []
    for class_id in classes:
        members = labels == class_id
        if not members.any():
            empty.append(class_id)
            continue
        vectors[class_id] = features[members].mean(axis=0)
    if empty:
        logger.warning('no training instances for classes %s, no pivot computed', empty)
    return VisualPivots(vectors)


def synthesize_features(model, text_vec, n, seed):
    '''n generated features for one class, noise drawn from a seeded stream'''
    if n < 1:
        raise ValueError('synthesize_features: n must be at least 1')
    rng = np.random.default_rng(seed)
    z = rng.standard_normal((n, model.config.z_dim))
    return generator_forward(model, text_vec, z)


def pivot_distance(model, texts, pivots, n=60, seed=0):
    '''Mean Euclidean distance between generated class means and pivots'''
    gaps = [np.linalg.norm(synthesize_features(model, texts[c], n, seed).mean(axis=0) - pivots[c])
            for c in pivots.classes]
    return float(np.mean(gaps))


def prepare_training(bundle, config, stoplist=None):
    '''Encode the articles, hold out part of every seen class and scale the
    remaining seen features'''
    if stoplist is None:
        stoplist = zsltext.load_stoplist()
    vocab, vectors = zsltext.encode_corpus(bundle.documents, bundle.seen, stoplist)
    train_rows, _ = zsldata.holdout_split(bundle.labels, bundle.seen, config.seen_holdout)
    if len(train_rows) == 0:
        raise ConfigError('no seen-class instances to train on')
    scaler = zsldata.fit_scaler(bundle.features[train_rows])
    features, _ = scaler.apply(bundle.features[train_rows])
    return TrainingData(features=features, labels=bundle.labels[train_rows],
                        texts={c: v.to_dense() for c, v in vectors.items()},
                        classes=sorted(bundle.seen), scaler=scaler,
                        vocabulary_digest=vocab.digest(), dataset=bundle.name)


def _finite(step, name, tensor):
    value = float(tensor.value)
    if not math.isfinite(value):
        raise NumericalError(f'loop {step}: {name} is not finite ({value})')
    return value


def fit(data, config):
    '''Alternating critic / generator training on prepared data'''
    config = config.resolved()
    rng = np.random.default_rng(config.seed)
    classes = np.array(sorted(data.classes))
    model = init_model(config, data.text_dim, data.features.shape[1], classes.tolist(), rng)
    model.scaler = data.scaler
    model.vocabulary_digest = data.vocabulary_digest
    model.dataset = data.dataset

    text_matrix = {c: data.texts[c] for c in data.classes}
    pivots = compute_visual_pivots(data.features, data.labels, data.classes)
    g_params = model.generator.named()
    d_params = model.discriminator.named()
    d_state = AdamState(config.alpha, config.beta1, config.beta2, config.epsilon)
    g_state = AdamState(config.alpha, config.beta1, config.beta2, config.epsilon)
    slope = config.leaky_slope
    adversarial = config.ablation != 'vp-only'
    history = []

    for step in range(1, config.steps + 1):
        started = time.perf_counter() if config.wall_clock else 0.0

        loss_d = 0.0
        if adversarial:
            for _ in range(config.n_d):
                rows = rng.integers(0, len(data.labels), size=config.batch_size)
                labels = data.labels[rows]
                z = rng.standard_normal((config.batch_size, config.z_dim))
                graph = Graph()
                fake = generator_graph(graph, leaves(graph, g_params, False),
                                       graph.constant(np.stack([text_matrix[c] for c in labels])),
                                       graph.constant(z), slope).value
                epsilon = rng.uniform(size=config.batch_size)
                graph = Graph()
                loss = loss_discriminator(graph, leaves(graph, d_params), data.features[rows], fake,
                                          np.searchsorted(classes, labels), config.gp_coeff, epsilon)
                loss_d += _finite(step, 'L_D', loss) / config.n_d
                d_params, d_state = adam_step(d_params, backward(graph, loss), d_state)

        labels = classes[rng.integers(0, len(classes), size=config.g_batch_size)]
        z = rng.standard_normal((config.g_batch_size, config.z_dim))
        graph = Graph()
        fake = generator_graph(graph, leaves(graph, g_params),
                               graph.constant(np.stack([text_matrix[c] for c in labels])),
                               graph.constant(z), slope)
        regularizer = vp_loss(graph, fake, labels, pivots, config.vp_distance)
        total = graph.affine(regularizer, config.lambda_p)
        loss_g = 0.0
        if adversarial:
            scores, logits = discriminator_graph(graph, leaves(graph, d_params, False), fake)
            generator_loss = loss_generator(graph, scores, logits, np.searchsorted(classes, labels))
            loss_g = _finite(step, 'L_G', generator_loss)
            total = graph.add(generator_loss, total)
        loss_e = _finite(step, 'L_e', regularizer)
        _finite(step, 'generator objective', total)
        g_params, g_state = adam_step(g_params, backward(graph, total), g_state)

        wall_ms = (time.perf_counter() - started) * 1000.0 if config.wall_clock else 0.0
        history.append(LossRecord(step, loss_d, loss_g, loss_e, wall_ms))
        if step % config.progress_every == 0:
            logger.info('loop %d/%d  L_D %.4f  L_G %.4f  L_e %.4f',
                        step, config.steps, loss_d, loss_g, loss_e)

    model.generator = GeneratorParams.from_named(g_params)
    model.discriminator = DiscriminatorParams.from_named(d_params)
    return TrainResult(model=model, history=history, d_state=d_state, g_state=g_state)


def train(dataset, config, stoplist=None):
    '''Train on the seen classes of a dataset bundle'''
    data = prepare_training(dataset, config.resolved(), stoplist)
    return fit(data, config)


def config_digest(config):
    return zsldata.digest(config.to_dict())


def save_model(path, model):
    parameters = {}
    for part, named in (('generator', model.generator.named()),
                        ('discriminator', model.discriminator.named())):
        for name, value in named.items():
            parameters[f'{part}.{name}'] = {'shape': list(value.shape),
                                            'values': np.ravel(value).tolist()}
    payload = {
        'format_version': MODEL_FORMAT_VERSION,
        'config': model.config.to_dict(),
        'config_digest': config_digest(model.config),
        'dataset': model.dataset,
        'classes': [int(c) for c in model.classes],
        'text_dim': model.text_dim,
        'x_dim': model.x_dim,
        'scaler': model.scaler.to_dict() if model.scaler is not None else None,
        'vocabulary_digest': model.vocabulary_digest,
        'parameters': parameters,
    }
    with open(path, 'w', encoding='utf-8') as open_file:
        json.dump(payload, open_file, sort_keys=True)
        open_file.write('\n')


def load_model(path):
    try:
        with open(path, 'r', encoding='utf-8') as open_file:
            payload = json.load(open_file)
    except OSError as e:
        raise ConfigError(f'cannot read model {path}: {e.strerror}') from e
    except json.JSONDecodeError as e:
        raise ConfigError(f'{path} is not a model file: {e.msg}') from e
    except UnicodeDecodeError as e:
        raise ConfigError(f'{path} is not a model file: {e.reason}') from e
    if payload.get('format_version') != MODEL_FORMAT_VERSION:
        raise ConfigError(f'{path}: unsupported model format {payload.get("format_version")}')
    generator = {}
    discriminator = {}
    for key, entry in payload['parameters'].items():
        value = np.array(entry['values'], dtype=np.float64).reshape(entry['shape'])
        part, name = key.split('.', 1)
        (generator if part == 'generator' else discriminator)[name] = value
    scaler = payload['scaler']
    return GanModel(config=TrainConfig.from_dict(payload['config']),
                    generator=GeneratorParams.from_named(generator),
                    discriminator=DiscriminatorParams.from_named(discriminator),
                    classes=payload['classes'], text_dim=payload['text_dim'], x_dim=payload['x_dim'],
                    scaler=zsldata.FeatureScaler.from_dict(scaler) if scaler is not None else None,
                    vocabulary_digest=payload['vocabulary_digest'], dataset=payload['dataset'])


def write_history(path, history, config):
    with open(path, 'w', encoding='utf-8', newline='') as open_file:
        open_file.write(f'# config_digest={config_digest(config)} seed={config.seed}\n')
        writer = csv.writer(open_file, lineterminator='\n')
        writer.writerow(['step', 'L_D', 'L_G', 'L_e', 'wall_ms'])
        for record in history:
            writer.writerow([record.step, repr(record.loss_d), repr(record.loss_g),
                             repr(record.loss_e), repr(record.wall_ms)])


# tolerances of the finite difference check of the training losses
LOSS_TOLERANCES = {'L_G': 1e-4, 'L_e': 1e-4, 'L_D': 1e-3, 'penalty': 1e-3}


def check_loss_gradients(rng, h=1e-5):
    '''Relative error between backward() and central differences for the
    training losses on a small random model'''
    config = TrainConfig(z_dim=3, d_text=3, h_g=5, h_d=4)
    classes = [1, 2, 3]
    model = init_model(config, 6, 4, classes, rng)
    batch = 5
    heads = rng.integers(0, len(classes), size=batch)
    labels = np.array(classes)[heads]
    text = rng.uniform(0.0, 1.0, size=(batch, 6))
    z = rng.standard_normal((batch, config.z_dim))
    real = rng.uniform(-0.9, 0.9, size=(batch, 4))
    fake = rng.uniform(-0.9, 0.9, size=(batch, 4))
    epsilon = rng.uniform(size=batch)
    pivots = VisualPivots({c: rng.uniform(-0.5, 0.5, size=4) for c in classes})
    g_named = model.generator.named()
    d_named = model.discriminator.named()

    def generator_loss(name, values):
        graph = Graph()
        generated = generator_graph(graph, leaves(graph, values), graph.constant(text),
                                    graph.constant(z), config.leaky_slope)
        if name == 'L_e':
            return graph, vp_loss(graph, generated, labels, pivots)
        scores, logits = discriminator_graph(graph, leaves(graph, d_named, False), generated)
        return graph, loss_generator(graph, scores, logits, heads)

    def discriminator_loss(name, values):
        graph = Graph()
        params = leaves(graph, values)
        if name == 'penalty':
            interpolates = graph.constant(epsilon[:, None] * real + (1 - epsilon[:, None]) * fake)
            return graph, gradient_penalty(graph, params, interpolates, config.gp_coeff)
        return graph, loss_discriminator(graph, params, real, fake, heads, config.gp_coeff, epsilon)

    checks = {'L_G': (generator_loss, g_named), 'L_e': (generator_loss, g_named),
              'L_D': (discriminator_loss, d_named), 'penalty': (discriminator_loss, d_named)}
    errors = {}
    for name, (build, named) in checks.items():
        graph, loss = build(name, named)
        analytic = backward(graph, loss)
        analytic_parts = []
        numeric_parts = []
        for param in named:
            def scalar(x, param=param):
                values = dict(named)
                values[param] = x
                return float(build(name, values)[1].value)
            analytic_parts.append(np.ravel(analytic[param]))
            numeric_parts.append(np.ravel(central_difference(scalar, named[param], h)))
        errors[name] = relative_error(np.concatenate(analytic_parts), np.concatenate(numeric_parts))
    return errors
