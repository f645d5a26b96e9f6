#!/usr/bin/env python3

# Dataset handling for the zero-shot GAN: loading and validating a dataset
# directory, the per-dimension feature scaler and the synthetic benchmark
# generator.
#
# A dataset directory contains:
#
#   features.bin or features.csv   one row of visual features per instance
#   labels.csv                     instance_id,class_id
#   docs/<class_id>.txt            one article per class
#   split.json                     {"seen": [...], "unseen": [...], "style": "SCS"}
#
# SPDX-License-Identifier: GPL-3.0-only

import csv
import hashlib
import json
import logging
import math
import pathlib
import struct
from dataclasses import dataclass, field

import numpy as np
from dataclasses_json import dataclass_json

import zsltext
from zslerrors import DatasetError, ValidationError

logger = logging.getLogger(__name__)

FEATURES_MAGIC = b'ZSLF'
FEATURES_VERSION = 1
FEATURES_HEADER = struct.Struct('<4sIII')

# scaled features live in [-SCALE_LIMIT, SCALE_LIMIT]
SCALE_LIMIT = 0.95


@dataclass
class DatasetBundle:
    features: np.ndarray
    labels: np.ndarray
    documents: dict[int, zsltext.Document]
    seen: list[int]
    unseen: list[int]
    name: str
    style: str = 'SCS'

    @property
    def classes(self):
        return sorted(self.seen + self.unseen)

    def instances_of(self, classes):
        '''Row indices of all instances whose label is in classes'''
        return np.flatnonzero(np.isin(self.labels, list(classes)))


@dataclass_json
@dataclass
class FeatureScaler:
    '''Per-dimension affine map y = (x - offset) * scale'''
    offset: list[float]
    scale: list[float]

    def apply(self, features, clamp=True):
        '''Scale features. Returns the scaled array and the number of clamped entries.'''
        scaled = (np.asarray(features, dtype=np.float64) - np.asarray(self.offset)) * np.asarray(self.scale)
        if not clamp:
            return scaled, 0
        # rounding at the ends of the training range is not counted
        outside = np.abs(scaled) > SCALE_LIMIT + 1e-9
        clamped = int(np.count_nonzero(outside))
        return np.clip(scaled, -SCALE_LIMIT, SCALE_LIMIT), clamped

    def invert(self, scaled):
        return np.asarray(scaled) / np.asarray(self.scale) + np.asarray(self.offset)


def fit_scaler(features):
    '''Fit a scaler mapping every dimension of features into [-0.95, 0.95]'''
    features = np.asarray(features, dtype=np.float64)
    if features.ndim != 2 or features.shape[0] == 0:
        raise ValidationError('cannot fit a feature scaler on an empty feature set')
    low = features.min(axis=0)
    high = features.max(axis=0)
    span = high - low
    constant = span == 0
    if constant.any():
        logger.warning('constant feature dimensions %s are mapped to 0',
                       np.flatnonzero(constant).tolist())
    offset = np.where(constant, low, (high + low) / 2)
    scale = np.where(constant, 1.0, 2 * SCALE_LIMIT / np.where(constant, 1.0, span))
    return FeatureScaler(offset=offset.tolist(), scale=scale.tolist())


def digest(payload):
    '''SHA-256 over the canonical JSON form of payload'''
    return hashlib.sha256(json.dumps(payload, sort_keys=True).encode()).hexdigest()


def holdout_split(labels, classes, fraction):
    '''Split the instances of classes into (train, held out) row indices.
    The last ceil(fraction * n) instances of every class are held out,
    always keeping at least one for training.'''
    train = []
    held = []
    for class_id in classes:
        rows = np.flatnonzero(labels == class_id)
        count = min(math.ceil(fraction * len(rows)), max(len(rows) - 1, 0))
        train.extend(rows[:len(rows) - count])
        held.extend(rows[len(rows) - count:])
    return np.array(sorted(train), dtype=np.int64), np.array(sorted(held), dtype=np.int64)


def read_features(path):
    '''Read a features file, binary or CSV depending on the extension'''
    path = pathlib.Path(path)
    if path.suffix == '.csv':
        try:
            return np.loadtxt(path, delimiter=',', ndmin=2, dtype=np.float64)
        except ValueError as e:
            raise DatasetError(path, f'unparseable feature value: {e}') from e
    data = path.read_bytes()
    if len(data) < FEATURES_HEADER.size:
        raise DatasetError(path, 'truncated header')
    magic, version, rows, dim = FEATURES_HEADER.unpack_from(data)
    if magic != FEATURES_MAGIC:
        raise DatasetError(path, 'not a features file (bad magic)')
    if version != FEATURES_VERSION:
        raise DatasetError(path, f'unsupported features version {version}')
    expected = FEATURES_HEADER.size + rows * dim * 8
    if len(data) != expected:
        raise DatasetError(path, f'expected {expected} bytes for {rows} x {dim} values, found {len(data)}')
    values = np.frombuffer(data, dtype='<f8', offset=FEATURES_HEADER.size)
    return values.reshape(rows, dim).astype(np.float64)


def write_features(path, features):
    path = pathlib.Path(path)
    features = np.asarray(features, dtype=np.float64)
    if path.suffix == '.csv':
        np.savetxt(path, features, delimiter=',', fmt='%.17g')
        return
    rows, dim = features.shape
    with open(path, 'wb') as open_file:
        open_file.write(FEATURES_HEADER.pack(FEATURES_MAGIC, FEATURES_VERSION, rows, dim))
        open_file.write(features.astype('<f8').tobytes())


def _read_split(path):
    try:
        with open(path, 'r', encoding='utf-8') as open_file:
            split = json.load(open_file)
    except OSError as e:
        raise DatasetError(path, f'cannot read split file: {e.strerror}') from e
    except UnicodeDecodeError as e:
        raise DatasetError(path, f'not UTF-8 text: {e.reason}') from e
    except json.JSONDecodeError as e:
        raise DatasetError(path, f'invalid JSON: {e.msg}', e.lineno) from e
    try:
        seen = [int(c) for c in split['seen']]
        unseen = [int(c) for c in split['unseen']]
    except (KeyError, TypeError, ValueError) as e:
        raise DatasetError(path, 'split needs "seen" and "unseen" lists of class ids') from e
    overlap = sorted(set(seen) & set(unseen))
    if overlap:
        raise DatasetError(path, f'classes {overlap} are both seen and unseen; '
                                 'seen and unseen classes must be disjoint')
    return seen, unseen, str(split.get('style', 'SCS')), split.get('name')


def _read_labels(path, known_classes):
    labels = {}
    try:
        with open(path, 'r', encoding='utf-8', newline='') as open_file:
            reader = csv.reader(open_file)
            header = next(reader, None)
            if header is None or [h.strip() for h in header] != ['instance_id', 'class_id']:
                raise DatasetError(path, 'expected header instance_id,class_id', 1)
            for row in reader:
                line = reader.line_num
                if not row:
                    continue
                try:
                    instance_id, class_id = int(row[0]), int(row[1])
                except (IndexError, ValueError):
                    raise DatasetError(path, f'malformed row {row}', line) from None
                if instance_id in labels:
                    raise DatasetError(path, f'duplicate instance {instance_id}', line)
                if class_id not in known_classes:
                    raise DatasetError(path, f'class {class_id} is neither seen nor unseen', line)
                labels[instance_id] = class_id
    except OSError as e:
        raise DatasetError(path, f'cannot read labels: {e.strerror}') from e
    except UnicodeDecodeError as e:
        raise DatasetError(path, f'not UTF-8 text: {e.reason}') from e
    if sorted(labels) != list(range(len(labels))):
        raise DatasetError(path, 'instance ids must be 0 .. N-1')
    return np.array([labels[i] for i in range(len(labels))], dtype=np.int64)


def load_dataset(root):
    '''Load and validate a dataset directory'''
    root = pathlib.Path(root)
    if not root.is_dir():
        raise DatasetError(root, 'not a dataset directory')
    seen, unseen, style, name = _read_split(root / 'split.json')
    classes = set(seen) | set(unseen)

    features_file = root / 'features.bin'
    if not features_file.exists():
        features_file = root / 'features.csv'
    if not features_file.exists():
        raise DatasetError(root, 'no features.bin or features.csv')
    features = read_features(features_file)

    labels_file = root / 'labels.csv'
    labels = _read_labels(labels_file, classes)
    if len(labels) != features.shape[0]:
        raise DatasetError(features_file, f'{features.shape[0]} feature rows '
                                          f'but {len(labels)} labels in {labels_file.name}')

    documents = {}
    for class_id in sorted(classes):
        doc_file = root / 'docs' / f'{class_id}.txt'
        try:
            with open(doc_file, 'r', encoding='utf-8', newline='') as open_file:
                documents[class_id] = zsltext.Document(class_id, open_file.read())
        except OSError:
            raise DatasetError(doc_file, f'missing document for class {class_id}') from None
        except UnicodeDecodeError as e:
            raise DatasetError(doc_file, f'not UTF-8 text: {e.reason}') from e

    for class_id in seen:
        if not np.any(labels == class_id):
            logger.warning('seen class %d has no instances', class_id)

    return DatasetBundle(features=features, labels=labels, documents=documents,
                         seen=seen, unseen=unseen, name=name or root.name, style=style)


def write_dataset(bundle, root, features_name='features.bin'):
    root = pathlib.Path(root)
    (root / 'docs').mkdir(parents=True, exist_ok=True)
    write_features(root / features_name, bundle.features)
    with open(root / 'labels.csv', 'w', encoding='utf-8', newline='') as open_file:
        writer = csv.writer(open_file, lineterminator='\n')
        writer.writerow(['instance_id', 'class_id'])
        for instance_id, class_id in enumerate(bundle.labels):
            writer.writerow([instance_id, int(class_id)])
    for class_id, doc in sorted(bundle.documents.items()):
        with open(root / 'docs' / f'{class_id}.txt', 'w', encoding='utf-8', newline='') as open_file:
            open_file.write(doc.raw_text)
    split = {'seen': bundle.seen, 'unseen': bundle.unseen, 'style': bundle.style, 'name': bundle.name}
    with open(root / 'split.json', 'w', encoding='utf-8') as open_file:
        json.dump(split, open_file, indent=2, sort_keys=True)
        open_file.write('\n')


@dataclass_json
@dataclass
class SyntheticSpec:
    '''Default synthetic benchmark: 12 seen and 8 unseen classes'''
    classes: int = 20
    seen: int = 12
    unseen: int = 8
    dim: int = 64
    mean_spread: float = 1.0
    cov_scale: float = 0.35
    # spread along one direction shared by every class
    pose_scale: float = 4.0
    samples_per_class: int = 60
    topic_vocab: int = 128
    topic_words: int = 128
    noise_rate: float = 0.5
    noise_vocab: int = 400
    parents: int = 3
    perturbation: float = 0.25
    seed: int = 7
    style: str = 'SCS'
    name: str = 'synthetic'

    def validate(self):
        counts = {'classes': self.classes, 'seen': self.seen, 'unseen': self.unseen,
                  'dim': self.dim, 'samples_per_class': self.samples_per_class,
                  'topic_vocab': self.topic_vocab, 'topic_words': self.topic_words,
                  'noise_vocab': self.noise_vocab, 'parents': self.parents}
        for key, value in counts.items():
            if value <= 0:
                raise ValidationError(f'synthetic spec: {key} must be positive, got {value}')
        if self.seen + self.unseen != self.classes:
            raise ValidationError(f'synthetic spec: seen ({self.seen}) + unseen ({self.unseen}) '
                                  f'must equal classes ({self.classes})')
        if self.parents > self.seen:
            raise ValidationError('synthetic spec: parents cannot exceed the number of seen classes')
        if not 0 <= self.noise_rate < 1:
            raise ValidationError(f'synthetic spec: noise_rate must lie in [0, 1), got {self.noise_rate}')
        if self.mean_spread <= 0 or self.cov_scale <= 0 or self.perturbation < 0 or self.pose_scale < 0:
            raise ValidationError('synthetic spec: spreads must be positive')


@dataclass
class SyntheticBenchmark:
    bundle: DatasetBundle
    cluster_means: dict[int, np.ndarray] = field(default_factory=dict)
    pose_direction: np.ndarray | None = None


CONSONANTS = 'bdfgklmnprtvz'
VOWELS = 'aiou'
FINALS = 'dklmnprt'


def _pseudo_words(rng, count, stoplist):
    '''Distinct pronounceable words that the stemmer leaves untouched'''
    words = []
    used = set()
    while len(words) < count:
        syllables = rng.integers(2, 4)
        word = ''.join(str(rng.choice(list(CONSONANTS))) + str(rng.choice(list(VOWELS)))
                       for _ in range(syllables)) + str(rng.choice(list(FINALS)))
        if word in used or word in stoplist or zsltext.porter_stem(word) != word:
            continue
        used.add(word)
        words.append(word)
    return words


def _compose_document(tokens):
    sentences = []
    for start in range(0, len(tokens), 12):
        words = tokens[start:start + 12]
        sentences.append(' '.join([words[0].capitalize()] + words[1:]) + '.')
    return '\n'.join(sentences) + '\n'


def pose_direction(seen_means):
    '''Unit leading principal direction of the seen cluster means, with its
    largest component positive'''
    centered = seen_means - seen_means.mean(axis=0)
    if not np.any(centered):
        direction = np.zeros(seen_means.shape[1])
        direction[0] = 1.0
        return direction
    direction = np.linalg.svd(centered, full_matrices=False)[2][0]
    return direction if direction[np.argmax(np.abs(direction))] > 0 else -direction


def generate_synthetic(spec, out_dir=None, stoplist=None):
    '''Gaussian clusters that share one pose direction, with text tied to the
    sign pattern of each cluster mean'''
    spec.validate()
    if stoplist is None:
        stoplist = zsltext.load_stoplist()
    word_rng, mean_rng, sample_rng, doc_rng = [
        np.random.default_rng(s) for s in np.random.SeedSequence(spec.seed).spawn(4)]

    seen = list(range(1, spec.seen + 1))
    unseen = list(range(spec.seen + 1, spec.classes + 1))

    means = {}
    for class_id in seen:
        means[class_id] = spec.mean_spread * mean_rng.standard_normal(spec.dim)
    seen_means = np.stack([means[c] for c in seen])
    for class_id in unseen:
        parents = mean_rng.choice(spec.seen, size=spec.parents, replace=False)
        weights = mean_rng.dirichlet(np.ones(spec.parents))
        mix = weights @ seen_means[parents] / np.linalg.norm(weights)
        means[class_id] = mix + spec.perturbation * spec.mean_spread * mean_rng.standard_normal(spec.dim)

    direction = pose_direction(seen_means)
    features = []
    labels = []
    for class_id in seen + unseen:
        samples = means[class_id] + spec.cov_scale * sample_rng.standard_normal(
            (spec.samples_per_class, spec.dim))
        samples += spec.pose_scale * sample_rng.standard_normal((spec.samples_per_class, 1)) * direction
        features.append(samples)
        labels.extend([class_id] * spec.samples_per_class)

    words = _pseudo_words(word_rng, spec.topic_vocab + spec.noise_vocab, stoplist)
    topic = words[:spec.topic_vocab]
    noise_pool = words[spec.topic_vocab:] + sorted(stoplist)
    noise_count = round(spec.topic_words * spec.noise_rate / (1 - spec.noise_rate))

    documents = {}
    for class_id in seen + unseen:
        signs = (means[class_id] > 0).astype(int)
        tokens = [topic[(2 * (k % spec.dim) + signs[k % spec.dim]) % spec.topic_vocab]
                  for k in range(spec.topic_words)]
        if noise_count:
            noise = list(doc_rng.choice(noise_pool, size=noise_count))
            keys = np.concatenate([np.arange(len(tokens), dtype=np.float64),
                                   doc_rng.uniform(0, len(tokens), size=noise_count)])
            merged = tokens + noise
            tokens = [str(merged[i]) for i in np.argsort(keys, kind='stable')]
        documents[class_id] = zsltext.Document(class_id, _compose_document(tokens))

    bundle = DatasetBundle(features=np.concatenate(features), labels=np.array(labels, dtype=np.int64),
                           documents=documents, seen=seen, unseen=unseen,
                           name=spec.name, style=spec.style)
    benchmark = SyntheticBenchmark(bundle=bundle, cluster_means=means, pose_direction=direction)
    if out_dir is not None:
        write_dataset(bundle, out_dir)
        with open(pathlib.Path(out_dir) / 'cluster_means.csv', 'w', encoding='utf-8', newline='') as open_file:
            writer = csv.writer(open_file, lineterminator='\n')
            for class_id, mean in sorted(means.items()):
                writer.writerow([class_id] + [repr(float(v)) for v in mean])
    return benchmark


def read_cluster_means(path):
    means = {}
    with open(path, 'r', encoding='utf-8', newline='') as open_file:
        for row in csv.reader(open_file):
            means[int(row[0])] = np.array([float(v) for v in row[1:]])
    return means
