#!/usr/bin/env python3

# Evaluation of a trained generator: zero-shot recognition by nearest
# neighbour against synthesized features, generalized zero-shot learning
# with the seen-unseen accuracy curve (calibrated stacking) and zero-shot
# retrieval with mean average precision.
#
# Distances are Euclidean throughout. Ties always go to the lowest class id.
#
# SPDX-License-Identifier: GPL-3.0-only

import csv
import logging
import math
from dataclasses import dataclass, field

import numpy as np
from dataclasses_json import dataclass_json
from scipy.spatial.distance import cdist

import zsldata
import zslgan
import zsltext
from zslerrors import ConfigError, ValidationError

logger = logging.getLogger(__name__)

NN_MODES = ('instance', 'pivot', 'both')
CALIBRATION_POINTS = 201
DENSE_CALIBRATION_POINTS = 10001


@dataclass_json
@dataclass
class EvalConfig:
    '''Default evaluation configuration'''
    nn_mode: str = 'instance'
    synth_per_class: int = 60
    seed: int = 0
    ratios: str = '0.25,0.5,1.0'
    dense_grid: bool = False

    def validate(self):
        if self.nn_mode not in NN_MODES:
            raise ConfigError(f'unknown nn_mode {self.nn_mode}, expected one of {", ".join(NN_MODES)}')
        if self.synth_per_class < 1:
            raise ConfigError('synth_per_class must be at least 1')
        self.ratio_values()

    def ratio_values(self):
        try:
            ratios = [float(r) for r in self.ratios.split(',') if r.strip()]
        except ValueError:
            raise ConfigError(f'cannot parse ratios {self.ratios!r}') from None
        for ratio in ratios:
            if not 0 < ratio <= 1:
                raise ConfigError(f'retrieval ratio {ratio} outside (0, 1]')
        if not ratios:
            raise ConfigError('no retrieval ratios given')
        return ratios

    def modes(self):
        return ['instance', 'pivot'] if self.nn_mode == 'both' else [self.nn_mode]


@dataclass
class SynthBank:
    '''Synthesized features per class'''
    vectors: dict[int, np.ndarray]

    def __post_init__(self):
        if not self.vectors:
            raise ValueError('empty synthesized feature bank')
        for class_id, vectors in self.vectors.items():
            if len(vectors) == 0:
                raise ValueError(f'no synthesized features for class {class_id}')

    @property
    def classes(self):
        return sorted(self.vectors)

    @property
    def pivots(self):
        return {c: np.asarray(v).mean(axis=0) for c, v in self.vectors.items()}

    def pivot_matrix(self):
        pivots = self.pivots
        return np.stack([pivots[c] for c in self.classes])


@dataclass
class SUCCurve:
    '''Seen-unseen accuracy pairs, one per calibration value (ascending)'''
    calibration: np.ndarray
    seen_accuracy: np.ndarray
    unseen_accuracy: np.ndarray
    ausuc: float


@dataclass_json
@dataclass
class EvalReport:
    dataset: str
    split_style: str
    config_digest: str
    eval_config: dict
    top1: dict[str, float] = field(default_factory=dict)
    ausuc: float | None = None
    map_at: dict[str, float] = field(default_factory=dict)
    per_class_ap: dict[str, dict[str, float]] = field(default_factory=dict)
    clamped: int = 0


@dataclass
class EvaluationData:
    texts: dict[int, np.ndarray]
    seen_queries: np.ndarray
    seen_labels: np.ndarray
    unseen_queries: np.ndarray
    unseen_labels: np.ndarray
    seen: list[int]
    unseen: list[int]
    clamped: int = 0


def prepare_evaluation(model, bundle, stoplist=None):
    '''Encode the articles with the training vocabulary and scale the
    held out seen and all unseen instances with the model scaler'''
    if stoplist is None:
        stoplist = zsltext.load_stoplist()
    if bundle.features.shape[1] != model.x_dim:
        raise ValidationError(f'dataset features have {bundle.features.shape[1]} dimensions, '
                              f'the model generates {model.x_dim}')
    if sorted(bundle.seen) != sorted(model.classes):
        raise ValidationError('the seen classes of the dataset differ from the model classes')
    vocab, vectors = zsltext.encode_corpus(bundle.documents, bundle.seen, stoplist)
    if vocab.digest() != model.vocabulary_digest:
        raise ValidationError('the dataset articles do not give the vocabulary the model was trained with')

    _, held = zsldata.holdout_split(bundle.labels, bundle.seen, model.config.seen_holdout)
    unseen_rows = bundle.instances_of(bundle.unseen)
    clamped = 0
    queries = []
    for rows in (held, unseen_rows):
        features = bundle.features[rows]
        if model.scaler is not None:
            features, count = model.scaler.apply(features)
            clamped += count
        queries.append(features)
    if clamped:
        logger.warning('%d feature values outside the training range were clamped', clamped)
    return EvaluationData(texts={c: v.to_dense() for c, v in vectors.items()},
                          seen_queries=queries[0], seen_labels=bundle.labels[held],
                          unseen_queries=queries[1], unseen_labels=bundle.labels[unseen_rows],
                          seen=sorted(bundle.seen), unseen=sorted(bundle.unseen), clamped=clamped)


def build_bank(model, texts, classes, n, seed):
    '''n synthesized features for every class, one noise stream per class'''
    return SynthBank({c: zslgan.synthesize_features(model, texts[c], n, [seed, int(c)])
                      for c in sorted(classes)})


def classify_nn(queries, bank, mode='instance'):
    '''Nearest neighbour class for one query (returns an int) or for a
    matrix of queries (returns an array)'''
    single = np.ndim(queries) == 1
    queries = np.atleast_2d(np.asarray(queries, dtype=np.float64))
    classes = bank.classes
    if mode == 'pivot':
        references = bank.pivot_matrix()
        reference_labels = np.array(classes)
    elif mode == 'instance':
        references = np.concatenate([np.asarray(bank.vectors[c]) for c in classes])
        reference_labels = np.concatenate([np.full(len(bank.vectors[c]), c) for c in classes])
    else:
        raise ValueError(f'unknown nearest neighbour mode {mode}')
    # references are ordered by class id, argmin keeps the first minimum
    nearest = np.argmin(cdist(queries, references), axis=1)
    predictions = reference_labels[nearest]
    return int(predictions[0]) if single else predictions


def top1_accuracy(predictions, ground_truth):
    predictions = np.asarray(predictions)
    ground_truth = np.asarray(ground_truth)
    if predictions.shape != ground_truth.shape:
        raise ValueError(f'{len(predictions)} predictions for {len(ground_truth)} labels')
    if predictions.size == 0:
        raise ValueError('no predictions to score')
    return float(np.mean(predictions == ground_truth))


def area_under_suc(seen_accuracy, unseen_accuracy):
    '''Trapezoid area under the curve, points ordered by seen accuracy'''
    seen_accuracy = np.asarray(seen_accuracy, dtype=np.float64)
    unseen_accuracy = np.asarray(unseen_accuracy, dtype=np.float64)
    order = np.lexsort((-unseen_accuracy, seen_accuracy))
    return float(np.trapezoid(unseen_accuracy[order], seen_accuracy[order]))


@dataclass
class _Stacking:
    '''Per query: best seen and best unseen class and the calibration value
    at which the prediction switches from seen to unseen'''
    best_seen: np.ndarray
    best_unseen: np.ndarray
    switch: np.ndarray
    score_range: float

    def predict(self, calibration):
        seen_wins = (self.switch > calibration) | \
            ((self.switch == calibration) & (self.best_seen < self.best_unseen))
        return np.where(seen_wins, self.best_seen, self.best_unseen)


def _stacking(queries, bank, seen):
    classes = np.array(bank.classes)
    is_seen = np.isin(classes, list(seen))
    if is_seen.all() or not is_seen.any():
        raise ValidationError('the bank needs pivots for both seen and unseen classes')
    scores = -cdist(queries, bank.pivot_matrix())
    seen_scores = np.where(is_seen, scores, -np.inf)
    unseen_scores = np.where(is_seen, -np.inf, scores)
    best_seen = np.argmax(seen_scores, axis=1)
    best_unseen = np.argmax(unseen_scores, axis=1)
    rows = np.arange(len(queries))
    return _Stacking(best_seen=classes[best_seen], best_unseen=classes[best_unseen],
                     switch=scores[rows, best_seen] - scores[rows, best_unseen],
                     score_range=float(scores.max() - scores.min()))


def calibration_grid(switch, score_range, dense=False):
    '''Default: 201 points over [-2R, 2R] plus every switch point and the
    midpoints between consecutive switch points. Dense: 10,001 evenly
    spaced points covering the switch points with a margin.'''
    points = np.unique(switch)
    if dense:
        spread = points[-1] - points[0]
        margin = 0.05 * spread if spread > 0 else 1.0
        return np.linspace(points[0] - margin, points[-1] + margin, DENSE_CALIBRATION_POINTS)
    limit = 2 * score_range if score_range > 0 else 1.0
    midpoints = (points[1:] + points[:-1]) / 2
    return np.unique(np.concatenate([np.linspace(-limit, limit, CALIBRATION_POINTS),
                                     points, midpoints]))


def gzsl_curve(seen_queries, seen_labels, unseen_queries, unseen_labels, bank, seen,
               grid=None, dense=False):
    '''Seen-unseen accuracy curve over all classes of the bank'''
    if grid is not None and len(grid) == 0:
        raise ValidationError('empty calibration grid')
    if len(seen_labels) == 0 or len(unseen_labels) == 0:
        raise ValidationError('generalized evaluation needs both seen and unseen queries')
    queries = np.concatenate([np.atleast_2d(seen_queries), np.atleast_2d(unseen_queries)])
    stacking = _stacking(queries, bank, seen)
    n_seen = len(seen_labels)
    if grid is None:
        grid = calibration_grid(stacking.switch, stacking.score_range, dense)
    grid = np.sort(np.asarray(grid, dtype=np.float64))

    def accuracies(calibration):
        predictions = stacking.predict(calibration)
        return (top1_accuracy(predictions[:n_seen], seen_labels),
                top1_accuracy(predictions[n_seen:], unseen_labels))

    # widen the sweep until both ends of the curve reach zero
    low, high = grid[0], grid[-1]
    while accuracies(high)[0] > 0 or accuracies(low)[1] > 0:
        width = max(high - low, 1.0)
        low, high = low - width, high + width
    grid = np.unique(np.concatenate([[low], grid, [high]]))

    pairs = np.array([accuracies(c) for c in grid])
    return SUCCurve(calibration=grid, seen_accuracy=pairs[:, 0], unseen_accuracy=pairs[:, 1],
                    ausuc=area_under_suc(pairs[:, 0], pairs[:, 1]))


def average_precision(relevance):
    '''Mean of the precision at every relevant position of a ranked list'''
    relevance = np.asarray(relevance, dtype=bool)
    hits = np.flatnonzero(relevance)
    if len(hits) == 0:
        return 0.0
    precision = np.arange(1, len(hits) + 1) / (hits + 1)
    return float(precision.mean())


def retrieval_count(ratio, class_size):
    '''round(ratio * class size), halves rounded up, at least 1'''
    return max(1, math.floor(ratio * class_size + 0.5))


def retrieval_map(pivots, gallery, gallery_labels, ratio):
    '''Average precision per query class and their mean'''
    if not 0 < ratio <= 1:
        raise ValidationError(f'retrieval ratio {ratio} outside (0, 1]')
    gallery = np.atleast_2d(np.asarray(gallery, dtype=np.float64))
    gallery_labels = np.asarray(gallery_labels)
    if len(gallery_labels) == 0:
        raise ValidationError('empty retrieval gallery')
    per_class = {}
    for class_id in sorted(pivots):
        distances = cdist(np.asarray(pivots[class_id])[None, :], gallery)[0]
        ranking = np.argsort(distances, kind='stable')
        k = retrieval_count(ratio, int(np.sum(gallery_labels == class_id)))
        per_class[class_id] = average_precision(gallery_labels[ranking[:k]] == class_id)
    return per_class, float(np.mean(list(per_class.values())))


def provenance_line(digest_value, seed):
    '''First line of every CSV artifact, ties it to the run that made it'''
    return f'# config_digest={digest_value} seed={seed}\n'


def export_embeddings(path, real, real_labels, bank, digest_value, seed):
    '''Real and synthesized features with their class, for external plotting'''
    real = np.atleast_2d(real)
    with open(path, 'w', encoding='utf-8', newline='') as open_file:
        open_file.write(provenance_line(digest_value, seed))
        writer = csv.writer(open_file, lineterminator='\n')
        writer.writerow(['source', 'class_id'] + [f'f{i}' for i in range(real.shape[1])])
        for features, class_id in zip(real, real_labels):
            writer.writerow(['real', int(class_id)] + [repr(float(v)) for v in features])
        for class_id in bank.classes:
            for features in bank.vectors[class_id]:
                writer.writerow(['synthesized', class_id] + [repr(float(v)) for v in features])


def write_curve(path, curve, digest_value, seed):
    with open(path, 'w', encoding='utf-8', newline='') as open_file:
        open_file.write(provenance_line(digest_value, seed))
        writer = csv.writer(open_file, lineterminator='\n')
        writer.writerow(['A_S_T', 'A_U_T'])
        order = np.lexsort((-curve.unseen_accuracy, curve.seen_accuracy))
        for i in order:
            writer.writerow([repr(float(curve.seen_accuracy[i])), repr(float(curve.unseen_accuracy[i]))])
