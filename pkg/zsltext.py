#!/usr/bin/env python3

# Text side of the zero-shot GAN: turn one noisy article per class into a
# TF-IDF vector. Tokenizing, stop word removal and Porter stemming come
# first, then a vocabulary with document frequencies is built over the
# training (seen) classes and every article is encoded against it.
#
# SPDX-License-Identifier: GPL-3.0-only

import functools
import hashlib
import json
import logging
import math
import pathlib
import re
from collections import Counter
from dataclasses import dataclass, field

import numpy as np
from dataclasses_json import dataclass_json
from nltk.stem.porter import PorterStemmer

from zslerrors import ConfigError, ValidationError

logger = logging.getLogger(__name__)

DEFAULT_STOPLIST = pathlib.Path(__file__).parent / 'data' / 'stopwords.txt'

# maximal runs of Unicode letters
word_re = re.compile(r'[^\W\d_]+')

stemmer = PorterStemmer(mode=PorterStemmer.ORIGINAL_ALGORITHM)


@dataclass
class Document:
    class_id: int
    raw_text: str


@dataclass
class Vocabulary:
    '''Terms in lexicographic order with their document frequencies'''
    terms: dict[str, int]
    doc_frequency: list[int]
    corpus_size: int

    def __len__(self):
        return len(self.terms)

    def idf(self, term):
        return math.log(self.corpus_size / self.doc_frequency[self.terms[term]])

    def digest(self):
        payload = json.dumps({'terms': list(self.terms), 'df': self.doc_frequency,
                              'n': self.corpus_size})
        return hashlib.sha256(payload.encode()).hexdigest()


@dataclass_json
@dataclass
class TfIdfVector:
    dimension: int
    entries: list[tuple[int, float]] = field(default_factory=list)

    def to_dense(self):
        dense = np.zeros(self.dimension)
        for index, weight in self.entries:
            dense[index] = weight
        return dense

    def norm(self):
        return math.sqrt(sum(weight * weight for _, weight in self.entries))


def tokenize(raw_text):
    return [word.lower() for word in word_re.findall(raw_text)]


def load_stoplist(path=None):
    '''Read a stoplist file, one term per line, # starts a comment'''
    stoplist_file = pathlib.Path(path) if path is not None else DEFAULT_STOPLIST
    try:
        with open(stoplist_file, 'r', encoding='utf-8') as open_file:
            lines = open_file.readlines()
    except OSError as e:
        raise ConfigError(f'cannot read stoplist {stoplist_file}: {e.strerror}') from e
    except UnicodeDecodeError as e:
        raise ConfigError(f'stoplist {stoplist_file} is not UTF-8 text: {e.reason}') from e
    stoplist = set()
    for line in lines:
        term = line.split('#', 1)[0].strip().lower()
        if term:
            stoplist.add(term)
    return frozenset(stoplist)


def strip_stopwords(terms, stoplist):
    return [term for term in terms if term not in stoplist]


@functools.lru_cache(maxsize=65536)
def porter_stem(term):
    '''Porter (1980) suffix stripping. Terms of one or two letters are kept
    as is, like the reference implementation does.'''
    if len(term) <= 2:
        return term
    return stemmer.stem(term, to_lowercase=False)


def process_document(raw_text, stoplist):
    return [porter_stem(term) for term in strip_stopwords(tokenize(raw_text), stoplist)]


def build_vocabulary(corpus):
    '''Vocabulary over a list of processed term lists'''
    if not corpus:
        raise ValidationError('cannot build a vocabulary from an empty corpus')
    counts = Counter()
    for doc_terms in corpus:
        counts.update(set(doc_terms))
    ordered = sorted(counts)
    return Vocabulary(terms={term: index for index, term in enumerate(ordered)},
                      doc_frequency=[counts[term] for term in ordered],
                      corpus_size=len(corpus))


def encode_tfidf(doc_terms, vocab):
    '''Raw term count times ln(N/df), L2 normalized when non-zero.
    Terms outside the vocabulary are dropped.'''
    counts = Counter(term for term in doc_terms if term in vocab.terms)
    weights = {}
    for term, count in counts.items():
        weight = count * vocab.idf(term)
        if weight > 0:
            weights[vocab.terms[term]] = weight
    norm = math.sqrt(sum(w * w for w in weights.values()))
    if norm > 0:
        weights = {index: w / norm for index, w in weights.items()}
    return TfIdfVector(dimension=len(vocab), entries=sorted(weights.items()))


def encode_corpus(documents, vocabulary_classes, stoplist):
    '''Build the vocabulary over the documents of vocabulary_classes and
    encode every document against it. Returns (vocabulary, {class_id: vector}).'''
    processed = {class_id: process_document(doc.raw_text, stoplist)
                 for class_id, doc in sorted(documents.items())}
    missing = [c for c in vocabulary_classes if c not in processed]
    if missing:
        raise ValidationError(f'no document for classes {missing}')
    vocab = build_vocabulary([processed[c] for c in sorted(vocabulary_classes)])
    vectors = {}
    for class_id, terms in processed.items():
        vector = encode_tfidf(terms, vocab)
        if not vector.entries:
            logger.warning('class %d: document encodes to a zero vector', class_id)
        vectors[class_id] = vector
    return vocab, vectors


def write_vectors(path, vectors):
    '''Write {class_id: TfIdfVector} as JSON'''
    payload = {str(class_id): vector.to_dict() for class_id, vector in sorted(vectors.items())}
    with open(path, 'w', encoding='utf-8') as open_file:
        json.dump(payload, open_file, sort_keys=True)


def read_vectors(path):
    with open(path, 'r', encoding='utf-8') as open_file:
        payload = json.load(open_file)
    return {int(class_id): TfIdfVector(dimension=data['dimension'],
                                       entries=[(int(i), float(w)) for i, w in data['entries']])
            for class_id, data in payload.items()}
