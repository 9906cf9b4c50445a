"""Review ingestion: tokenization, vocabulary, rating normalization, corpus I/O."""

from __future__ import annotations

import json
import math
import logging
import re
from collections import Counter
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
from scipy import sparse

from .errors import CorpusFormatError, EmptyCorpusError

logger = logging.getLogger(__name__)

CORPUS_FORMAT = "mhstm-corpus"
_SENTENCE_END = re.compile(r"[.!?]+")
_WORD = re.compile(r"[^\W\d_]+")


def tokenize_sentences(raw_text: str, stopwords: Iterable[str] = ()) -> list[list[str]]:
    """Split text into lowercase token sentences.

    Sentences end at ``.``, ``!`` or ``?``. Tokens are maximal runs of
    alphabetic characters, so digits and punctuation act as separators and
    never survive. Sentences left empty after stopword removal are dropped.
    """
    stop = frozenset(stopwords)
    out = []
    for chunk in _SENTENCE_END.split(raw_text.lower()):
        tokens = [w for w in _WORD.findall(chunk) if w not in stop]
        if tokens:
            out.append(tokens)
    return out


@dataclass(frozen=True)
class Vocabulary:
    terms: tuple[str, ...]
    df: np.ndarray

    def __post_init__(self):
        if len(self.terms) != len(self.df):
            raise ValueError("terms and df must have equal length")

    @cached_property
    def index(self) -> dict[str, int]:
        return {t: i for i, t in enumerate(self.terms)}

    def __len__(self) -> int:
        return len(self.terms)

    def __contains__(self, term: str) -> bool:
        return term in self.index

    def id(self, term: str) -> int:
        return self.index[term]


def build_vocabulary(documents: Iterable[Iterable[str]], min_df: int = 5) -> Vocabulary:
    """Vocabulary of terms appearing in at least ``min_df`` documents.

    Ids follow lexicographic term order, so the result does not depend on
    document order.
    """
    if min_df < 1:
        raise ValueError("min_df must be >= 1")
    df = Counter()
    for doc in documents:
        df.update(set(doc))
    kept = sorted(t for t, c in df.items() if c >= min_df)
    if not kept:
        raise EmptyCorpusError(f"no term reaches min_df={min_df}")
    return Vocabulary(tuple(kept), np.array([df[t] for t in kept], dtype=np.int64))


def normalize_ratings(values: Sequence[float], scale: tuple[float, float] | None = None) -> list[float]:
    """Min-max map ratings to [0, 1] on one global scale."""
    vals = np.asarray(values, dtype=float)
    if scale is None:
        if vals.size == 0:
            raise ValueError("cannot infer a rating scale from no values")
        lo, hi = float(vals.min()), float(vals.max())
    else:
        lo, hi = map(float, scale)
    if hi <= lo:
        raise ValueError(f"degenerate rating scale [{lo}, {hi}]")
    return list(np.clip((vals - lo) / (hi - lo), 0.0, 1.0))


@dataclass(frozen=True)
class Review:
    brand: int
    response: float
    sentences: tuple[tuple[int, ...], ...]

    @property
    def n_tokens(self) -> int:
        return sum(len(s) for s in self.sentences)


@dataclass(frozen=True)
class Corpus:
    """Immutable brand-tagged corpus of token-id reviews."""

    reviews: tuple[Review, ...]
    vocabulary: Vocabulary
    brands: tuple[str, ...]
    metadata: dict = field(default_factory=dict, compare=False)
    bounded: bool = True  # responses confined to [0, 1]; off only for unclipped synthetic data

    def __post_init__(self):
        if not self.reviews:
            raise EmptyCorpusError("corpus has no reviews")
        V, B = len(self.vocabulary), len(self.brands)
        for i, r in enumerate(self.reviews):
            if not 0 <= r.brand < B:
                raise CorpusFormatError(f"review {i}: brand id {r.brand} outside 0..{B - 1}")
            if not math.isfinite(r.response):
                raise CorpusFormatError(f"review {i}: response is not finite")
            if self.bounded and not 0.0 <= r.response <= 1.0:
                raise CorpusFormatError(f"review {i}: response {r.response} outside [0, 1]")
            if not r.sentences or any(len(s) == 0 for s in r.sentences):
                raise CorpusFormatError(f"review {i}: empty sentence")
            for s in r.sentences:
                if min(s) < 0 or max(s) >= V:
                    raise CorpusFormatError(f"review {i}: token id outside vocabulary")

    @property
    def n_brands(self) -> int:
        return len(self.brands)

    @property
    def n_terms(self) -> int:
        return len(self.vocabulary)

    def __len__(self) -> int:
        return len(self.reviews)

    @cached_property
    def reviews_per_brand(self) -> np.ndarray:
        return np.bincount([r.brand for r in self.reviews], minlength=self.n_brands)

    @cached_property
    def arrays(self) -> "CorpusArrays":
        return CorpusArrays.from_reviews(self.reviews)

    @cached_property
    def _doc_term(self) -> sparse.csc_matrix:
        rows, cols = [], []
        for d, r in enumerate(self.reviews):
            terms = {v for s in r.sentences for v in s}
            rows.extend([d] * len(terms))
            cols.extend(terms)
        data = np.ones(len(rows), dtype=np.int64)
        return sparse.csc_matrix((data, (rows, cols)), shape=(len(self.reviews), self.n_terms))

    def document_frequency(self, v: int | None = None):
        df = np.asarray(self._doc_term.sum(axis=0)).ravel()
        return df if v is None else int(df[v])

    def co_document_frequency(self, u: int, v: int) -> int:
        X = self._doc_term
        return int(X[:, u].multiply(X[:, v]).sum())

    # -- export ---------------------------------------------------------
    def to_dict(self) -> dict:
        return {
            "format": CORPUS_FORMAT,
            "version": 1,
            "vocabulary": {"terms": list(self.vocabulary.terms), "df": self.vocabulary.df.tolist()},
            "brands": list(self.brands),
            "reviews": [
                {"brand": r.brand, "response": r.response, "sentences": [list(s) for s in r.sentences]}
                for r in self.reviews
            ],
            "metadata": self.metadata,
            "bounded": self.bounded,
        }

    @classmethod
    def from_dict(cls, data: dict) -> "Corpus":
        if data.get("format") != CORPUS_FORMAT:
            raise CorpusFormatError("not an exported corpus file")
        try:
            vocab = Vocabulary(tuple(data["vocabulary"]["terms"]), np.array(data["vocabulary"]["df"], dtype=np.int64))
            reviews = tuple(
                Review(int(r["brand"]), float(r["response"]), tuple(tuple(int(v) for v in s) for s in r["sentences"]))
                for r in data["reviews"]
            )
            return cls(reviews, vocab, tuple(data["brands"]), dict(data.get("metadata", {})),
                       bool(data.get("bounded", True)))
        except (KeyError, TypeError) as exc:
            raise CorpusFormatError(f"malformed corpus file: {exc!r}") from exc

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), separators=(",", ":")))

    @classmethod
    def load(cls, path: str | Path) -> "Corpus":
        try:
            data = json.loads(Path(path).read_text())
        except json.JSONDecodeError as exc:
            raise CorpusFormatError(f"{path}: {exc}") from exc
        return cls.from_dict(data)


@dataclass(frozen=True)
class CorpusArrays:
    """Flat views consumed by the sampler kernels."""

    words: np.ndarray  # token -> term id
    sent_start: np.ndarray  # sentence s covers tokens sent_start[s]:sent_start[s+1]
    sent_doc: np.ndarray
    tok_sent: np.ndarray
    doc_brand: np.ndarray
    doc_y: np.ndarray
    doc_ntok: np.ndarray
    doc_sent_start: np.ndarray

    @classmethod
    def from_reviews(cls, reviews: Sequence[Review]) -> "CorpusArrays":
        words, sent_start, sent_doc, doc_sent_start = [], [0], [], [0]
        for d, r in enumerate(reviews):
            for s in r.sentences:
                words.extend(s)
                sent_start.append(len(words))
                sent_doc.append(d)
            doc_sent_start.append(len(sent_doc))
        sent_start = np.array(sent_start, dtype=np.int64)
        lengths = np.diff(sent_start)
        return cls(
            words=np.array(words, dtype=np.int64),
            sent_start=sent_start,
            sent_doc=np.array(sent_doc, dtype=np.int64),
            tok_sent=np.repeat(np.arange(len(lengths), dtype=np.int64), lengths),
            doc_brand=np.array([r.brand for r in reviews], dtype=np.int64),
            doc_y=np.array([r.response for r in reviews], dtype=np.float64),
            doc_ntok=np.array([r.n_tokens for r in reviews], dtype=np.int64),
            doc_sent_start=np.array(doc_sent_start, dtype=np.int64),
        )

    @property
    def n_tokens(self) -> int:
        return len(self.words)

    @property
    def n_sentences(self) -> int:
        return len(self.sent_doc)

    @property
    def tok_doc(self) -> np.ndarray:
        return self.sent_doc[self.tok_sent]


@dataclass(frozen=True)
class PreprocessOptions:
    min_df: int = 5
    stopwords: frozenset = frozenset()
    rating_scale: tuple[float, float] | None = None


def _parse_records(path: Path) -> list[dict]:
    records = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as exc:
                raise CorpusFormatError(f"{path}:{lineno}: {exc.msg}") from exc
            if not isinstance(rec, dict):
                raise CorpusFormatError(f"{path}:{lineno}: record is not an object")
            if not isinstance(rec.get("brand"), str):
                raise CorpusFormatError(f"{path}:{lineno}: 'brand' must be a string")
            if not isinstance(rec.get("rating"), (int, float)) or isinstance(rec.get("rating"), bool):
                raise CorpusFormatError(f"{path}:{lineno}: 'rating' must be a number")
            has_text, has_sents = "text" in rec, "sentences" in rec
            if has_text == has_sents:
                raise CorpusFormatError(f"{path}:{lineno}: exactly one of 'text' or 'sentences' required")
            if has_text and not isinstance(rec["text"], str):
                raise CorpusFormatError(f"{path}:{lineno}: 'text' must be a string")
            if has_sents:
                sents = rec["sentences"]
                if not isinstance(sents, list) or not all(
                    isinstance(s, list) and all(isinstance(w, str) for w in s) for s in sents
                ):
                    raise CorpusFormatError(f"{path}:{lineno}: 'sentences' must be a list of token lists")
            rec["_line"] = lineno
            records.append(rec)
    return records


def load_reviews(path: str | Path, options: PreprocessOptions = PreprocessOptions()) -> Corpus:
    """Build a corpus from a line-delimited JSON review file.

    Each line holds ``brand``, ``rating`` and either raw ``text`` or
    pre-tokenized ``sentences``. Brand ids follow sorted brand names.
    """
    path = Path(path)
    records = _parse_records(path)
    if not records:
        raise EmptyCorpusError(f"{path}: no records")

    token_docs = []
    for rec in records:
        if "text" in rec:
            token_docs.append(tokenize_sentences(rec["text"], options.stopwords))
        else:
            token_docs.append([[w for w in s if w not in options.stopwords] for s in rec["sentences"]])
    vocab = build_vocabulary(([w for s in doc for w in s] for doc in token_docs), options.min_df)

    ratings = [float(rec["rating"]) for rec in records]
    scale = options.rating_scale or (min(ratings), max(ratings))
    responses = normalize_ratings(ratings, scale)

    brands = tuple(sorted({rec["brand"] for rec in records}))
    brand_id = {b: i for i, b in enumerate(brands)}
    reviews, dropped = [], 0
    for rec, doc, y in zip(records, token_docs, responses):
        sents = tuple(t for t in (tuple(vocab.index[w] for w in s if w in vocab) for s in doc) if t)
        if not sents:
            dropped += 1
            continue
        reviews.append(Review(brand_id[rec["brand"]], float(y), sents))
    if dropped:
        logger.warning("dropped %d reviews with no in-vocabulary tokens", dropped)
    if not reviews:
        raise EmptyCorpusError(f"{path}: every review is empty after preprocessing")

    meta = {
        "source": str(path),
        "min_df": options.min_df,
        "n_stopwords": len(options.stopwords),
        "rating_min": scale[0],
        "rating_max": scale[1],
        "dropped_reviews": dropped,
    }
    return Corpus(tuple(reviews), vocab, brands, meta)


def load_corpus(path: str | Path, options: PreprocessOptions = PreprocessOptions()) -> Corpus:
    """Load either an exported corpus file or a review-record file."""
    path = Path(path)
    with open(path, encoding="utf-8") as fh:
        head = fh.read(4096).lstrip()
    if head.startswith("{") and '"format"' in head[:200] and CORPUS_FORMAT in head[:200]:
        return Corpus.load(path)
    return load_reviews(path, options)
