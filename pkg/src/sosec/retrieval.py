"""Code tokenization and BM25 retrieval over knowledge-base code blocks.

Ranking is lexical on purpose: warnings in community discussions tend to
hang off concrete identifiers (``shell=true``, ``pickle.loads``,
``debug=true``), so the tokenizer emits those compounds whole in addition
to their lowercased constituents.
"""

from __future__ import annotations

import json
import math
import re
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

from .errors import ConfigError
from .kb import KnowledgeEntry

INDEX_MAGIC = "SOSEC-IDX-v1"

DEFAULT_K1 = 1.2
DEFAULT_B = 0.75
DEFAULT_TOP_K = 5

# One scan, three shapes: `name=value` argument patterns (== etc. excluded),
# dotted call paths, bare identifiers/numbers.
_TOKEN_RE = re.compile(
    r"(?P<assign>[A-Za-z_]\w*(?:\.\w+)*[ \t]*=(?!=)[ \t]*\w+(?:\.\w+)*)"
    r"|(?P<dotted>[A-Za-z_]\w*(?:\.\w+)+)"
    r"|(?P<word>\w+)"
)

_CAMEL_RE = re.compile(r"[A-Z]+(?![a-z])|[A-Z][a-z0-9]*|[a-z0-9]+")
_WS_RE = re.compile(r"\s+")


def _word_tokens(word: str) -> list[str]:
    """The identifier lowercased, plus camelCase/snake_case constituents."""
    whole = word.lower()
    pieces = [p.lower() for p in _CAMEL_RE.findall(word)]
    if pieces == [whole]:
        return [whole]
    return [whole] + pieces


def tokenize_code(text: str) -> list[str]:
    """Tokenize source text, keeping appearance order and duplicates."""
    tokens: list[str] = []
    for match in _TOKEN_RE.finditer(text):
        group = match.lastgroup
        raw = match.group()
        if group == "assign":
            compound = _WS_RE.sub("", raw).lower()
            tokens.append(compound)
            lhs = compound.split("=", 1)[0]
            if "." in lhs:
                tokens.append(lhs)
            for part in re.findall(r"\w+", raw):
                tokens.extend(_word_tokens(part))
        elif group == "dotted":
            tokens.append(raw.lower())
            for part in raw.split("."):
                tokens.extend(_word_tokens(part))
        else:
            tokens.extend(_word_tokens(raw))
    return tokens


@dataclass
class RetrievalIndex:
    """Inverted index with BM25 statistics over entry code blocks."""

    k1: float
    b: float
    num_docs: int
    avg_doc_len: float
    doc_len: list[int]
    postings: dict[str, list[tuple[int, int]]]
    doc_meta: dict[int, int]
    entries: list[KnowledgeEntry] = field(repr=False)


@dataclass
class RetrievalHit:
    entry: KnowledgeEntry
    score: float
    rank: int


def entry_document_text(entry: KnowledgeEntry) -> str:
    return "\n".join(entry.code_blocks)


def build_index(
    entries: Sequence[KnowledgeEntry],
    k1: float = DEFAULT_K1,
    b: float = DEFAULT_B,
) -> RetrievalIndex:
    """Index entry code blocks; deterministic for a fixed entry order."""
    if not entries:
        raise ConfigError("cannot build an index over zero documents")
    if k1 <= 0:
        raise ConfigError(f"k1 must be positive, got {k1}")
    if not 0.0 <= b <= 1.0:
        raise ConfigError(f"b must be within [0, 1], got {b}")

    postings: dict[str, list[tuple[int, int]]] = {}
    doc_len: list[int] = []
    doc_meta: dict[int, int] = {}
    for doc_id, entry in enumerate(entries):
        tokens = tokenize_code(entry_document_text(entry))
        doc_len.append(len(tokens))
        doc_meta[doc_id] = entry.answer_id
        for term, tf in sorted(Counter(tokens).items()):
            postings.setdefault(term, []).append((doc_id, tf))

    return RetrievalIndex(
        k1=k1,
        b=b,
        num_docs=len(entries),
        avg_doc_len=sum(doc_len) / len(doc_len),
        doc_len=doc_len,
        postings=postings,
        doc_meta=doc_meta,
        entries=list(entries),
    )


def _idf(index: RetrievalIndex, term: str) -> float:
    # +1 inside the log keeps IDF (and therefore scores) strictly positive
    # even for terms present in more than half the corpus.
    df = len(index.postings.get(term, ()))
    return math.log((index.num_docs - df + 0.5) / (df + 0.5) + 1.0)


def _tf_weight(index: RetrievalIndex, tf: int, doc_id: int) -> float:
    norm = index.k1 * (1.0 - index.b + index.b * index.doc_len[doc_id] / index.avg_doc_len)
    return tf * (index.k1 + 1.0) / (tf + norm)


def bm25_score(index: RetrievalIndex, query_tokens: Iterable[str], doc_id: int) -> float:
    """BM25 score of one document for a tokenized query."""
    if not 0 <= doc_id < index.num_docs:
        raise ConfigError(f"unknown doc_id {doc_id} (index has {index.num_docs} docs)")
    score = 0.0
    for term in dict.fromkeys(query_tokens):
        tf = 0
        for posted_doc, posted_tf in index.postings.get(term, ()):
            if posted_doc == doc_id:
                tf = posted_tf
                break
        if tf == 0:
            continue
        score += _idf(index, term) * _tf_weight(index, tf, doc_id)
    return score


def retrieve(index: RetrievalIndex, code: str, k: int = DEFAULT_TOP_K) -> list[RetrievalHit]:
    """Top-k entries by BM25; ties broken by ascending answer id.

    Documents sharing no token with the query score zero and are excluded,
    so fewer than k hits may be returned.
    """
    if k < 1:
        raise ValueError(f"k must be >= 1, got {k}")
    scores: dict[int, float] = {}
    for term in dict.fromkeys(tokenize_code(code)):
        plist = index.postings.get(term)
        if not plist:
            continue
        idf = _idf(index, term)
        for doc_id, tf in plist:
            scores[doc_id] = scores.get(doc_id, 0.0) + idf * _tf_weight(index, tf, doc_id)

    ranked = sorted(
        ((doc_id, score) for doc_id, score in scores.items() if score > 0.0),
        key=lambda item: (-item[1], index.doc_meta[item[0]]),
    )
    return [
        RetrievalHit(entry=index.entries[doc_id], score=score, rank=rank)
        for rank, (doc_id, score) in enumerate(ranked[:k], start=1)
    ]


def save_index(index: RetrievalIndex, path: str | Path) -> None:
    """Persist the index (entries included) as a versioned JSON file."""
    obj = {
        "magic": INDEX_MAGIC,
        "k1": index.k1,
        "b": index.b,
        "num_docs": index.num_docs,
        "avg_doc_len": index.avg_doc_len,
        "doc_len": index.doc_len,
        "postings": {term: index.postings[term] for term in sorted(index.postings)},
        "doc_meta": {str(doc_id): aid for doc_id, aid in sorted(index.doc_meta.items())},
        "entries": [entry.to_dict() for entry in index.entries],
    }
    Path(path).write_text(json.dumps(obj, ensure_ascii=False), encoding="utf-8")


def load_index(path: str | Path) -> RetrievalIndex:
    try:
        obj = json.loads(Path(path).read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"cannot read index file {path}: {exc}") from exc
    if not isinstance(obj, dict) or obj.get("magic") != INDEX_MAGIC:
        raise ConfigError(f"{path} is not a {INDEX_MAGIC} index file")
    return RetrievalIndex(
        k1=obj["k1"],
        b=obj["b"],
        num_docs=obj["num_docs"],
        avg_doc_len=obj["avg_doc_len"],
        doc_len=list(obj["doc_len"]),
        postings={
            term: [(doc_id, tf) for doc_id, tf in plist]
            for term, plist in obj["postings"].items()
        },
        doc_meta={int(doc_id): aid for doc_id, aid in obj["doc_meta"].items()},
        entries=[KnowledgeEntry.from_dict(e) for e in obj["entries"]],
    )
