"""Tokenization, on-disk corpora, deterministic sequential loading and document packing.

Corpus layout per source: ``<name>.bin`` holds records ``[uint32 n][uint32 tok] * n`` (little
endian) and ``<name>.json`` is a sidecar with the name, document and token counts and the
sha256 of the binary.
"""
from __future__ import annotations

import hashlib
import json
import unicodedata
from dataclasses import asdict, dataclass, field, replace
from fractions import Fraction
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

EOD = 256
VOCAB = 257


# -- tokenization -----------------------------------------------------------------------
def _is_split(ch: str, split_digits: bool, split_punct: bool) -> bool:
    cat = unicodedata.category(ch)
    return (split_digits and cat == "Nd") or (split_punct and cat.startswith("P"))


def pretokenize(text: str | bytes, split_digits: bool = True, split_punct: bool = True) -> list[str]:
    """Lossless pre-split: "".join(pieces) == text.

    Words keep their leading whitespace; with the flags set each decimal digit and each
    punctuation character becomes its own piece.
    """
    if isinstance(text, (bytes, bytearray)):
        try:
            text = bytes(text).decode("utf-8", errors="strict")
        except UnicodeDecodeError as e:
            raise ValueError(f"invalid UTF-8 at byte {e.start}") from e
    pieces: list[str] = []
    i, n = 0, len(text)
    while i < n:
        j = i
        while j < n and text[j].isspace():
            j += 1
        if j == n:
            pieces.append(text[i:j])
            break
        if _is_split(text[j], split_digits, split_punct):
            if j > i:
                pieces.append(text[i:j])
            pieces.append(text[j])
            i = j + 1
            continue
        k = j
        while k < n and not text[k].isspace() and not _is_split(text[k], split_digits, split_punct):
            k += 1
        pieces.append(text[i:k])
        i = k
    return pieces


class ByteTokenizer:
    """Pieces map to their UTF-8 bytes (ids 0..255); id 256 ends a document."""

    vocab_size = VOCAB
    eod = EOD

    def __init__(self, split_digits: bool = True, split_punct: bool = True):
        self.split_digits = split_digits
        self.split_punct = split_punct

    def encode(self, text: str, add_eod: bool = True) -> list[int]:
        ids = [b for piece in pretokenize(text, self.split_digits, self.split_punct) for b in piece.encode("utf-8")]
        return ids + [EOD] if add_eod else ids

    def decode(self, ids: Iterable[int]) -> str:
        return bytes(int(i) for i in ids if i != EOD).decode("utf-8", errors="replace")


# -- corpus files -------------------------------------------------------------------------
def write_source(directory: str | Path, name: str, docs: Sequence[Sequence[int]]) -> dict:
    if not docs:
        raise ValueError(f"source {name!r} has no documents")
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    parts = []
    for d in docs:
        d = np.asarray(d, dtype="<u4")
        if d.size == 0:
            raise ValueError(f"source {name!r} contains an empty document")
        parts.append(np.array([d.size], dtype="<u4"))
        parts.append(d)
    blob = np.concatenate(parts).tobytes()
    (directory / f"{name}.bin").write_bytes(blob)
    manifest = {"name": name, "n_docs": len(docs), "n_tokens": int(sum(len(d) for d in docs)),
                "sha256": hashlib.sha256(blob).hexdigest(), "dtype": "<u4"}
    (directory / f"{name}.json").write_text(json.dumps(manifest, indent=2, sort_keys=True))
    return manifest


class CorpusSource:
    """A memory-resident source with a per-document index."""

    def __init__(self, name: str, tokens: np.ndarray, starts: np.ndarray, lengths: np.ndarray,
                 record_offsets: np.ndarray | None = None):
        if len(lengths) == 0:
            raise ValueError(f"source {name!r} is empty")
        self.name = name
        self.tokens = tokens
        self.starts = starts
        self.lengths = lengths
        self.record_offsets = record_offsets

    @classmethod
    def from_docs(cls, name: str, docs: Sequence[Sequence[int]]) -> "CorpusSource":
        docs = [np.asarray(d, dtype=np.int64) for d in docs]
        if not docs or any(d.size == 0 for d in docs):
            raise ValueError(f"source {name!r} needs non-empty documents")
        lengths = np.array([d.size for d in docs], dtype=np.int64)
        starts = np.concatenate([[0], np.cumsum(lengths)[:-1]])
        return cls(name, np.concatenate(docs), starts, lengths)

    @classmethod
    def load(cls, directory: str | Path, name: str, verify: bool = True) -> "CorpusSource":
        directory = Path(directory)
        manifest = json.loads((directory / f"{name}.json").read_text())
        blob = (directory / f"{name}.bin").read_bytes()
        if verify and hashlib.sha256(blob).hexdigest() != manifest["sha256"]:
            raise ValueError(f"checksum mismatch for source {name!r}")
        raw = np.frombuffer(blob, dtype="<u4")
        starts, lengths, recs = [], [], []
        i = 0
        while i < raw.size:
            n = int(raw[i])
            recs.append(4 * i)
            starts.append(i + 1)
            lengths.append(n)
            i += 1 + n
        if i != raw.size or len(lengths) != manifest["n_docs"]:
            raise ValueError(f"corrupt record structure in source {name!r}")
        # repack without the length prefixes so documents are contiguous slices
        tokens = np.concatenate([raw[s:s + n] for s, n in zip(starts, lengths)]).astype(np.int64)
        lengths = np.array(lengths, dtype=np.int64)
        return cls(name, tokens, np.concatenate([[0], np.cumsum(lengths)[:-1]]), lengths, np.array(recs))

    @property
    def n_docs(self) -> int:
        return len(self.lengths)

    def doc(self, i: int) -> np.ndarray:
        return self.tokens[self.starts[i]:self.starts[i] + self.lengths[i]]


def list_sources(directory: str | Path) -> list[str]:
    return sorted(p.stem for p in Path(directory).glob("*.json"))


def load_corpus(directory: str | Path) -> dict[str, CorpusSource]:
    names = list_sources(directory)
    if not names:
        raise ValueError(f"no sources found in {directory}")
    return {n: CorpusSource.load(directory, n) for n in names}


# -- cursors and mixtures ---------------------------------------------------------------------
@dataclass
class DataSourceCursor:
    source: str
    doc_index: int = 0
    token_offset: int = 0
    documents_consumed: int = 0
    epochs_completed: int = 0

    def byte_offset(self, src: CorpusSource) -> int | None:
        """Position inside the source's binary file (None for in-memory sources)."""
        if src.record_offsets is None:
            return None
        return int(src.record_offsets[self.doc_index]) + 4 + 4 * self.token_offset

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: Mapping) -> "DataSourceCursor":
        return cls(**d)


@dataclass(frozen=True)
class MixtureSpec:
    weights: tuple[tuple[str, float], ...]

    def __post_init__(self):
        ws = [w for _, w in self.weights]
        if not ws or min(ws) < 0 or abs(sum(ws) - 1.0) > 1e-9:
            raise ValueError("mixture weights must be non-negative and sum to 1")

    @classmethod
    def uniform(cls, names: Sequence[str]) -> "MixtureSpec":
        return cls(tuple((n, 1.0 / len(names)) for n in names))

    def quotas(self, total: int) -> list[int]:
        """Largest-remainder split of ``total`` tokens; ties go to the earlier source."""
        exact = [Fraction(w).limit_denominator(10 ** 12) * total for _, w in self.weights]
        base = [int(e) for e in exact]
        rem = total - sum(base)
        order = sorted(range(len(exact)), key=lambda i: (-(exact[i] - base[i]), i))
        for i in order[:rem]:
            base[i] += 1
        return base


@dataclass
class Fragment:
    source: str
    doc_key: tuple
    tokens: np.ndarray
    offset: int     # position of tokens[0] within its document


def read_tokens(src: CorpusSource, cursor: DataSourceCursor, n: int) -> tuple[list[Fragment], DataSourceCursor]:
    """Take the next n tokens in file order, wrapping (and counting an epoch) at the end."""
    cur = replace(cursor)
    out = []
    while n > 0:
        doc = src.doc(cur.doc_index)
        take = min(n, len(doc) - cur.token_offset)
        out.append(Fragment(src.name, (src.name, cur.epochs_completed, cur.doc_index),
                            doc[cur.token_offset:cur.token_offset + take], cur.token_offset))
        cur.token_offset += take
        n -= take
        if cur.token_offset == len(doc):
            cur.token_offset = 0
            cur.doc_index += 1
            cur.documents_consumed += 1
            if cur.doc_index == src.n_docs:
                cur.doc_index = 0
                cur.epochs_completed += 1
    return out, cur


# -- packed batches ---------------------------------------------------------------------------
@dataclass
class PackedBatch:
    tokens: np.ndarray      # [batch, T] int
    resets: np.ndarray      # [batch, T] bool, true where a document (or a row) starts
    doc_ids: np.ndarray     # [batch, T] int, non-decreasing per row
    positions: np.ndarray   # [batch, T] int, offset of each token within its document
    valid: np.ndarray | None = None   # [batch, T] bool, false on padding

    def __post_init__(self):
        if self.valid is None:
            self.valid = np.ones(self.tokens.shape, dtype=bool)

    def check_invariants(self):
        if not np.all(self.resets[:, 0]):
            raise AssertionError("every row must start with a reset")
        if np.any(np.diff(self.doc_ids, axis=1) < 0):
            raise AssertionError("doc_ids must be non-decreasing along a row")
        change = np.zeros_like(self.resets)
        change[:, 1:] = self.doc_ids[:, 1:] != self.doc_ids[:, :-1]
        if np.any(change[:, 1:] != self.resets[:, 1:]):
            raise AssertionError("inside a row, resets must mark exactly the document changes")
        # a document change may be the continuation of a document begun in an earlier batch,
        # so its position need not be 0
        if np.any(self.positions < 0):
            raise AssertionError("positions must be non-negative")
        cont = ~change[:, 1:]
        if np.any((self.positions[:, 1:] - self.positions[:, :-1])[cont] != 1):
            raise AssertionError("positions must advance by one within a document")

    def target_weights(self) -> np.ndarray:
        """Weights for predicting tokens[:, 1:] from tokens[:, :-1]; zero across document starts and padding."""
        same = self.doc_ids[:, 1:] == self.doc_ids[:, :-1]
        return (same & self.valid[:, 1:] & self.valid[:, :-1]).astype(np.float64)

    def digest(self) -> str:
        h = hashlib.sha256()
        for a in (self.tokens, self.resets, self.doc_ids, self.positions, self.valid):
            h.update(np.ascontiguousarray(a).astype("<i8").tobytes())
        return h.hexdigest()


def _rows_from_fragments(frags: Sequence[Fragment], T: int, batch: int, doc_index: Mapping | None = None,
                         pad_id: int = 0) -> PackedBatch:
    """Lay fragments end to end into ``batch`` rows of length T (padding any shortfall)."""
    shape = (batch, T)
    tokens = np.full(shape, pad_id, dtype=np.int64)
    resets = np.zeros(shape, dtype=bool)
    doc_ids = np.zeros(shape, dtype=np.int64)
    positions = np.zeros(shape, dtype=np.int64)
    valid = np.zeros(shape, dtype=bool)
    row, col = 0, 0
    row_doc, prev_key = -1, None
    for fr in frags:
        i = 0
        while i < len(fr.tokens):
            if row >= batch:
                raise ValueError("fragments exceed the batch capacity")
            if col == 0:
                row_doc, prev_key = -1, None
            take = min(len(fr.tokens) - i, T - col)
            sl = slice(col, col + take)
            if fr.doc_key != prev_key:
                row_doc += 1
                resets[row, col] = True
            tokens[row, sl] = fr.tokens[i:i + take]
            doc_ids[row, sl] = doc_index[fr.doc_key] if doc_index is not None else row_doc
            positions[row, sl] = fr.offset + i + np.arange(take)
            valid[row, sl] = True
            prev_key = fr.doc_key
            i += take
            col += take
            if col == T:
                row, col = row + 1, 0
    # padding: each padded stretch is its own (invalid) document
    for r in range(row, batch):
        c0 = col if r == row else 0
        if c0 < T:
            last = doc_ids[r, c0 - 1] if c0 > 0 else -1
            doc_ids[r, c0:] = last + 1
            resets[r, c0] = True
            positions[r, c0:] = np.arange(T - c0)
    resets[:, 0] = True
    return PackedBatch(tokens, resets, doc_ids, positions, valid)


def pack_documents(docs: Sequence[Sequence[int]], T: int, batch: int) -> list[PackedBatch]:
    """Greedy sequential packing of whole documents; doc_ids are global document indices."""
    if not docs:
        raise ValueError("no documents to pack")
    frags = []
    for k, d in enumerate(docs):
        d = np.asarray(d, dtype=np.int64)
        if d.size == 0:
            raise ValueError(f"document {k} is empty")
        frags.append(Fragment("", ("", 0, k), d, 0))
    index = {f.doc_key: k for k, f in enumerate(frags)}
    per_batch = T * batch
    out, acc, used = [], [], 0
    for f in frags:
        i = 0
        while i < len(f.tokens):
            take = min(len(f.tokens) - i, per_batch - used)
            acc.append(Fragment(f.source, f.doc_key, f.tokens[i:i + take], f.offset + i))
            used += take
            i += take
            if used == per_batch:
                out.append(_rows_from_fragments(acc, T, batch, index))
                acc, used = [], 0
    if acc:
        out.append(_rows_from_fragments(acc, T, batch, index))
    return out


def unpack_documents(batches: Iterable[PackedBatch]) -> list[np.ndarray]:
    """Inverse of pack_documents: collect valid tokens by document id in stream order."""
    docs: dict[int, list[np.ndarray]] = {}
    for b in batches:
        for r in range(b.tokens.shape[0]):
            ids, toks, ok = b.doc_ids[r], b.tokens[r], b.valid[r]
            for d in np.unique(ids[ok]):
                docs.setdefault(int(d), []).append(toks[ok & (ids == d)])
    return [np.concatenate(docs[k]) for k in sorted(docs)]


def next_batch(sources: Mapping[str, CorpusSource], cursors: Mapping[str, DataSourceCursor],
               mixture: MixtureSpec, batch: int, T: int) -> tuple[PackedBatch, dict[str, DataSourceCursor]]:
    """Fill batch * T tokens from the mixture, reading each source strictly in order."""
    total = batch * T
    frags = []
    new = {k: replace(v) for k, v in cursors.items()}
    for (name, _), q in zip(mixture.weights, mixture.quotas(total)):
        if q == 0:
            continue
        if name not in sources:
            raise KeyError(f"mixture names unknown source {name!r}")
        got, new[name] = read_tokens(sources[name], new.get(name, DataSourceCursor(name)), q)
        frags.extend(got)
    if not frags:
        raise ValueError("all sources are empty")
    return _rows_from_fragments(frags, T, batch), new


def initial_cursors(mixture: MixtureSpec) -> dict[str, DataSourceCursor]:
    return {n: DataSourceCursor(n) for n, _ in mixture.weights}


# -- synthetic corpus -------------------------------------------------------------------------
_SUBJECTS = ["the cat", "a dog", "the old man", "my sister", "the robot", "a small bird", "the teacher"]
_VERBS = ["sees", "likes", "follows", "paints", "finds", "helps", "counts"]
_OBJECTS = ["the red ball", "a green tree", "the river", "an apple", "the blue house", "a quiet song"]


def synthetic_documents(n_tokens: int, seed: int = 0) -> dict[str, list[str]]:
    """Three deterministic text sources: arithmetic facts, counting runs, templated sentences."""
    rng = np.random.default_rng(seed)
    out = {"arith": [], "count": [], "text": []}
    per = n_tokens // 3
    sizes = {k: 0 for k in out}
    while min(sizes.values()) < per:
        if sizes["arith"] < per:
            lines = []
            for _ in range(int(rng.integers(3, 9))):
                a, b = (int(v) for v in rng.integers(0, 100, 2))
                op = "+" if rng.random() < 0.5 else "-"
                lines.append(f"{a} {op} {b} = {a + b if op == '+' else a - b}.")
            doc = "\n".join(lines)
            out["arith"].append(doc)
            sizes["arith"] += len(doc.encode()) + 1
        if sizes["count"] < per:
            start, step = int(rng.integers(0, 50)), int(rng.integers(1, 4))
            doc = " ".join(str(start + step * i) for i in range(int(rng.integers(8, 30))))
            out["count"].append(doc)
            sizes["count"] += len(doc.encode()) + 1
        if sizes["text"] < per:
            sents = []
            for _ in range(int(rng.integers(2, 6))):
                s, v, o = (x[int(rng.integers(len(x)))] for x in (_SUBJECTS, _VERBS, _OBJECTS))
                sents.append(f"{s} {v} {o}.")
            doc = " ".join(sents).capitalize()
            out["text"].append(doc)
            sizes["text"] += len(doc.encode()) + 1
    return out


def build_synthetic_corpus(directory: str | Path, n_tokens: int = 200_000, seed: int = 0,
                           tokenizer: ByteTokenizer | None = None) -> dict[str, dict]:
    tok = tokenizer or ByteTokenizer()
    texts = synthetic_documents(n_tokens, seed)
    return {name: write_source(directory, name, [tok.encode(t) for t in docs]) for name, docs in texts.items()}


def build_corpus_from_text(directory: str | Path, name: str, paths: Sequence[str | Path],
                           tokenizer: ByteTokenizer | None = None) -> dict:
    """One document per input file (blank-line separated paragraphs are kept together)."""
    tok = tokenizer or ByteTokenizer()
    docs = [tok.encode(Path(p).read_bytes().decode("utf-8", errors="strict")) for p in paths]
    return write_source(directory, name, docs)
