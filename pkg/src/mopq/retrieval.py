"""Quantized index construction, ADC top-K search, exact oracle, recall.

Search scores a raw query against quantized keys through one precomputed
distance table per query (asymmetric distance computation). Because the table
holds exact inner products with every codeword, ADC ranking equals ranking by
the direct inner product with each key's reconstruction; the table changes
only the summation order. Ties are broken by key id ascending everywhere.

Index files use the ``MOPQIDX1`` layout: magic bytes, little-endian u32
codebook count / codeword count / dimension, u64 key count, codewords as
float32, codes as uint16, then length-prefixed UTF-8 key ids.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from . import quantization as q
from .autograd import Array
from .errors import DataFormatError, UsageError

INDEX_MAGIC = b"MOPQIDX1"


@dataclass
class QuantizedIndex:
    books: q.CodebookSet
    codes: Array              # (n, M) uint16
    key_ids: list[str]

    def __post_init__(self):
        if self.codes.shape != (len(self.key_ids), self.books.num_books):
            raise UsageError(
                f"codes shape {self.codes.shape} does not match "
                f"{len(self.key_ids)} keys x {self.books.num_books} books")

    def __len__(self) -> int:
        return len(self.key_ids)


@dataclass
class EvalResult:
    recall_at: dict[int, float]
    query_count: int


def build_index(keys: Mapping[str, Array], model) -> QuantizedIndex:
    """Encode raw key vectors with the model and assign codes.

    ``model`` must expose ``encode_values``, ``books`` and ``variant``
    (``training.Model`` does). Deterministic: identical vectors get identical
    codes.
    """
    if not keys:
        raise UsageError("cannot index an empty key set")
    key_ids = list(keys.keys())
    raw = np.asarray([keys[k] for k in key_ids], dtype=np.float64)
    embedded = model.encode_values(raw)
    codes = q.assign_codes_batch(embedded, model.books, model.variant)
    return QuantizedIndex(books=model.books, codes=codes, key_ids=key_ids)


def _ranked(scores: Array, key_ids: Sequence[str], topn: int) -> list[tuple[str, float]]:
    ids = np.asarray(key_ids)
    order = np.lexsort((ids, -scores))
    top = order[:min(topn, len(ids))]
    return [(str(ids[i]), float(scores[i])) for i in top]


def search(index: QuantizedIndex, query_embedding: Array, topn: int) -> list[tuple[str, float]]:
    """ADC top-N: one distance table, then a table lookup per key."""
    if topn < 1:
        raise UsageError("topn must be >= 1")
    table = q.build_distance_table(np.asarray(query_embedding, dtype=np.float64), index.books)
    scores = q.adc_score_batch(table, index.codes)
    return _ranked(scores, index.key_ids, topn)


def exact_search(keys: Mapping[str, Array], query: Array, topn: int) -> list[tuple[str, float]]:
    """Brute-force inner-product ranking over raw vectors; same tie rule."""
    if topn < 1:
        raise UsageError("topn must be >= 1")
    if not keys:
        raise UsageError("cannot search an empty key set")
    key_ids = list(keys.keys())
    mat = np.asarray([keys[k] for k in key_ids], dtype=np.float64)
    scores = mat @ np.asarray(query, dtype=np.float64)
    return _ranked(scores, key_ids, topn)


def recall_at_n(results: Mapping[str, Sequence[str]], ground_truth: Mapping[str, str],
                ns: Sequence[int]) -> EvalResult:
    """Fraction of queries whose single ground-truth key appears in the top N."""
    if not ground_truth:
        raise UsageError("no queries to evaluate")
    recall = {}
    for n in ns:
        hits = 0
        for qid, truth in ground_truth.items():
            ranked = results.get(qid, [])
            if truth in list(ranked)[:n]:
                hits += 1
        recall[int(n)] = hits / len(ground_truth)
    return EvalResult(recall_at=recall, query_count=len(ground_truth))


def adc_score_matrix(query_embs: Array, codes: Array, books: q.CodebookSet) -> Array:
    """All query-key ADC scores at once; summation order matches adc_score."""
    query_embs = np.asarray(query_embs, dtype=np.float64)
    codes = np.asarray(codes, dtype=np.intp)
    subs = q.split_subvectors(query_embs, books.num_books)
    out = np.zeros((query_embs.shape[0], codes.shape[0]), dtype=np.float64)
    for i in range(books.num_books):
        table = subs[i] @ books.codewords[i].T       # (nq, L)
        out += table[:, codes[:, i]]
    return out


def paired_recall(query_embs: Array, key_embs: Array, books: q.CodebookSet,
                  variant: q.SelectionVariant, ns: Sequence[int]) -> dict[int, float]:
    """Recall@N where query i's ground truth is key i, over quantized keys.

    Ranks by ADC score with ties broken toward the lower key position; used
    for per-epoch validation and split evaluation.
    """
    nq = query_embs.shape[0]
    if key_embs.shape[0] != nq:
        raise UsageError("paired_recall needs aligned query/key arrays")
    codes = q.assign_codes_batch(np.asarray(key_embs, dtype=np.float64), books, variant)
    scores = adc_score_matrix(query_embs, codes, books)
    gt = np.arange(nq)
    gt_scores = scores[gt, gt]
    higher = (scores > gt_scores[:, None]).sum(axis=1)
    ties_before = ((scores == gt_scores[:, None])
                   & (np.arange(nq)[None, :] < gt[:, None])).sum(axis=1)
    ranks = 1 + higher + ties_before
    return {int(n): float((ranks <= n).mean()) for n in ns}


# ---------------------------------------------------------------------------
# Index file I/O
# ---------------------------------------------------------------------------

def save_index(index: QuantizedIndex, path) -> None:
    books = index.books
    with open(path, "wb") as f:
        f.write(INDEX_MAGIC)
        f.write(struct.pack("<IIIQ", books.num_books, books.num_codewords,
                            books.dim, len(index.key_ids)))
        f.write(books.codewords.astype("<f4").tobytes())
        f.write(index.codes.astype("<u2").tobytes())
        for key_id in index.key_ids:
            raw = key_id.encode("utf-8")
            f.write(struct.pack("<I", len(raw)))
            f.write(raw)


def load_index(path) -> QuantizedIndex:
    blob = Path(path).read_bytes()
    if len(blob) < len(INDEX_MAGIC) or blob[:8] != INDEX_MAGIC:
        raise DataFormatError(f"bad index magic in {path}", offset=0)
    off = 8
    header = struct.calcsize("<IIIQ")
    if len(blob) < off + header:
        raise DataFormatError("truncated index header", offset=len(blob))
    m, l, dim, count = struct.unpack_from("<IIIQ", blob, off)
    off += header
    if m == 0 or l == 0 or dim % max(m, 1) != 0:
        raise DataFormatError(f"inconsistent index geometry M={m} L={l} d={dim}", offset=8)
    cw_bytes = m * l * (dim // m) * 4
    code_bytes = count * m * 2
    if len(blob) < off + cw_bytes + code_bytes:
        raise DataFormatError(
            f"index payload too short: expected at least {off + cw_bytes + code_bytes} "
            f"bytes, found {len(blob)}", offset=len(blob))
    codewords = np.frombuffer(blob, dtype="<f4", count=m * l * (dim // m), offset=off)
    books = q.CodebookSet(codewords.astype(np.float64).reshape(m, l, dim // m))
    off += cw_bytes
    codes = np.frombuffer(blob, dtype="<u2", count=count * m, offset=off) \
        .reshape(int(count), m).copy()
    off += code_bytes
    key_ids = []
    for _ in range(count):
        if len(blob) < off + 4:
            raise DataFormatError("truncated key id length", offset=off)
        (id_len,) = struct.unpack_from("<I", blob, off)
        off += 4
        if len(blob) < off + id_len:
            raise DataFormatError("truncated key id", offset=off)
        key_ids.append(blob[off:off + id_len].decode("utf-8"))
        off += id_len
    if off != len(blob):
        raise DataFormatError(
            f"trailing bytes: expected {off}, file has {len(blob)}", offset=off)
    return QuantizedIndex(books=books, codes=codes, key_ids=key_ids)
