"""Datasets, feature hashing, and binary artifact formats.

Embedding files use the ``MOPQEMB1`` layout: magic bytes, little-endian u32
dimension, u64 record count, then per record a u32-length-prefixed UTF-8 id
followed by ``dim`` float32 values. Checkpoints use ``MOPQCKPT1``: magic, a
u32-length-prefixed JSON header describing configs and parameter shapes, then
the raw float64 parameter payloads in header order. Both formats round-trip
bit-exactly and are written deterministically.

A paired dataset lives in a directory as ``queries.emb``, ``keys.emb`` and
``pairs.tsv`` (query id, key id, split per line). Every query has exactly one
ground-truth key.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping

import numpy as np

from . import encoder as enc
from . import training as tr
from .autograd import Array
from .errors import DataFormatError, UsageError

EMBEDDING_MAGIC = b"MOPQEMB1"
CHECKPOINT_MAGIC = b"MOPQCKPT1"

SPLITS = ("train", "valid", "test")


# ---------------------------------------------------------------------------
# Feature hashing
# ---------------------------------------------------------------------------

_FNV_OFFSET = 0xCBF29CE484222325
_FNV_PRIME = 0x100000001B3
_MASK64 = 0xFFFFFFFFFFFFFFFF


def fnv1a_64(data: bytes) -> int:
    h = _FNV_OFFSET
    for byte in data:
        h ^= byte
        h = (h * _FNV_PRIME) & _MASK64
    return h


def hash_featurize(text: str, dim: int) -> Array:
    """Signed feature hashing of whitespace tokens, unit-normalized.

    Tokens are lowercased and hashed with 64-bit FNV-1a; the hash picks the
    bucket (mod dim) and bit 63 picks the sign. The zero vector stays zero.
    """
    if dim < 1:
        raise UsageError("dim must be >= 1")
    out = np.zeros(dim, dtype=np.float64)
    for token in text.lower().split():
        h = fnv1a_64(token.encode("utf-8"))
        sign = 1.0 if (h >> 63) == 0 else -1.0
        out[h % dim] += sign
    norm = np.linalg.norm(out)
    if norm > 0.0:
        out /= norm
    return out


# ---------------------------------------------------------------------------
# Paired datasets
# ---------------------------------------------------------------------------

@dataclass
class PairedDataset:
    queries: dict[str, Array]
    keys: dict[str, Array]
    pairs: list[tuple[str, str]]
    splits: dict[str, list[int]] = field(default_factory=dict)

    def __post_init__(self):
        seen_queries = set()
        for qid, kid in self.pairs:
            if qid not in self.queries:
                raise UsageError(f"pair references unknown query id {qid!r}")
            if kid not in self.keys:
                raise UsageError(f"pair references unknown key id {kid!r}")
            if qid in seen_queries:
                raise UsageError(f"query {qid!r} appears in more than one pair")
            seen_queries.add(qid)
        claimed: set[int] = set()
        for name, indices in self.splits.items():
            if name not in SPLITS:
                raise UsageError(f"unknown split {name!r}")
            overlap = claimed.intersection(indices)
            if overlap:
                raise UsageError(f"splits overlap at pair indices {sorted(overlap)[:5]}")
            claimed.update(indices)

    def split_arrays(self, split: str) -> tuple[Array, Array, list[str], list[str]]:
        """Aligned (query matrix, key matrix, query ids, key ids) of one split."""
        if split not in self.splits:
            raise UsageError(f"dataset has no split {split!r}")
        qids = [self.pairs[i][0] for i in self.splits[split]]
        kids = [self.pairs[i][1] for i in self.splits[split]]
        xq = np.asarray([self.queries[i] for i in qids], dtype=np.float64)
        xk = np.asarray([self.keys[i] for i in kids], dtype=np.float64)
        return xq, xk, qids, kids

    @property
    def input_dim(self) -> int:
        first = next(iter(self.queries.values()))
        return int(first.shape[0])


def gen_synthetic(n_pairs: int, input_dim: int, cluster_count: int,
                  noise_sigma: float, seed: int,
                  noise_anisotropy: float = 1.0) -> PairedDataset:
    """Clustered paired data: key and query share a Gaussian cluster center.

    Each pair's key is its center plus Gaussian noise; the query is the same
    center plus independent noise, so with zero noise the query equals its
    key exactly. Splits are a seeded 80/10/10 permutation.

    ``noise_anisotropy`` > 1 ramps the per-coordinate noise scale
    geometrically from ``1/sqrt(a)`` to ``sqrt(a)`` across the dimensions
    (unit geometric mean, so ``noise_sigma`` keeps its overall meaning).
    This gives the coordinates unequal signal-to-noise ratios the way real
    embedding spaces do; 1.0 keeps the noise isotropic.
    """
    if cluster_count > n_pairs:
        raise UsageError("cluster_count must not exceed n_pairs")
    if cluster_count < 1 or n_pairs < 1:
        raise UsageError("need at least one cluster and one pair")
    if noise_anisotropy < 1.0:
        raise UsageError("noise_anisotropy must be >= 1")
    rng = np.random.default_rng(seed)
    centers = rng.standard_normal((cluster_count, input_dim))
    owner = np.arange(n_pairs) % cluster_count
    scales = np.geomspace(noise_anisotropy ** -0.5, noise_anisotropy ** 0.5, input_dim) \
        if noise_anisotropy != 1.0 else np.ones(input_dim)
    keys = centers[owner] + noise_sigma * rng.standard_normal((n_pairs, input_dim)) * scales
    queries = centers[owner] + noise_sigma * rng.standard_normal((n_pairs, input_dim)) * scales
    width = len(str(n_pairs - 1))
    qids = [f"q{i:0{width}d}" for i in range(n_pairs)]
    kids = [f"k{i:0{width}d}" for i in range(n_pairs)]
    perm = rng.permutation(n_pairs)
    n_train = int(0.8 * n_pairs)
    n_valid = int(0.1 * n_pairs)
    splits = {
        "train": sorted(int(i) for i in perm[:n_train]),
        "valid": sorted(int(i) for i in perm[n_train:n_train + n_valid]),
        "test": sorted(int(i) for i in perm[n_train + n_valid:]),
    }
    return PairedDataset(
        queries={qid: queries[i] for i, qid in enumerate(qids)},
        keys={kid: keys[i] for i, kid in enumerate(kids)},
        pairs=list(zip(qids, kids)),
        splits=splits,
    )


# ---------------------------------------------------------------------------
# Embedding files
# ---------------------------------------------------------------------------

def write_embeddings(path, vectors: Mapping[str, Array]) -> None:
    if not vectors:
        raise UsageError("refusing to write an empty embedding file")
    dims = {np.asarray(v).shape for v in vectors.values()}
    if len(dims) != 1 or len(next(iter(dims))) != 1:
        raise UsageError(f"all vectors must share one 1-D shape, got {dims}")
    dim = next(iter(dims))[0]
    with open(path, "wb") as f:
        f.write(EMBEDDING_MAGIC)
        f.write(struct.pack("<IQ", dim, len(vectors)))
        for vec_id, vec in vectors.items():
            raw = vec_id.encode("utf-8")
            f.write(struct.pack("<I", len(raw)))
            f.write(raw)
            f.write(np.asarray(vec, dtype="<f4").tobytes())


def read_embeddings(path) -> dict[str, Array]:
    blob = Path(path).read_bytes()
    if len(blob) == 0:
        raise DataFormatError(f"{path} is empty", offset=0)
    if len(blob) < 8 or blob[:8] != EMBEDDING_MAGIC:
        raise DataFormatError(f"bad embedding magic in {path}", offset=0)
    off = 8
    if len(blob) < off + 12:
        raise DataFormatError("truncated embedding header", offset=len(blob))
    dim, count = struct.unpack_from("<IQ", blob, off)
    off += 12
    out: dict[str, Array] = {}
    for record in range(count):
        if len(blob) < off + 4:
            raise DataFormatError(
                f"record {record}: expected 4 length bytes, have {len(blob) - off}",
                offset=off)
        (id_len,) = struct.unpack_from("<I", blob, off)
        off += 4
        need = id_len + 4 * dim
        if len(blob) < off + need:
            raise DataFormatError(
                f"record {record}: expected {need} payload bytes, have {len(blob) - off}",
                offset=off)
        vec_id = blob[off:off + id_len].decode("utf-8")
        off += id_len
        vec = np.frombuffer(blob, dtype="<f4", count=dim, offset=off).astype(np.float64)
        off += 4 * dim
        out[vec_id] = vec
    if off != len(blob):
        raise DataFormatError(
            f"declared {count} records ending at byte {off}, file has {len(blob)} bytes",
            offset=off)
    return out


# ---------------------------------------------------------------------------
# Dataset directories
# ---------------------------------------------------------------------------

def save_dataset(dataset: PairedDataset, out_dir) -> dict[str, str]:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    write_embeddings(out / "queries.emb", dataset.queries)
    write_embeddings(out / "keys.emb", dataset.keys)
    split_of = {}
    for name, indices in dataset.splits.items():
        for i in indices:
            split_of[i] = name
    with open(out / "pairs.tsv", "w", encoding="utf-8") as f:
        for i, (qid, kid) in enumerate(dataset.pairs):
            f.write(f"{qid}\t{kid}\t{split_of.get(i, 'train')}\n")
    return {"queries": str(out / "queries.emb"), "keys": str(out / "keys.emb"),
            "pairs": str(out / "pairs.tsv")}


def load_dataset(data_dir) -> PairedDataset:
    root = Path(data_dir)
    for name in ("queries.emb", "keys.emb", "pairs.tsv"):
        if not (root / name).exists():
            raise DataFormatError(f"dataset directory {root} is missing {name}")
    queries = read_embeddings(root / "queries.emb")
    keys = read_embeddings(root / "keys.emb")
    pairs: list[tuple[str, str]] = []
    splits: dict[str, list[int]] = {name: [] for name in SPLITS}
    with open(root / "pairs.tsv", encoding="utf-8") as f:
        for lineno, line in enumerate(f):
            line = line.rstrip("\n")
            if not line:
                continue
            parts = line.split("\t")
            if len(parts) != 3:
                raise DataFormatError(f"pairs.tsv line {lineno + 1}: expected 3 columns")
            qid, kid, split = parts
            if split not in SPLITS:
                raise DataFormatError(f"pairs.tsv line {lineno + 1}: unknown split {split!r}")
            splits[split].append(len(pairs))
            pairs.append((qid, kid))
    return PairedDataset(queries=queries, keys=keys, pairs=pairs,
                         splits={k: v for k, v in splits.items() if v})


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------

def save_model(path, model: tr.Model, meta: dict | None = None) -> None:
    header = {
        "encoder": {
            "input_dim": model.encoder.input_dim,
            "hidden_dim": model.encoder.hidden_dim,
            "output_dim": model.encoder.output_dim,
            "depth": model.encoder.depth,
            "activation": model.encoder.activation,
        },
        "codebooks": {
            "num_books": model.codebooks.num_books,
            "num_codewords": model.codebooks.num_codewords,
            "selection": model.codebooks.selection,
        },
        "params": [[name, list(value.shape)] for name, value in model.params.items()],
        "meta": meta or {},
    }
    payload = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    with open(path, "wb") as f:
        f.write(CHECKPOINT_MAGIC)
        f.write(struct.pack("<I", len(payload)))
        f.write(payload)
        for _, value in model.params.items():
            f.write(np.asarray(value, dtype="<f8").tobytes())


def load_model(path) -> tuple[tr.Model, dict]:
    blob = Path(path).read_bytes()
    magic_len = len(CHECKPOINT_MAGIC)
    if len(blob) < magic_len or blob[:magic_len] != CHECKPOINT_MAGIC:
        raise DataFormatError(f"bad checkpoint magic in {path}", offset=0)
    off = magic_len
    if len(blob) < off + 4:
        raise DataFormatError("truncated checkpoint header length", offset=off)
    (header_len,) = struct.unpack_from("<I", blob, off)
    off += 4
    if len(blob) < off + header_len:
        raise DataFormatError("truncated checkpoint header", offset=off)
    header = json.loads(blob[off:off + header_len].decode("utf-8"))
    off += header_len
    params = {}
    for name, shape in header["params"]:
        count = int(np.prod(shape)) if shape else 1
        if len(blob) < off + 8 * count:
            raise DataFormatError(f"truncated parameter {name!r}", offset=off)
        params[name] = np.frombuffer(blob, dtype="<f8", count=count, offset=off) \
            .reshape(shape).copy()
        off += 8 * count
    if off != len(blob):
        raise DataFormatError("trailing bytes after parameters", offset=off)
    model = tr.Model(
        encoder=enc.EncoderConfig(**header["encoder"]),
        codebooks=tr.CodebookConfig(**header["codebooks"]),
        params=params,
    )
    return model, header.get("meta", {})
