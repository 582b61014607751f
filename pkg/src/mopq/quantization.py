"""Product-quantization codebooks, codeword selection, and ADC tables.

A ``CodebookSet`` holds ``M`` codebooks of ``L`` codewords each, with codeword
dimension ``dim / M``. Vectors are quantized per subspace by scoring the
sub-vector against every codeword of the matching codebook and picking the
argmax (ties go to the lowest index). Codes are stored as uint16, supporting
up to 65536 codewords per codebook.

The module has two layers:

* value-level numpy functions (``assign_codes``, ``reconstruct``,
  ``build_distance_table``, ``adc_score``) used by retrieval and evaluation;
* graph builders (``quantize_ste``) used during training, whose forward
  values agree bit-exactly with the value-level path because both call the
  same scoring kernels.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autograd as ag
from .autograd import Array, Node
from .errors import ShapeError, UsageError

SELECTION_KINDS = ("l2", "cosine", "product", "bilinear")


@dataclass(frozen=True)
class CodebookSet:
    """M codebooks of L codewords each; codewords has shape (M, L, dim/M)."""

    codewords: Array

    def __post_init__(self):
        cw = np.asarray(self.codewords, dtype=np.float64)
        if cw.ndim != 3:
            raise ShapeError(f"codewords must be (M, L, dim/M), got shape {cw.shape}")
        if not np.all(np.isfinite(cw)):
            raise UsageError("codewords must be finite")
        object.__setattr__(self, "codewords", cw)

    @property
    def num_books(self) -> int:
        return self.codewords.shape[0]

    @property
    def num_codewords(self) -> int:
        return self.codewords.shape[1]

    @property
    def sub_dim(self) -> int:
        return self.codewords.shape[2]

    @property
    def dim(self) -> int:
        return self.num_books * self.sub_dim

    @staticmethod
    def validate_geometry(num_books: int, num_codewords: int, dim: int) -> int:
        if num_books < 1 or num_codewords < 1:
            raise UsageError("need at least one codebook and one codeword")
        if num_codewords > 65536:
            raise UsageError("codes are uint16; at most 65536 codewords per codebook")
        if dim % num_books != 0:
            raise UsageError(f"embedding dim {dim} is not divisible by {num_books} codebooks")
        return dim // num_books


@dataclass(frozen=True)
class SelectionVariant:
    """Codeword-selection scoring rule.

    kind: one of l2 (negative Euclidean distance), cosine, product (inner
    product), bilinear (z W C^T with a learnable square matrix per codebook).
    ``bilinear_weights`` has shape (M, dim/M, dim/M) and must be present
    exactly when kind is bilinear.
    """

    kind: str = "l2"
    bilinear_weights: Array | None = None

    def __post_init__(self):
        if self.kind not in SELECTION_KINDS:
            raise UsageError(f"unknown selection kind {self.kind!r}; expected one of {SELECTION_KINDS}")
        has_w = self.bilinear_weights is not None
        if has_w != (self.kind == "bilinear"):
            raise UsageError("bilinear_weights must be given iff kind='bilinear'")
        if has_w:
            object.__setattr__(self, "bilinear_weights",
                               np.asarray(self.bilinear_weights, dtype=np.float64))


def split_subvectors(z: Array, num_books: int) -> list[Array]:
    z = np.asarray(z, dtype=np.float64)
    width = z.shape[-1]
    if width % num_books != 0:
        raise UsageError(f"vector width {width} not divisible by {num_books} codebooks")
    sub = width // num_books
    return [z[..., i * sub:(i + 1) * sub] for i in range(num_books)]


def score_values(sub: Array, codebook: Array, variant: SelectionVariant,
                 book_index: int = 0) -> Array:
    """Selection scores for one codebook; higher means more relevant.

    ``sub`` is (dim/M,) or (N, dim/M); the result is (L,) or (N, L). This is
    the single scoring kernel shared by the value-level and graph paths.
    """
    sub = np.asarray(sub, dtype=np.float64)
    if variant.kind == "l2":
        return ag.neg_l2_score_values(sub, codebook)
    if variant.kind == "cosine":
        return ag.cosine_score_values(sub, codebook)
    if variant.kind == "product":
        return sub @ codebook.T
    # bilinear: (z W) C^T, identical op order to the graph path
    return (sub @ variant.bilinear_weights[book_index]) @ codebook.T


def selection_scores(sub_vector: Array, codebook_index: int, books: CodebookSet,
                     variant: SelectionVariant) -> Array:
    """Scores of one sub-vector against all L codewords of one codebook."""
    sub_vector = np.asarray(sub_vector, dtype=np.float64)
    if sub_vector.shape != (books.sub_dim,):
        raise UsageError(
            f"sub-vector has shape {sub_vector.shape}, expected ({books.sub_dim},)")
    return score_values(sub_vector, books.codewords[codebook_index], variant, codebook_index)


def assign_codes(z: Array, books: CodebookSet, variant: SelectionVariant) -> Array:
    """Codeword indices for one vector; shape (M,), dtype uint16."""
    z = np.asarray(z, dtype=np.float64)
    if z.shape != (books.dim,):
        raise UsageError(f"vector has shape {z.shape}, expected ({books.dim},)")
    return assign_codes_batch(z[None, :], books, variant)[0]


def assign_codes_batch(z: Array, books: CodebookSet, variant: SelectionVariant,
                       chunk: int = 4096) -> Array:
    """Codeword indices for a batch of vectors; shape (n, M), dtype uint16."""
    z = np.asarray(z, dtype=np.float64)
    if z.ndim != 2 or z.shape[1] != books.dim:
        raise UsageError(f"batch has shape {z.shape}, expected (n, {books.dim})")
    n = z.shape[0]
    codes = np.empty((n, books.num_books), dtype=np.uint16)
    for start in range(0, n, chunk):
        block = z[start:start + chunk]
        for i, sub in enumerate(split_subvectors(block, books.num_books)):
            scores = score_values(sub, books.codewords[i], variant, i)
            codes[start:start + chunk, i] = np.argmax(scores, axis=-1).astype(np.uint16)
    return codes


def reconstruct(codes: Array, books: CodebookSet) -> Array:
    """Concatenation of the assigned codewords; shape (dim,)."""
    codes = _check_codes(codes, books)
    return np.concatenate([books.codewords[i, codes[i]] for i in range(books.num_books)])


def reconstruct_batch(codes: Array, books: CodebookSet) -> Array:
    codes = np.asarray(codes)
    if codes.ndim != 2 or codes.shape[1] != books.num_books:
        raise UsageError(f"codes have shape {codes.shape}, expected (n, {books.num_books})")
    parts = [books.codewords[i][codes[:, i].astype(np.intp)] for i in range(books.num_books)]
    return np.concatenate(parts, axis=1)


def build_distance_table(q: Array, books: CodebookSet) -> Array:
    """Inner products of each query sub-vector with every codeword; shape (M, L)."""
    q = np.asarray(q, dtype=np.float64)
    if q.shape != (books.dim,):
        raise UsageError(f"query has shape {q.shape}, expected ({books.dim},)")
    subs = split_subvectors(q, books.num_books)
    return np.stack([books.codewords[i] @ subs[i] for i in range(books.num_books)])


def adc_score(table: Array, codes: Array) -> float:
    """Score one quantized key against a precomputed table: sum_i T[i, b_i]."""
    codes = np.asarray(codes)
    if table.ndim != 2 or codes.shape != (table.shape[0],):
        raise UsageError(f"table {table.shape} and codes {codes.shape} disagree")
    total = 0.0
    for i in range(table.shape[0]):
        total += table[i, int(codes[i])]
    return total


def adc_score_batch(table: Array, codes: Array) -> Array:
    """ADC scores for many keys at once; matches adc_score's summation order."""
    codes = np.asarray(codes, dtype=np.intp)
    n, m = codes.shape
    out = np.zeros(n, dtype=np.float64)
    for i in range(m):
        out += table[i, codes[:, i]]
    return out


def _check_codes(codes: Array, books: CodebookSet) -> Array:
    codes = np.asarray(codes)
    if codes.shape != (books.num_books,):
        raise UsageError(f"codes have shape {codes.shape}, expected ({books.num_books},)")
    if np.any(codes.astype(np.int64) >= books.num_codewords):
        raise UsageError("code index out of range")
    return codes.astype(np.intp)


# ---------------------------------------------------------------------------
# Graph builders
# ---------------------------------------------------------------------------

@dataclass
class FrozenSte:
    """Per-codebook constants captured at a base point for the soft surrogate.

    Replacing the straight-through parts of a quantization graph with these
    frozen constants yields a differentiable function whose value at the base
    point equals the hard forward value and whose derivatives equal the
    straight-through backward gradients, so central differences of the
    surrogate are a valid oracle for the backward pass.
    """

    idx: list[Array] = field(default_factory=list)          # argmax per book
    onehot_minus_p: list[Array] = field(default_factory=list)  # (N, L) per book
    one_minus_psel: list[Array] = field(default_factory=list)  # (N,) per book


@dataclass
class QuantizeResult:
    node: Node               # (N, dim) or (dim,) quantized embedding
    commitment: Node         # scalar; forward value exactly 0
    codes: Array             # (N, M) or (M,) uint16
    frozen: FrozenSte        # captured constants for the surrogate oracle


def scores_node(sub: Node, codebook: Node, variant: SelectionVariant,
                bilinear: Node | None = None) -> Node:
    """Graph version of score_values; value-identical by construction."""
    if variant.kind == "l2":
        return ag.l2_scores(sub, codebook)
    if variant.kind == "cosine":
        return ag.cosine_scores(sub, codebook)
    if variant.kind == "product":
        return ag.matmul(sub, ag.transpose(codebook))
    if bilinear is None:
        raise UsageError("bilinear selection needs a weight node")
    return ag.matmul(ag.matmul(sub, bilinear), ag.transpose(codebook))


def quantize_ste(z: Node, book_nodes: list[Node], variant: SelectionVariant,
                 bilinear_nodes: list[Node] | None = None,
                 commitment_grad: str = "ste",
                 frozen: FrozenSte | None = None) -> QuantizeResult:
    """Quantize an embedding node with straight-through hard assignment.

    Forward value is bit-equal to ``reconstruct(assign_codes(z.value))``. The
    backward pass routes gradients through the softmax over selection scores
    (the soft path) and sends the upstream gradient of each selected codeword
    to that codeword directly. The returned commitment node is the selection
    factor of the contrastive objective: its forward value is exactly zero
    and its gradient is minus the gradient of the soft selection probability.

    With ``frozen`` given, builds the fully differentiable surrogate around
    the captured base point instead; used by finite-difference oracles.
    """
    num_books = len(book_nodes)
    single = z.value.ndim == 1
    sub_dim = z.value.shape[-1] // num_books
    parts: list[Node] = []
    commitments: list[Node] = []
    capture = FrozenSte()
    codes = []
    for i, book in enumerate(book_nodes):
        sub = ag.slice_cols(z, i * sub_dim, (i + 1) * sub_dim)
        w_node = bilinear_nodes[i] if variant.kind == "bilinear" else None
        scores = scores_node(sub, book, variant, w_node)
        probs = ag.row_softmax(scores)
        if frozen is None:
            idx = np.argmax(scores.value, axis=-1)
            idx_rows = np.atleast_1d(idx)
            parts.append(ag.straight_through_select(scores, book))
            probs_rows = ag.vstack([probs]) if single else probs
            sel = ag.ste_selected_prob(probs_rows, idx_rows, mode=commitment_grad)
            commitments.append(ag.negate(ag.reduce_sum(ag.log(sel))))
            p_rows = np.atleast_2d(probs.value)
            onehot = np.zeros_like(p_rows)
            onehot[np.arange(p_rows.shape[0]), idx_rows] = 1.0
            capture.idx.append(idx_rows)
            capture.onehot_minus_p.append(onehot - p_rows)
            capture.one_minus_psel.append(1.0 - p_rows[np.arange(p_rows.shape[0]), idx_rows])
        else:
            idx_rows = frozen.idx[i]
            idx = idx_rows[0] if single else idx_rows
            # (one_hot0 - p0 + p) @ C: at the base point the value equals the
            # hard selection and the derivatives equal the straight-through
            # backward gradients.
            offset = frozen.onehot_minus_p[i][0] if single else frozen.onehot_minus_p[i]
            coeff = ag.add(ag.constant(offset), probs)
            parts.append(ag.matmul(coeff, book))
            if single:
                psel = ag.slice_cols(probs, int(idx), int(idx) + 1)
                sel_offset = frozen.one_minus_psel[i][:1]
            else:
                psel = ag.take_per_row(probs, idx_rows)
                sel_offset = frozen.one_minus_psel[i]
            if commitment_grad == "ste":
                surrogate = ag.add(ag.constant(sel_offset), psel)
            else:
                surrogate = psel
            commitments.append(ag.negate(ag.reduce_sum(ag.log(surrogate))))
        codes.append(np.asarray(idx, dtype=np.uint16))
    quantized = ag.concat_cols(parts)
    total_commitment = commitments[0]
    for extra in commitments[1:]:
        total_commitment = ag.add(total_commitment, extra)
    codes_arr = np.stack(codes, axis=-1)
    return QuantizeResult(node=quantized, commitment=total_commitment,
                          codes=codes_arr, frozen=capture)
