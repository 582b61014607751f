"""Contrastive and reconstruction objectives.

The multinoulli contrastive loss (MCL) of a batch couples two factors per
instance: the straight-through selection probability of the instance's own
quantized key (the commitment factor, whose forward value is exactly zero
after hard thresholding) and the softmax matching probability of the query
against the pool of quantized keys. The reconstruction loss is the classical
distortion objective, a sum of per-key Euclidean norms.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import autograd as ag
from . import quantization as q
from .autograd import Array, Node
from .errors import UsageError


@dataclass
class LossReport:
    """Batch loss summary; ``node`` is the scalar graph node to backprop."""

    total: float
    matching_term: float
    commitment_forward: float
    per_instance: list[float]
    node: Node


def _as_matrix_node(keys: Sequence[Node] | Node) -> Node:
    if isinstance(keys, Node):
        return keys
    if len(keys) == 0:
        raise UsageError("need at least one key")
    return ag.vstack(list(keys))


def matching_softmax_loss(query: Node, keys: Sequence[Node] | Node, target: int) -> Node:
    """Negative log softmax of the query-key inner products at the target row."""
    pool = _as_matrix_node(keys)
    if target < 0 or target >= pool.value.shape[0]:
        raise UsageError(f"target {target} outside key pool of size {pool.value.shape[0]}")
    scores = ag.matmul(pool, query)
    log_probs = ag.log(ag.row_softmax(scores))
    return ag.negate(ag.reduce_sum(ag.slice_cols(log_probs, target, target + 1)))


def matching_loss_rows(queries: Node, pool: Node, targets: Array) -> Node:
    """Per-query negative log softmax losses against a shared key pool.

    queries: (N, d); pool: (K, d); targets: (N,) row indices into the pool.
    Returns a vector node of length N.
    """
    scores = ag.matmul(queries, ag.transpose(pool))
    log_probs = ag.log(ag.row_softmax(scores))
    return ag.negate(ag.take_per_row(log_probs, np.asarray(targets, dtype=np.intp)))


def commitment_term(sub_vector: Node, codebook: Node, variant: q.SelectionVariant,
                    bilinear: Node | None = None, commitment_grad: str = "ste") -> Node:
    """Straight-through selection factor for one sub-vector.

    Forward value is exactly zero (minus the log of a hard probability one).
    Backward carries minus the gradient of the soft selection probability;
    with ``commitment_grad="logp"`` it carries the gradient of minus the log
    of the soft probability instead.
    """
    scores = q.scores_node(sub_vector, codebook, variant, bilinear)
    probs = ag.row_softmax(scores)
    if scores.value.ndim == 1:
        idx = np.array([np.argmax(scores.value)])
        probs = ag.vstack([probs])
    else:
        idx = np.argmax(scores.value, axis=-1)
    selected = ag.ste_selected_prob(probs, idx, mode=commitment_grad)
    return ag.negate(ag.reduce_sum(ag.log(selected)))


def mcl(queries: Sequence[Node] | Node, keys: Sequence[Node] | Node, targets,
        book_nodes: list[Node], variant: q.SelectionVariant,
        bilinear_nodes: list[Node] | None = None,
        commitment_grad: str = "ste") -> LossReport:
    """Multinoulli contrastive loss of one in-batch training step.

    ``keys`` are raw (not yet quantized) key embedding nodes; they are run
    through the straight-through quantizer here so the commitment factors can
    be attached to the instances that own them. ``targets[i]`` is the key row
    matching query ``i``. The total is the batch mean; its forward value
    equals the mean matching term exactly because every commitment factor is
    zero in the forward pass.
    """
    query_mat = _as_matrix_node(queries)
    key_mat = _as_matrix_node(keys)
    targets = np.asarray(targets, dtype=np.intp)
    n = query_mat.value.shape[0]
    if targets.shape != (n,):
        raise UsageError(f"need one target per query, got {targets.shape} for {n} queries")
    if np.any(targets >= key_mat.value.shape[0]):
        raise UsageError("target outside the key pool")

    quant = q.quantize_ste(key_mat, book_nodes, variant,
                           bilinear_nodes=bilinear_nodes,
                           commitment_grad=commitment_grad)
    per_row = matching_loss_rows(query_mat, quant.node, targets)
    total = ag.scale(ag.add(ag.reduce_sum(per_row), quant.commitment), 1.0 / n)
    matching_mean = float(per_row.value.mean())
    return LossReport(
        total=float(total.value),
        matching_term=matching_mean,
        commitment_forward=float(quant.commitment.value),
        per_instance=[float(v) for v in per_row.value],
        node=total,
    )


def reconstruction_loss(keys, books: q.CodebookSet, variant: q.SelectionVariant) -> float:
    """Sum over keys of the Euclidean distortion ||z - reconstruct(assign(z))||."""
    keys = np.atleast_2d(np.asarray(keys, dtype=np.float64))
    if keys.shape[0] == 0:
        raise UsageError("need at least one key")
    codes = q.assign_codes_batch(keys, books, variant)
    residual = keys - q.reconstruct_batch(codes, books)
    return float(np.linalg.norm(residual, axis=1).sum())


def squared_distortion_node(keys: Node, book_nodes: list[Node],
                            books: q.CodebookSet, variant: q.SelectionVariant) -> Node:
    """Mean squared reconstruction distortion with gradient-free assignments.

    Codes are recomputed from the current values on every call and treated as
    constants; gradients flow into both the embeddings and the selected
    codewords, which is the joint-training path of the reconstruction-loss
    baseline. The smooth squared form is used in the gradient path; report
    the norm form via ``reconstruction_loss``.
    """
    codes = q.assign_codes_batch(np.atleast_2d(keys.value), books, variant)
    n = codes.shape[0]
    sub = books.sub_dim
    terms: list[Node] = []
    for i, book in enumerate(book_nodes):
        selected = ag.take_rows(book, codes[:, i].astype(np.intp))
        diff = ag.add(ag.slice_cols(keys, i * sub, (i + 1) * sub), ag.negate(selected))
        terms.append(ag.reduce_sum(ag.mul(diff, diff)))
    total = terms[0]
    for t in terms[1:]:
        total = ag.add(total, t)
    return ag.scale(total, 1.0 / n)
