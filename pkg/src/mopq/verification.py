"""Constructive checks of the quantization-invariance and coverage claims.

Three runnable constructions:

* ``perturbation_radius`` computes, per codebook, half the smallest gap
  between each key sub-vector's nearest and second-nearest codeword
  distances. Shifting all codewords of a codebook by any vector shorter than
  this radius cannot change any assignment (triangle inequality).
* ``verify_lemma_and_nonmonotone`` realizes such a shift and checks the three
  observable consequences on a concrete sample: assignments bit-identical,
  reconstruction loss strictly increased, and every query's quantized ranking
  bit-identical (all ADC scores shift by a per-query constant).
* ``verify_positive_recon`` demonstrates that undersized codebooks leave a
  positive reconstruction loss and that appending a key's own sub-vectors as
  fresh codewords removes at least that key's distortion, reaching exactly
  zero once every key is covered.

The radius is computed over the finite key sample provided, so the
invariance statements are asserted for exactly those keys.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import losses
from . import quantization as q
from . import retrieval
from . import training as tr
from .autograd import Array
from .errors import DegenerateInputError, UsageError

L2 = q.SelectionVariant("l2")


@dataclass
class PerturbationSpec:
    """Realized per-codebook shifts ``epsilon_i = radius_i * unit_i``."""

    unit_directions: Array     # (M, sub_dim), unit rows
    radii: Array               # (M,) realized lengths
    thresholds: Array          # (M,) radius bound each realized length must stay under

    def __post_init__(self):
        norms = np.linalg.norm(self.unit_directions, axis=1)
        if not np.allclose(norms, 1.0, atol=1e-9):
            raise UsageError("unit_directions rows must have unit norm")

    @property
    def epsilons(self) -> Array:
        return self.radii[:, None] * self.unit_directions

    def flipped(self) -> "PerturbationSpec":
        return PerturbationSpec(unit_directions=-self.unit_directions,
                                radii=self.radii, thresholds=self.thresholds)


@dataclass
class LemmaReport:
    assignments_unchanged: bool
    recon_before: float
    recon_after: float
    rankings_identical: bool
    thresholds: list[float]
    realized_radii: list[float]
    direction_attempts: int = 1

    @property
    def passed(self) -> bool:
        return (self.assignments_unchanged and self.rankings_identical
                and self.recon_after > self.recon_before)


def perturbation_radius(books: q.CodebookSet, keys: Array,
                        variant: q.SelectionVariant = L2) -> Array:
    """Per-codebook threshold: 0.5 * min over keys of (2nd-nearest - nearest).

    Zero iff some key sub-vector sits exactly equidistant from its two
    nearest codewords. Defined for the l2 selection only.
    """
    if variant.kind != "l2":
        raise UsageError("the perturbation radius is defined for l2 selection")
    if books.num_codewords < 2:
        raise UsageError("need at least two codewords per codebook to form a gap")
    keys = np.atleast_2d(np.asarray(keys, dtype=np.float64))
    radii = np.empty(books.num_books)
    for i, sub in enumerate(q.split_subvectors(keys, books.num_books)):
        dists = np.linalg.norm(sub[:, None, :] - books.codewords[i][None, :, :], axis=2)
        part = np.sort(dists, axis=1)
        gaps = part[:, 1] - part[:, 0]
        radii[i] = 0.5 * float(gaps.min())
    return radii


def draw_perturbation(books: q.CodebookSet, keys: Array, rng: np.random.Generator,
                      shrink: float = 0.9) -> PerturbationSpec:
    """Random unit directions with lengths at ``shrink`` times the threshold.

    ``shrink`` must be strictly below one so floating-point boundary flips
    cannot occur.
    """
    if not (0.0 < shrink < 1.0):
        raise UsageError("shrink must lie strictly inside (0, 1)")
    thresholds = perturbation_radius(books, keys)
    if np.any(thresholds <= 0.0):
        raise DegenerateInputError(
            "a key is equidistant from its two nearest codewords; radius is zero")
    directions = rng.normal(size=(books.num_books, books.sub_dim))
    directions /= np.linalg.norm(directions, axis=1, keepdims=True)
    return PerturbationSpec(unit_directions=directions,
                            radii=shrink * thresholds, thresholds=thresholds)


def apply_invariant_perturbation(books: q.CodebookSet,
                                 spec: PerturbationSpec) -> q.CodebookSet:
    """Shift every codeword of codebook i by the same epsilon_i."""
    if spec.unit_directions.shape != (books.num_books, books.sub_dim):
        raise UsageError("perturbation spec does not match the codebook geometry")
    if np.any(spec.radii >= spec.thresholds):
        raise UsageError("perturbation radius must stay strictly below the threshold")
    if np.any(spec.radii < 0.0):
        raise UsageError("perturbation radius must be non-negative")
    shifted = books.codewords + spec.epsilons[:, None, :]
    return q.CodebookSet(shifted)


def _rankings(queries: Array, codes: Array, books: q.CodebookSet) -> list[list[int]]:
    scores = retrieval.adc_score_matrix(queries, codes, books)
    n_keys = codes.shape[0]
    out = []
    for row in scores:
        order = np.lexsort((np.arange(n_keys), -row))
        out.append([int(i) for i in order])
    return out


def verify_lemma_and_nonmonotone(books: q.CodebookSet, keys: Array, queries: Array,
                                 rng: np.random.Generator | None = None,
                                 shrink: float = 0.9,
                                 max_attempts: int = 16) -> LemmaReport:
    """Realize an assignment-invariant perturbation and check its consequences.

    The invariance claim holds for any direction; the strict reconstruction
    increase is an existence claim, so when a sampled direction happens to
    decrease the sampled loss the opposite direction is tried (convexity
    guarantees one of the two increases it except for exact ties), then fresh
    directions are drawn.
    """
    rng = rng if rng is not None else np.random.default_rng(0)
    keys = np.atleast_2d(np.asarray(keys, dtype=np.float64))
    queries = np.atleast_2d(np.asarray(queries, dtype=np.float64))
    codes_before = q.assign_codes_batch(keys, books, L2)
    recon_before = losses.reconstruction_loss(keys, books, L2)
    rankings_before = _rankings(queries, codes_before, books)

    spec = draw_perturbation(books, keys, rng, shrink=shrink)
    attempts = 0
    chosen = None
    for _ in range(max_attempts):
        for candidate in (spec, spec.flipped()):
            attempts += 1
            shifted = apply_invariant_perturbation(books, candidate)
            if losses.reconstruction_loss(keys, shifted, L2) > recon_before:
                chosen = candidate
                break
        if chosen is not None:
            break
        spec = draw_perturbation(books, keys, rng, shrink=shrink)
    if chosen is None:
        chosen = spec  # report the failure honestly

    shifted = apply_invariant_perturbation(books, chosen)
    codes_after = q.assign_codes_batch(keys, shifted, L2)
    recon_after = losses.reconstruction_loss(keys, shifted, L2)
    rankings_after = _rankings(queries, codes_after, shifted)
    return LemmaReport(
        assignments_unchanged=bool(np.array_equal(codes_before, codes_after)),
        recon_before=recon_before,
        recon_after=recon_after,
        rankings_identical=rankings_before == rankings_after,
        thresholds=[float(t) for t in chosen.thresholds],
        realized_radii=[float(r) for r in chosen.radii],
        direction_attempts=attempts,
    )


def lemma_trial(seed: int, dim: int = 8, num_books: int = 2, num_codewords: int = 4,
                n_keys: int = 50, n_queries: int = 20) -> LemmaReport:
    """One random configuration: Gaussian keys/queries, k-means codebooks."""
    rng = np.random.default_rng(seed)
    keys = rng.normal(size=(n_keys, dim))
    queries = rng.normal(size=(n_queries, dim))
    books = tr.fit_kmeans_pq(keys, num_books, num_codewords, iters=10, seed=seed)
    return verify_lemma_and_nonmonotone(books, keys, queries, rng=rng)


# ---------------------------------------------------------------------------
# Positive reconstruction loss
# ---------------------------------------------------------------------------

@dataclass
class AppendStep:
    appended_key: int
    prior_distortion: float
    loss_before: float
    loss_after: float


@dataclass
class PositiveReconReport:
    kmeans_losses: dict[int, float]            # best-fit loss per codebook size
    append_trace: list[AppendStep] = field(default_factory=list)
    final_loss: float = float("nan")

    @property
    def passed(self) -> bool:
        undersized_positive = all(v > 0.0 for v in self.kmeans_losses.values())
        strict_decrease = all(s.loss_after < s.loss_before for s in self.append_trace)
        covers_distortion = all(
            s.loss_before - s.loss_after >= s.prior_distortion - 1e-9
            for s in self.append_trace)
        return (undersized_positive and strict_decrease and covers_distortion
                and self.final_loss == 0.0)


def verify_positive_recon(keys: Array, num_books: int,
                          l_sequence: list[int] | None = None,
                          seed: int = 0) -> PositiveReconReport:
    """Coverage construction for the positive-reconstruction-loss claim.

    For each undersized codebook scale, the best k-means fit leaves a
    positive loss (pigeonhole over distinct keys). Starting from the smallest
    scale, the worst-quantized key's sub-vectors are appended as new
    codewords until every key is covered and the loss is exactly zero.
    """
    keys = np.atleast_2d(np.asarray(keys, dtype=np.float64))
    n = keys.shape[0]
    if np.unique(keys, axis=0).shape[0] != n:
        raise UsageError("keys must be distinct")
    if l_sequence is None:
        l_sequence = [1]
    if sorted(l_sequence) != list(l_sequence):
        raise UsageError("l_sequence must be increasing")
    if max(l_sequence) >= n:
        raise UsageError("undersized demonstration needs every L below the key count")

    kmeans_losses = {}
    for scale in l_sequence:
        books = tr.fit_kmeans_pq(keys, num_books, scale, iters=25, seed=seed)
        kmeans_losses[int(scale)] = losses.reconstruction_loss(keys, books, L2)

    books = tr.fit_kmeans_pq(keys, num_books, l_sequence[0], iters=25, seed=seed)
    codewords = books.codewords
    trace: list[AppendStep] = []
    for _ in range(n):
        books = q.CodebookSet(codewords)
        codes = q.assign_codes_batch(keys, books, L2)
        residual = keys - q.reconstruct_batch(codes, books)
        distortions = np.linalg.norm(residual, axis=1)
        loss_before = float(distortions.sum())
        if loss_before == 0.0:
            break
        worst = int(np.argmax(distortions))
        new_words = np.stack(q.split_subvectors(keys[worst], num_books))
        codewords = np.concatenate([codewords, new_words[:, None, :]], axis=1)
        loss_after = losses.reconstruction_loss(keys, q.CodebookSet(codewords), L2)
        trace.append(AppendStep(appended_key=worst,
                                prior_distortion=float(distortions[worst]),
                                loss_before=loss_before, loss_after=loss_after))
    final = losses.reconstruction_loss(keys, q.CodebookSet(codewords), L2)
    return PositiveReconReport(kmeans_losses=kmeans_losses, append_trace=trace,
                               final_loss=final)
