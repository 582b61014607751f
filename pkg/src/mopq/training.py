"""Training regimes: contrastive quantization, reconstruction-loss baseline,
and non-supervised k-means codebooks.

All randomness flows from one seeded generator per run, shuffles included, so
a fixed seed reproduces histories bit-for-bit. Validation recall is measured
every epoch over the validation split and the best checkpoint is retained.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autograd as ag
from . import dcs
from . import encoder as enc
from . import losses
from . import quantization as q
from . import retrieval
from .autograd import Array, ParameterSet
from .errors import TrainingDiverged, UsageError

OBJECTIVES = ("mopq-inbatch", "mopq-dcs", "mopq-ncs", "dqn")


@dataclass(frozen=True)
class CodebookConfig:
    num_books: int
    num_codewords: int
    selection: str = "l2"

    def sub_dim(self, dim: int) -> int:
        return q.CodebookSet.validate_geometry(self.num_books, self.num_codewords, dim)


@dataclass(frozen=True)
class TrainConfig:
    objective: str = "mopq-inbatch"
    recon_weight: float = 0.0
    epochs: int = 20
    batch_size: int = 64
    devices: int = 1
    learning_rate: float = 1e-3
    adam_betas: tuple[float, float] = (0.9, 0.999)
    seed: int = 0
    commitment_grad: str = "ste"

    def __post_init__(self):
        if self.objective not in OBJECTIVES:
            raise UsageError(f"unknown objective {self.objective!r}; expected one of {OBJECTIVES}")
        if self.recon_weight < 0.0:
            raise UsageError("recon_weight must be >= 0")
        if self.recon_weight > 0.0 and self.objective != "dqn":
            raise UsageError("recon_weight applies only to the dqn objective")
        if self.devices > 1 and self.objective not in ("mopq-dcs", "mopq-ncs"):
            raise UsageError("devices > 1 requires a cross-device objective (mopq-dcs/mopq-ncs)")
        if self.epochs < 0 or self.batch_size < 1 or self.devices < 1:
            raise UsageError("epochs must be >= 0; batch_size and devices >= 1")
        if self.commitment_grad not in ("ste", "logp"):
            raise UsageError("commitment_grad must be 'ste' or 'logp'")


@dataclass
class TrainHistory:
    loss: list[float] = field(default_factory=list)
    reconstruction_loss: list[float] = field(default_factory=list)
    recall_at_1: list[float] = field(default_factory=list)
    recall_at_10: list[float] = field(default_factory=list)
    best_epoch: int = -1


@dataclass
class Model:
    """Trained encoder plus quantization model; the unit retrieval consumes."""

    encoder: enc.EncoderConfig
    codebooks: CodebookConfig
    params: ParameterSet

    @property
    def books(self) -> q.CodebookSet:
        cw = np.stack([self.params[f"codebook_{i}"] for i in range(self.codebooks.num_books)])
        return q.CodebookSet(cw)

    @property
    def variant(self) -> q.SelectionVariant:
        if self.codebooks.selection == "bilinear":
            w = np.stack([self.params[f"bilinear_{i}"]
                          for i in range(self.codebooks.num_books)])
            return q.SelectionVariant("bilinear", bilinear_weights=w)
        return q.SelectionVariant(self.codebooks.selection)

    def encode_values(self, x: Array) -> Array:
        return enc.encode_values(x, self.params, self.encoder)


# ---------------------------------------------------------------------------
# Adam
# ---------------------------------------------------------------------------

@dataclass
class AdamState:
    m: ParameterSet
    v: ParameterSet

    @staticmethod
    def zeros(params: ParameterSet) -> "AdamState":
        return AdamState(m={k: np.zeros_like(p) for k, p in params.items()},
                         v={k: np.zeros_like(p) for k, p in params.items()})


def adam_update(params: ParameterSet, grads: ParameterSet, state: AdamState,
                lr: float, betas: tuple[float, float], step: int,
                eps: float = 1e-8) -> tuple[ParameterSet, AdamState]:
    """One bias-corrected Adam step. Functional: returns fresh arrays."""
    if step < 1:
        raise UsageError("adam step counter starts at 1")
    b1, b2 = betas
    new_params: ParameterSet = {}
    new_m: ParameterSet = {}
    new_v: ParameterSet = {}
    for name, p in params.items():
        g = grads[name]
        m = b1 * state.m[name] + (1.0 - b1) * g
        v = b2 * state.v[name] + (1.0 - b2) * (g * g)
        m_hat = m / (1.0 - b1 ** step)
        v_hat = v / (1.0 - b2 ** step)
        new_params[name] = p - lr * m_hat / (np.sqrt(v_hat) + eps)
        new_m[name] = m
        new_v[name] = v
    return new_params, AdamState(m=new_m, v=new_v)


# ---------------------------------------------------------------------------
# k-means codebooks
# ---------------------------------------------------------------------------

def lloyd(points: Array, k: int, iters: int, rng: np.random.Generator) -> tuple[Array, list[float]]:
    """Lloyd's algorithm with k-means++ seeding.

    Empty clusters are re-seeded at the point farthest from its assigned
    center, which keeps the sum-of-squared-distances objective non-increasing
    across iterations. Returns the centers and the per-iteration objective.
    """
    points = np.asarray(points, dtype=np.float64)
    if iters < 1:
        raise UsageError("need at least one iteration")
    n = points.shape[0]
    if n < k:
        raise UsageError(f"need at least k={k} points, got {n}")
    centers = _kmeans_pp_init(points, k, rng)
    objective: list[float] = []
    for _ in range(iters):
        d2 = ((points[:, None, :] - centers[None, :, :]) ** 2).sum(axis=2)
        owner = np.argmin(d2, axis=1)
        nearest = d2[np.arange(n), owner]
        for j in range(k):
            mask = owner == j
            if mask.any():
                centers[j] = points[mask].mean(axis=0)
            else:
                far = int(np.argmax(nearest))
                centers[j] = points[far]
                owner[far] = j
                nearest[far] = 0.0
        d2 = ((points[:, None, :] - centers[None, :, :]) ** 2).sum(axis=2)
        objective.append(float(d2.min(axis=1).sum()))
    return centers, objective


def _kmeans_pp_init(points: Array, k: int, rng: np.random.Generator) -> Array:
    n = points.shape[0]
    centers = np.empty((k, points.shape[1]), dtype=np.float64)
    centers[0] = points[int(rng.integers(n))]
    d2 = ((points - centers[0]) ** 2).sum(axis=1)
    for j in range(1, k):
        total = d2.sum()
        if total <= 0.0:
            centers[j] = points[int(rng.integers(n))]
            continue
        probs = d2 / total
        centers[j] = points[int(rng.choice(n, p=probs))]
        d2 = np.minimum(d2, ((points - centers[j]) ** 2).sum(axis=1))
    return centers


def fit_kmeans_pq(embeddings: Array, num_books: int, num_codewords: int,
                  iters: int = 25, seed: int = 0) -> q.CodebookSet:
    """Non-supervised product quantization: Lloyd's per subspace."""
    embeddings = np.asarray(embeddings, dtype=np.float64)
    q.CodebookSet.validate_geometry(num_books, num_codewords, embeddings.shape[1])
    rng = np.random.default_rng(seed)
    books = []
    for sub in q.split_subvectors(embeddings, num_books):
        centers, _ = lloyd(sub, num_codewords, iters, rng)
        books.append(centers)
    return q.CodebookSet(np.stack(books))


def init_codebooks(encoded: Array, cfg: CodebookConfig, rng: np.random.Generator) -> Array:
    """Codebooks from k-means over the first encoded batch, per subspace.

    Falls back to unit-Gaussian draws scaled to the batch RMS norm when the
    batch has too few distinct sub-vectors to seed k-means, so no codeword
    starts dead.
    """
    subs = q.split_subvectors(np.atleast_2d(encoded), cfg.num_books)
    books = []
    for sub in subs:
        distinct = np.unique(sub, axis=0)
        if distinct.shape[0] >= cfg.num_codewords:
            centers, _ = lloyd(sub, cfg.num_codewords, iters=10, rng=rng)
        else:
            scale = float(np.sqrt(np.mean(sub ** 2))) or 1.0
            centers = rng.normal(size=(cfg.num_codewords, sub.shape[1])) * scale
        books.append(centers)
    return np.stack(books)


# ---------------------------------------------------------------------------
# Training loops
# ---------------------------------------------------------------------------

def init_parameters(first_keys: Array, enc_cfg: enc.EncoderConfig,
                    book_cfg: CodebookConfig, rng: np.random.Generator) -> ParameterSet:
    """Encoder weights, codebooks from the first encoded key batch, and
    identity bilinear matrices when that selection is active."""
    sub_dim = book_cfg.sub_dim(enc_cfg.output_dim)
    params = enc.init_encoder_params(enc_cfg, rng)
    encoded = enc.encode_values(np.atleast_2d(first_keys), params, enc_cfg)
    books = init_codebooks(encoded, book_cfg, rng)
    for i in range(book_cfg.num_books):
        params[f"codebook_{i}"] = books[i]
    if book_cfg.selection == "bilinear":
        for i in range(book_cfg.num_books):
            params[f"bilinear_{i}"] = np.eye(sub_dim)
    return params


def _variant_for(params: ParameterSet, book_cfg: CodebookConfig) -> q.SelectionVariant:
    if book_cfg.selection == "bilinear":
        w = np.stack([params[f"bilinear_{i}"] for i in range(book_cfg.num_books)])
        return q.SelectionVariant("bilinear", bilinear_weights=w)
    return q.SelectionVariant(book_cfg.selection)


def _epoch_metrics(params: ParameterSet, enc_cfg, book_cfg,
                   valid_queries: Array, valid_keys: Array) -> tuple[float, float, float]:
    """(recall@1, recall@10, reconstruction loss) on the validation split."""
    model = Model(encoder=enc_cfg, codebooks=book_cfg, params=params)
    key_embs = model.encode_values(valid_keys)
    query_embs = model.encode_values(valid_queries)
    recalls = retrieval.paired_recall(query_embs, key_embs, model.books, model.variant, (1, 10))
    recon = losses.reconstruction_loss(key_embs, model.books, model.variant)
    return recalls[1], recalls[10], recon


def _step_gradients_mcl(xq: Array, xk: Array, params: ParameterSet, enc_cfg,
                        book_cfg, cfg: TrainConfig) -> tuple[float, ParameterSet]:
    """One contrastive step, routed through the device simulation.

    In-batch training is the single-device reduction of the same graph, so
    mopq-dcs with one device reproduces mopq-inbatch bit-for-bit.
    """
    d = cfg.devices if cfg.objective in ("mopq-dcs", "mopq-ncs") else 1
    n = cfg.batch_size
    variant = _variant_for(params, book_cfg)
    query_batches = [xq[i * n:(i + 1) * n] for i in range(d)]
    key_batches = [xk[i * n:(i + 1) * n] for i in range(d)]
    devices = dcs.assemble_devices(query_batches, key_batches, params, enc_cfg,
                                   variant, book_cfg.num_books,
                                   commitment_grad=cfg.commitment_grad)
    if cfg.objective == "mopq-ncs":
        total = dcs.ncs_total(devices)
        display = float(total.value)
    else:
        total = dcs.dcs_total(devices)
        # each matching term appears D times in the total (primary + images)
        display = float(total.value) / d
    grads = ag.backward(total)
    for name in params:
        grads.setdefault(name, np.zeros_like(params[name]))
    return display, grads


def _step_gradients_dqn(xq: Array, xk: Array, params: ParameterSet, enc_cfg,
                        book_cfg, cfg: TrainConfig) -> tuple[float, ParameterSet]:
    """Matching loss on raw embeddings plus weighted squared distortion."""
    param_nodes = enc.parameter_nodes(params)
    queries = enc.encode_graph(xq, param_nodes, enc_cfg)
    keys = enc.encode_graph(xk, param_nodes, enc_cfg)
    n = xq.shape[0]
    per_row = losses.matching_loss_rows(queries, keys, np.arange(n))
    matching = ag.scale(ag.reduce_sum(per_row), 1.0 / n)
    variant = _variant_for(params, book_cfg)
    books = q.CodebookSet(np.stack([params[f"codebook_{i}"]
                                    for i in range(book_cfg.num_books)]))
    book_nodes = [param_nodes[f"codebook_{i}"] for i in range(book_cfg.num_books)]
    distortion = losses.squared_distortion_node(keys, book_nodes, books, variant)
    total = ag.add(matching, ag.scale(distortion, cfg.recon_weight))
    grads = ag.backward(total)
    for name in params:
        grads.setdefault(name, np.zeros_like(params[name]))
    return float(total.value), grads


def _train(train_queries: Array, train_keys: Array,
           valid_queries: Array, valid_keys: Array,
           enc_cfg: enc.EncoderConfig, book_cfg: CodebookConfig,
           cfg: TrainConfig) -> tuple[Model, TrainHistory]:
    train_queries = np.asarray(train_queries, dtype=np.float64)
    train_keys = np.asarray(train_keys, dtype=np.float64)
    if train_queries.shape[0] == 0:
        raise UsageError("training data is empty")
    if train_queries.shape[0] != train_keys.shape[0]:
        raise UsageError("queries and keys must pair up")
    book_cfg.sub_dim(enc_cfg.output_dim)

    rng = np.random.default_rng(cfg.seed)
    global_batch = cfg.batch_size * (cfg.devices if cfg.objective in ("mopq-dcs", "mopq-ncs") else 1)
    first = train_keys[:global_batch]
    params = init_parameters(first, enc_cfg, book_cfg, rng)
    state = AdamState.zeros(params)
    history = TrainHistory()
    best_params = {k: p.copy() for k, p in params.items()}
    best_recall = -1.0
    step = 0
    n_train = train_queries.shape[0]
    step_fn = _step_gradients_dqn if cfg.objective == "dqn" else _step_gradients_mcl

    for epoch in range(cfg.epochs):
        order = rng.permutation(n_train)
        epoch_losses = []
        for start in range(0, n_train - global_batch + 1, global_batch):
            chunk = order[start:start + global_batch]
            display, grads = step_fn(train_queries[chunk], train_keys[chunk],
                                     params, enc_cfg, book_cfg, cfg)
            if not np.isfinite(display):
                raise TrainingDiverged(
                    f"non-finite loss at epoch {epoch}, step {step}: {display}")
            step += 1
            params, state = adam_update(params, grads, state,
                                        cfg.learning_rate, cfg.adam_betas, step)
            epoch_losses.append(display)
        r1, r10, recon = _epoch_metrics(params, enc_cfg, book_cfg, valid_queries, valid_keys)
        history.loss.append(float(np.mean(epoch_losses)) if epoch_losses else float("nan"))
        history.reconstruction_loss.append(recon)
        history.recall_at_1.append(r1)
        history.recall_at_10.append(r10)
        if r10 > best_recall:
            best_recall = r10
            best_params = {k: p.copy() for k, p in params.items()}
            history.best_epoch = epoch
    model = Model(encoder=enc_cfg, codebooks=book_cfg,
                  params=best_params if cfg.epochs > 0 else params)
    return model, history


def train_mopq(train_queries: Array, train_keys: Array,
               valid_queries: Array, valid_keys: Array,
               enc_cfg: enc.EncoderConfig, book_cfg: CodebookConfig,
               cfg: TrainConfig) -> tuple[Model, TrainHistory]:
    """Contrastive quantization training (in-batch, DCS, or NCS sampling)."""
    if cfg.objective == "dqn":
        raise UsageError("use train_dqn_style for the reconstruction-loss baseline")
    return _train(train_queries, train_keys, valid_queries, valid_keys,
                  enc_cfg, book_cfg, cfg)


def train_dqn_style(train_queries: Array, train_keys: Array,
                    valid_queries: Array, valid_keys: Array,
                    enc_cfg: enc.EncoderConfig, book_cfg: CodebookConfig,
                    cfg: TrainConfig) -> tuple[Model, TrainHistory]:
    """Joint training where quantization learns only from reconstruction."""
    if cfg.objective != "dqn":
        raise UsageError("train_dqn_style requires objective='dqn'")
    return _train(train_queries, train_keys, valid_queries, valid_keys,
                  enc_cfg, book_cfg, cfg)
