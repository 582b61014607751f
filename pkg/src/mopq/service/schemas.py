"""Request/response models for the service API."""

from __future__ import annotations

from pydantic import BaseModel, Field


class HealthResponse(BaseModel):
    status: str
    version: str


class ErrorBody(BaseModel):
    kind: str          # usage | data | numeric
    message: str


# -- data generation --------------------------------------------------------

class GenDataRequest(BaseModel):
    out_dir: str
    pairs: int = 1000
    input_dim: int = 64
    clusters: int = 100
    noise_sigma: float = 0.1
    noise_anisotropy: float = 1.0
    seed: int = 0


class GenDataResponse(BaseModel):
    out_dir: str
    pairs: int
    input_dim: int
    split_sizes: dict[str, int]
    files: dict[str, str]


# -- training ----------------------------------------------------------------

class TrainRequest(BaseModel):
    data_dir: str
    out_path: str
    objective: str = "mopq-inbatch"
    recon_weight: float = 0.0
    epochs: int = 20
    batch_size: int = 64
    devices: int = 1
    learning_rate: float = 1e-3
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    seed: int = 0
    commitment_grad: str = "ste"
    hidden_dim: int = 64
    output_dim: int = 32
    depth: int = 2
    codebooks: int = 4
    codewords: int = 16
    selection: str = "l2"


class TrainResponse(BaseModel):
    checkpoint: str
    best_epoch: int
    epochs: int
    loss: list[float]
    reconstruction_loss: list[float]
    recall_at_1: list[float]
    recall_at_10: list[float]


# -- indexing and search ------------------------------------------------------

class IndexRequest(BaseModel):
    checkpoint: str
    keys_path: str
    out_path: str


class IndexResponse(BaseModel):
    index: str
    key_count: int
    codebooks: int
    codewords: int
    dim: int


class SearchRequest(BaseModel):
    index_path: str
    checkpoint: str
    queries_path: str | None = None
    query_ids: list[str] | None = None
    text: str | None = None
    topn: int = 10


class SearchHit(BaseModel):
    key_id: str
    score: float


class SearchResponse(BaseModel):
    results: dict[str, list[SearchHit]]


class EvalRequest(BaseModel):
    checkpoint: str
    data_dir: str
    split: str = "test"
    topn: list[int] = Field(default_factory=lambda: [1, 10])
    pool: str = "split"


class EvalResponse(BaseModel):
    recall_at: dict[int, float]
    query_count: int
    split: str
    pool: str


# -- verification -------------------------------------------------------------

class LemmaVerifyRequest(BaseModel):
    trials: int = 100
    seed: int = 0
    dim: int = 8
    codebooks: int = 2
    codewords: int = 4
    keys: int = 50
    queries: int = 20


class LemmaTrialSummary(BaseModel):
    trial: int
    passed: bool
    assignments_unchanged: bool
    rankings_identical: bool
    recon_before: float
    recon_after: float


class LemmaVerifyResponse(BaseModel):
    passed: bool
    trials: int
    trials_passed: int
    reports: list[LemmaTrialSummary]


class PositiveReconRequest(BaseModel):
    seed: int = 0
    keys: int = 3
    dim: int = 4
    codebooks: int = 1
    l_sequence: list[int] = Field(default_factory=lambda: [1])


class PositiveReconResponse(BaseModel):
    passed: bool
    kmeans_losses: dict[int, float]
    append_count: int
    final_loss: float


class DcsEquivalenceRequest(BaseModel):
    devices: int = 4
    batch: int = 4
    seed: int = 0
    check_differences: bool = True


class DcsEquivalenceRow(BaseModel):
    devices: int
    batch_size: int
    dcs_vs_oracle: float
    ncs_vs_oracle: float
    dcs_vs_differences: float
    oracle_vs_differences: float


class DcsEquivalenceResponse(BaseModel):
    passed: bool
    max_rel_error: float
    max_fd_error: float
    max_ncs_gap: float
    rows: list[DcsEquivalenceRow]


class SweepRequest(BaseModel):
    data_dir: str | None = None    # None: the pinned synthetic benchmark
    seeds: list[int] = Field(default_factory=lambda: [0, 1, 2])
    weights: list[float] = Field(default_factory=lambda: [1.0, 0.1, 0.01, 0.001])
    epochs: int | None = None
    pool: str = "all"
    include_mopq: bool = True


class SweepRowModel(BaseModel):
    recon_weight: float
    seed: int
    recall_at_10: float
    final_reconstruction_loss: float


class SweepResponse(BaseModel):
    rows: list[SweepRowModel]
    mopq_recall_by_seed: dict[int, float]
    best_dqn_mean: float
    mopq_mean: float


class NonmonotoneResponse(BaseModel):
    passed: bool
    seeds_passing: int
    seeds_total: int
    rows: list[SweepRowModel]
