"""Service endpoints wrapping the core package.

The service is stateless over the filesystem: requests name artifact paths,
handlers read and write them through the core modules, responses carry the
metrics. Domain errors map to structured 400 bodies whose ``kind`` field
distinguishes usage from data problems for the CLI's exit-code contract.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np
from fastapi import APIRouter

from .. import data
from .. import encoder as enc
from .. import experiments
from .. import retrieval
from .. import training as tr
from .. import verification as vf
from ..errors import DataFormatError, UsageError
from . import schemas

router = APIRouter()


def _require_file(path: str, what: str) -> Path:
    p = Path(path)
    if not p.exists():
        raise DataFormatError(f"{what} {path} does not exist")
    return p


def _load_dataset_dir(path: str) -> data.PairedDataset:
    _require_file(path, "data directory")
    return data.load_dataset(path)


@router.get("/health", response_model=schemas.HealthResponse)
def health() -> schemas.HealthResponse:
    from .. import __version__
    return schemas.HealthResponse(status="ok", version=__version__)


@router.post("/data/generate", response_model=schemas.GenDataResponse)
def generate_data(req: schemas.GenDataRequest) -> schemas.GenDataResponse:
    dataset = data.gen_synthetic(req.pairs, req.input_dim, req.clusters,
                                 req.noise_sigma, req.seed,
                                 noise_anisotropy=req.noise_anisotropy)
    files = data.save_dataset(dataset, req.out_dir)
    return schemas.GenDataResponse(
        out_dir=req.out_dir, pairs=req.pairs, input_dim=req.input_dim,
        split_sizes={name: len(idx) for name, idx in dataset.splits.items()},
        files=files)


@router.post("/train", response_model=schemas.TrainResponse)
def train(req: schemas.TrainRequest) -> schemas.TrainResponse:
    dataset = _load_dataset_dir(req.data_dir)
    xq, xk, _, _ = dataset.split_arrays("train")
    vq, vk, _, _ = dataset.split_arrays("valid")
    enc_cfg = enc.EncoderConfig(input_dim=dataset.input_dim, hidden_dim=req.hidden_dim,
                                output_dim=req.output_dim, depth=req.depth)
    book_cfg = tr.CodebookConfig(num_books=req.codebooks, num_codewords=req.codewords,
                                 selection=req.selection)
    train_cfg = tr.TrainConfig(
        objective=req.objective, recon_weight=req.recon_weight, epochs=req.epochs,
        batch_size=req.batch_size, devices=req.devices,
        learning_rate=req.learning_rate,
        adam_betas=(req.adam_beta1, req.adam_beta2),
        seed=req.seed, commitment_grad=req.commitment_grad)
    train_fn = tr.train_dqn_style if req.objective == "dqn" else tr.train_mopq
    model, history = train_fn(xq, xk, vq, vk, enc_cfg, book_cfg, train_cfg)
    data.save_model(req.out_path, model,
                    meta={"objective": req.objective, "seed": req.seed,
                          "data_dir": req.data_dir})
    return schemas.TrainResponse(
        checkpoint=req.out_path, best_epoch=history.best_epoch, epochs=req.epochs,
        loss=history.loss, reconstruction_loss=history.reconstruction_loss,
        recall_at_1=history.recall_at_1, recall_at_10=history.recall_at_10)


@router.post("/index", response_model=schemas.IndexResponse)
def build_index(req: schemas.IndexRequest) -> schemas.IndexResponse:
    model, _ = data.load_model(_require_file(req.checkpoint, "checkpoint"))
    keys = data.read_embeddings(_require_file(req.keys_path, "embedding file"))
    index = retrieval.build_index(keys, model)
    retrieval.save_index(index, req.out_path)
    return schemas.IndexResponse(index=req.out_path, key_count=len(index),
                                 codebooks=index.books.num_books,
                                 codewords=index.books.num_codewords,
                                 dim=index.books.dim)


@router.post("/search", response_model=schemas.SearchResponse)
def search(req: schemas.SearchRequest) -> schemas.SearchResponse:
    model, _ = data.load_model(_require_file(req.checkpoint, "checkpoint"))
    index = retrieval.load_index(_require_file(req.index_path, "index file"))
    queries: dict[str, np.ndarray] = {}
    if req.text is not None:
        queries["text"] = data.hash_featurize(req.text, model.encoder.input_dim)
    if req.queries_path is not None:
        vectors = data.read_embeddings(_require_file(req.queries_path, "embedding file"))
        wanted = req.query_ids if req.query_ids else list(vectors)
        for qid in wanted:
            if qid not in vectors:
                raise UsageError(f"query id {qid!r} not present in {req.queries_path}")
            queries[qid] = vectors[qid]
    if not queries:
        raise UsageError("search needs a queries_path or an inline text query")
    results = {}
    for qid, raw in queries.items():
        embedded = model.encode_values(np.asarray(raw, dtype=np.float64))
        hits = retrieval.search(index, embedded, req.topn)
        results[qid] = [schemas.SearchHit(key_id=k, score=s) for k, s in hits]
    return schemas.SearchResponse(results=results)


@router.post("/eval", response_model=schemas.EvalResponse)
def evaluate(req: schemas.EvalRequest) -> schemas.EvalResponse:
    model, _ = data.load_model(_require_file(req.checkpoint, "checkpoint"))
    dataset = _load_dataset_dir(req.data_dir)
    result = experiments.evaluate_model(model, dataset, req.split,
                                        ns=req.topn, pool=req.pool)
    return schemas.EvalResponse(recall_at=result.recall_at,
                                query_count=result.query_count,
                                split=req.split, pool=req.pool)


@router.post("/verify/lemma", response_model=schemas.LemmaVerifyResponse)
def verify_lemma(req: schemas.LemmaVerifyRequest) -> schemas.LemmaVerifyResponse:
    reports = []
    for trial in range(req.trials):
        report = vf.lemma_trial(seed=req.seed + trial, dim=req.dim,
                                num_books=req.codebooks, num_codewords=req.codewords,
                                n_keys=req.keys, n_queries=req.queries)
        reports.append(schemas.LemmaTrialSummary(
            trial=trial, passed=report.passed,
            assignments_unchanged=report.assignments_unchanged,
            rankings_identical=report.rankings_identical,
            recon_before=report.recon_before, recon_after=report.recon_after))
    passed = sum(1 for r in reports if r.passed)
    return schemas.LemmaVerifyResponse(passed=passed == req.trials,
                                       trials=req.trials, trials_passed=passed,
                                       reports=reports)


@router.post("/verify/positive-recon", response_model=schemas.PositiveReconResponse)
def verify_positive_recon(req: schemas.PositiveReconRequest) -> schemas.PositiveReconResponse:
    rng = np.random.default_rng(req.seed)
    keys = rng.normal(size=(req.keys, req.dim))
    report = vf.verify_positive_recon(keys, num_books=req.codebooks,
                                      l_sequence=req.l_sequence, seed=req.seed)
    return schemas.PositiveReconResponse(
        passed=report.passed, kmeans_losses=report.kmeans_losses,
        append_count=len(report.append_trace), final_loss=report.final_loss)


@router.post("/verify/dcs-equivalence", response_model=schemas.DcsEquivalenceResponse)
def verify_dcs(req: schemas.DcsEquivalenceRequest) -> schemas.DcsEquivalenceResponse:
    report = experiments.dcs_equivalence_report(
        max_devices=req.devices, max_batch=req.batch, seed=req.seed,
        check_differences=req.check_differences)
    return schemas.DcsEquivalenceResponse(
        passed=report.passed, max_rel_error=report.max_dcs_error,
        max_fd_error=report.max_fd_error, max_ncs_gap=report.max_ncs_gap,
        rows=[schemas.DcsEquivalenceRow(**row.__dict__) for row in report.rows])


def _sweep(req: schemas.SweepRequest) -> experiments.LambdaSweepReport:
    if req.data_dir is not None:
        dataset = _load_dataset_dir(req.data_dir)
    else:
        dataset = experiments.benchmark_dataset()
    return experiments.sweep_lambda(dataset, seeds=tuple(req.seeds),
                                    weights=tuple(req.weights), pool=req.pool,
                                    include_mopq=req.include_mopq,
                                    epochs=req.epochs)


@router.post("/sweep-lambda", response_model=schemas.SweepResponse)
def sweep_lambda(req: schemas.SweepRequest) -> schemas.SweepResponse:
    report = _sweep(req)
    return schemas.SweepResponse(
        rows=[schemas.SweepRowModel(**row.__dict__) for row in report.rows],
        mopq_recall_by_seed=report.mopq_recall_by_seed,
        best_dqn_mean=report.best_dqn_mean(),
        mopq_mean=report.mopq_mean() if report.mopq_recall_by_seed else 0.0)


@router.post("/verify/nonmonotone-sweep", response_model=schemas.NonmonotoneResponse)
def verify_nonmonotone(req: schemas.SweepRequest) -> schemas.NonmonotoneResponse:
    report = _sweep(req)
    passing = report.seeds_passing_nonmonotone()
    total = len(report.seeds())
    # the non-monotone claim: reconstruction keeps shrinking with the weight
    # while the best-recall weight is not the largest, on most seeds
    passed = passing >= max(1, (2 * total + 2) // 3)
    return schemas.NonmonotoneResponse(
        passed=passed, seeds_passing=passing, seeds_total=total,
        rows=[schemas.SweepRowModel(**row.__dict__) for row in report.rows])
