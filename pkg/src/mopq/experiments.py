"""Experiment drivers behind the verify and sweep surfaces.

These compose the training, retrieval and cross-device modules into the
runnable studies: the cross-device gradient-equivalence check, the
reconstruction-weight sweep, the sampling-scheme comparison, and the
codebook-scale comparison. The synthetic benchmark fixture used by the trend
studies is pinned here.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autograd as ag
from . import dcs
from . import encoder as enc
from . import quantization as q
from . import retrieval
from . import training as tr
from .data import PairedDataset, gen_synthetic
from .errors import UsageError

# Benchmark fixture for the qualitative trend studies. Chosen by pilot runs:
# anisotropic noise gives the coordinates unequal signal-to-noise ratios, so
# reconstruction-optimal and matching-optimal codebooks genuinely differ, and
# evaluation retrieves against the full key set.
BENCHMARK = {
    "pairs": 10000,
    "input_dim": 64,
    "clusters": 2000,
    "noise_sigma": 0.5,
    "noise_anisotropy": 4.0,
    "seed": 777,
}
BENCHMARK_ENCODER = {"hidden_dim": 64, "output_dim": 32, "depth": 2}
BENCHMARK_TRAIN = {"epochs": 20, "batch_size": 64, "learning_rate": 1e-3}
BENCHMARK_POOL = "all"
LAMBDA_GRID = (1.0, 0.1, 0.01, 0.001)


def benchmark_dataset() -> PairedDataset:
    return gen_synthetic(BENCHMARK["pairs"], BENCHMARK["input_dim"],
                         BENCHMARK["clusters"], BENCHMARK["noise_sigma"],
                         BENCHMARK["seed"],
                         noise_anisotropy=BENCHMARK["noise_anisotropy"])


# ---------------------------------------------------------------------------
# Evaluation
# ---------------------------------------------------------------------------

def evaluate_model(model: tr.Model, dataset: PairedDataset, split: str,
                   ns=(1, 10), pool: str = "split") -> retrieval.EvalResult:
    """Recall of a split's queries against the split's keys or all keys.

    Ranking is by ADC score with ties broken by key id ascending, matching
    the search contract.
    """
    if pool not in ("split", "all"):
        raise UsageError("pool must be 'split' or 'all'")
    xq, _, _, kids = dataset.split_arrays(split)
    if pool == "split":
        pool_ids = kids
        pool_vecs = dataset.split_arrays(split)[1]
    else:
        pool_ids = list(dataset.keys)
        pool_vecs = np.asarray([dataset.keys[k] for k in pool_ids], dtype=np.float64)
    position = {kid: i for i, kid in enumerate(pool_ids)}
    key_embs = model.encode_values(pool_vecs)
    codes = q.assign_codes_batch(key_embs, model.books, model.variant)
    query_embs = model.encode_values(xq)
    scores = retrieval.adc_score_matrix(query_embs, codes, model.books)
    ids_arr = np.asarray(pool_ids)
    gt = np.asarray([position[k] for k in kids])
    gt_scores = scores[np.arange(len(gt)), gt]
    gt_ids = ids_arr[gt]
    higher = (scores > gt_scores[:, None]).sum(axis=1)
    ties_before = ((scores == gt_scores[:, None]) & (ids_arr[None, :] < gt_ids[:, None])).sum(axis=1)
    ranks = 1 + higher + ties_before
    recall = {int(n): float((ranks <= n).mean()) for n in ns}
    return retrieval.EvalResult(recall_at=recall, query_count=len(gt))


def _train_arm(dataset: PairedDataset, objective: str, seed: int,
               recon_weight: float = 0.0, devices: int = 1,
               num_books: int = 4, num_codewords: int = 16,
               selection: str = "l2",
               encoder_overrides: dict | None = None,
               train_overrides: dict | None = None) -> tuple[tr.Model, tr.TrainHistory]:
    xq, xk, _, _ = dataset.split_arrays("train")
    vq, vk, _, _ = dataset.split_arrays("valid")
    enc_kw = dict(BENCHMARK_ENCODER)
    enc_kw.update(encoder_overrides or {})
    enc_cfg = enc.EncoderConfig(input_dim=dataset.input_dim, **enc_kw)
    book_cfg = tr.CodebookConfig(num_books=num_books, num_codewords=num_codewords,
                                 selection=selection)
    train_kw = dict(BENCHMARK_TRAIN)
    train_kw.update(train_overrides or {})
    cfg = tr.TrainConfig(objective=objective, recon_weight=recon_weight,
                         devices=devices, seed=seed, **train_kw)
    train_fn = tr.train_dqn_style if objective == "dqn" else tr.train_mopq
    return train_fn(xq, xk, vq, vk, enc_cfg, book_cfg, cfg)


# ---------------------------------------------------------------------------
# Reconstruction-weight sweep
# ---------------------------------------------------------------------------

@dataclass
class SweepRow:
    recon_weight: float
    seed: int
    recall_at_10: float
    final_reconstruction_loss: float


@dataclass
class LambdaSweepReport:
    rows: list[SweepRow]
    mopq_recall_by_seed: dict[int, float]

    def seeds(self) -> list[int]:
        return sorted({row.seed for row in self.rows})

    def recon_monotone(self, seed: int) -> bool:
        """Final reconstruction loss is non-increasing in the weight."""
        rows = sorted((r for r in self.rows if r.seed == seed),
                      key=lambda r: r.recon_weight, reverse=True)
        losses = [r.final_reconstruction_loss for r in rows]
        return all(losses[i] <= losses[i + 1] for i in range(len(losses) - 1))

    def argmax_weight(self, seed: int) -> float:
        rows = [r for r in self.rows if r.seed == seed]
        return max(rows, key=lambda r: r.recall_at_10).recon_weight

    def argmax_is_interior(self, seed: int) -> bool:
        weights = sorted({r.recon_weight for r in self.rows})
        return self.argmax_weight(seed) != weights[-1]

    def seeds_passing_nonmonotone(self) -> int:
        return sum(1 for s in self.seeds()
                   if self.recon_monotone(s) and self.argmax_is_interior(s))

    def best_dqn_mean(self) -> float:
        weights = sorted({r.recon_weight for r in self.rows})
        means = []
        for w in weights:
            means.append(np.mean([r.recall_at_10 for r in self.rows
                                  if r.recon_weight == w]))
        return float(max(means))

    def mopq_mean(self) -> float:
        return float(np.mean(list(self.mopq_recall_by_seed.values())))


def sweep_lambda(dataset: PairedDataset, seeds=(0, 1, 2), weights=LAMBDA_GRID,
                 pool: str = BENCHMARK_POOL, include_mopq: bool = True,
                 epochs: int | None = None) -> LambdaSweepReport:
    """Reconstruction-weight study plus the in-batch contrastive reference."""
    overrides = {"epochs": epochs} if epochs is not None else None
    rows = []
    mopq_by_seed = {}
    for seed in seeds:
        for weight in weights:
            model, history = _train_arm(dataset, "dqn", seed, recon_weight=weight,
                                        train_overrides=overrides)
            recall = evaluate_model(model, dataset, "test", (10,), pool).recall_at[10]
            rows.append(SweepRow(recon_weight=weight, seed=seed, recall_at_10=recall,
                                 final_reconstruction_loss=history.reconstruction_loss[-1]))
        if include_mopq:
            model, _ = _train_arm(dataset, "mopq-inbatch", seed,
                                  train_overrides=overrides)
            mopq_by_seed[seed] = evaluate_model(model, dataset, "test", (10,),
                                                pool).recall_at[10]
    return LambdaSweepReport(rows=rows, mopq_recall_by_seed=mopq_by_seed)


# ---------------------------------------------------------------------------
# Sampling-scheme and codebook-scale comparisons
# ---------------------------------------------------------------------------

@dataclass
class ComparisonReport:
    recalls: dict[str, dict[int, float]] = field(default_factory=dict)

    def mean(self, arm: str) -> float:
        return float(np.mean(list(self.recalls[arm].values())))


def sampling_comparison(dataset: PairedDataset, seeds=(0, 1, 2), devices: int = 4,
                        pool: str = BENCHMARK_POOL,
                        epochs: int | None = None) -> ComparisonReport:
    """In-batch vs detached cross-device vs compensated cross-device."""
    overrides = {"epochs": epochs} if epochs is not None else None
    report = ComparisonReport()
    arms = (("in-batch", "mopq-inbatch", 1),
            ("ncs", "mopq-ncs", devices),
            ("dcs", "mopq-dcs", devices))
    for name, objective, d in arms:
        report.recalls[name] = {}
        for seed in seeds:
            model, _ = _train_arm(dataset, objective, seed, devices=d,
                                  train_overrides=overrides)
            report.recalls[name][seed] = evaluate_model(
                dataset=dataset, model=model, split="test", ns=(10,),
                pool=pool).recall_at[10]
    return report


def scale_comparison(dataset: PairedDataset, seeds=(0, 1, 2),
                     scales=((8, 16), (4, 16), (4, 8)),
                     pool: str = BENCHMARK_POOL,
                     epochs: int | None = None) -> ComparisonReport:
    """Recall across codebook geometries, largest first."""
    overrides = {"epochs": epochs} if epochs is not None else None
    report = ComparisonReport()
    for m, l in scales:
        arm = f"M{m}L{l}"
        report.recalls[arm] = {}
        for seed in seeds:
            model, _ = _train_arm(dataset, "mopq-inbatch", seed, num_books=m,
                                  num_codewords=l, train_overrides=overrides)
            report.recalls[arm][seed] = evaluate_model(
                dataset=dataset, model=model, split="test", ns=(10,),
                pool=pool).recall_at[10]
    return report


# ---------------------------------------------------------------------------
# Cross-device gradient equivalence
# ---------------------------------------------------------------------------

@dataclass
class EquivalenceRow:
    devices: int
    batch_size: int
    dcs_vs_oracle: float
    ncs_vs_oracle: float
    dcs_vs_differences: float
    oracle_vs_differences: float


@dataclass
class EquivalenceReport:
    rows: list[EquivalenceRow]
    tolerance: float = 1e-9
    fd_tolerance: float = 1e-4

    @property
    def max_dcs_error(self) -> float:
        return max(r.dcs_vs_oracle for r in self.rows)

    @property
    def max_fd_error(self) -> float:
        return max(max(r.dcs_vs_differences, r.oracle_vs_differences) for r in self.rows)

    @property
    def max_ncs_gap(self) -> float:
        return max(r.ncs_vs_oracle for r in self.rows)

    @property
    def passed(self) -> bool:
        return self.max_dcs_error < self.tolerance and self.max_fd_error < self.fd_tolerance


def dcs_equivalence_report(max_devices: int = 4, max_batch: int = 4,
                           seed: int = 0, input_dim: int = 3, dim: int = 4,
                           num_books: int = 2, num_codewords: int = 3,
                           check_differences: bool = True) -> EquivalenceReport:
    """Exercise every (devices, batch) combination on random tiny models.

    For each combination the per-device gradients are compared against the
    pooled fully differentiable oracle, and both against central finite
    differences of the frozen straight-through surrogate.
    """
    variant = q.SelectionVariant("l2")
    rows = []
    for d in range(1, max_devices + 1):
        for n in range(1, max_batch + 1):
            cluster = dcs.ClusterConfig(devices=d, batch_size=n,
                                        seed=seed + 1000 * d + n)
            rng = np.random.default_rng(cluster.seed)
            cfg = enc.EncoderConfig(input_dim=input_dim, hidden_dim=0,
                                    output_dim=dim, depth=1)
            params = enc.init_encoder_params(cfg, rng)
            for i in range(num_books):
                params[f"codebook_{i}"] = rng.normal(
                    size=(num_codewords, dim // num_books))
            xq = [rng.normal(size=(n, input_dim)) for _ in range(cluster.devices)]
            xk = [rng.normal(size=(n, input_dim)) for _ in range(cluster.devices)]
            devices = dcs.assemble_devices(xq, xk, params, cfg, variant, num_books)
            dcs_grads = dcs.dcs_gradients(devices, params)
            ncs_grads = dcs.ncs_gradients(devices, params)
            _, oracle_grads = dcs.full_loss_oracle(devices, params)
            if check_differences:
                frozen = [dev.frozen for dev in devices]

                def oracle_value(p):
                    rebuilt = dcs.assemble_devices(xq, xk, p, cfg, variant,
                                                   num_books, frozen=frozen)
                    value, _ = dcs.full_loss_oracle(rebuilt, p)
                    return value

                numeric = ag.central_differences(oracle_value, params, 1e-6)
                dcs_fd = ag.max_relative_error(dcs_grads, numeric)
                oracle_fd = ag.max_relative_error(oracle_grads, numeric)
            else:
                dcs_fd = oracle_fd = 0.0
            rows.append(EquivalenceRow(
                devices=d, batch_size=n,
                dcs_vs_oracle=ag.max_relative_error(dcs_grads, oracle_grads),
                ncs_vs_oracle=ag.max_relative_error(ncs_grads, oracle_grads),
                dcs_vs_differences=dcs_fd, oracle_vs_differences=oracle_fd))
    return EquivalenceReport(rows=rows)
