"""Per-sample OOD scores: log-likelihood, input-gradient norm, and NSD."""
from __future__ import annotations

import csv
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .model import FlowModel

SCORES_HEADER = ["sample_id", "ll_nats", "grad_norm", "nsd"]


@dataclass(frozen=True)
class NormalizationStats:
    mu_L: float
    sigma_L: float
    mu_T: float
    sigma_T: float
    n: int
    model_fingerprint: str
    split: str = "validation"
    seed: int = 0

    def __post_init__(self):
        if self.n < 2:
            raise ValueError(f"need at least 2 samples for statistics, got {self.n}")
        if not (self.sigma_L > 0 and self.sigma_T > 0):
            raise ValueError("score streams have zero variance; cannot standardize")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "NormalizationStats":
        return cls(**d)


@dataclass(frozen=True)
class ScoreRecord:
    sample_id: str
    log_likelihood: float
    grad_norm: float
    nsd: float


def score_batch(images: np.ndarray, model: FlowModel, seed: int = 0,
                with_grad=True) -> tuple[np.ndarray, np.ndarray]:
    """Log-likelihood (nats) and ``||d ll / d x||`` for each image.

    The gradient is taken with respect to the dequantized modeled input.
    Samples are independent, so one backward pass of the summed
    log-likelihood yields every per-sample gradient.
    """
    x, low = model.prepare(images, seed=seed)
    if not with_grad:
        with ad.no_grad():
            ll, _, _ = model.log_prob(x, low)
        return ll.data, np.full(len(x), np.nan)
    with np.errstate(all="ignore"):
        xt = ad.tensor(x, requires_grad=True)
        ll, _, _ = model.log_prob(xt, low)
        (g,) = ad.grad(ad.sum(ll), [xt])
    norms = np.sqrt(np.sum(g.data.reshape(len(x), -1) ** 2, axis=1))
    bad = ~np.isfinite(norms)
    norms[bad] = np.nan
    return ll.data, norms


def _batched(images, batch_size, fn, threads=1):
    chunks = [images[i:i + batch_size] for i in range(0, len(images), batch_size)]
    if threads > 1 and len(chunks) > 1:
        with ThreadPoolExecutor(threads) as pool:
            parts = list(pool.map(fn, chunks))
    else:
        parts = [fn(c) for c in chunks]
    if not parts:
        return np.zeros(0), np.zeros(0)
    return np.concatenate([p[0] for p in parts]), np.concatenate([p[1] for p in parts])


def score_arrays(images: np.ndarray, model: FlowModel, seed: int = 0, batch_size: int = 64,
                 with_grad=True, threads: int = 1) -> tuple[np.ndarray, np.ndarray]:
    images = np.asarray(images, dtype=np.float64)
    return _batched(images, batch_size, lambda b: score_batch(b, model, seed, with_grad), threads)


def typicality_score(images: np.ndarray, model: FlowModel, seed: int = 0, batch_size: int = 64) -> np.ndarray:
    return score_arrays(images, model, seed, batch_size)[1]


def stats_from_scores(ll: np.ndarray, grad_norm: np.ndarray, fingerprint: str,
                      split="validation", seed=0) -> NormalizationStats:
    ll, gn = np.asarray(ll, dtype=np.float64), np.asarray(grad_norm, dtype=np.float64)
    if not (np.all(np.isfinite(ll)) and np.all(np.isfinite(gn))):
        raise ValueError("non-finite scores in the statistics split")
    return NormalizationStats(
        mu_L=float(np.mean(ll)), sigma_L=float(np.std(ll)),
        mu_T=float(np.mean(gn)), sigma_T=float(np.std(gn)),
        n=len(ll), model_fingerprint=fingerprint, split=split, seed=seed,
    )


def compute_stats(images: np.ndarray, model: FlowModel, seed: int = 0, batch_size: int = 64,
                  split="validation") -> NormalizationStats:
    """Population mean/std of both score streams over held-out ID images."""
    if len(images) < 2:
        raise ValueError(f"need at least 2 samples for statistics, got {len(images)}")
    ll, gn = score_arrays(images, model, seed, batch_size)
    return stats_from_scores(ll, gn, model.fingerprint(), split, seed)


def nsd(ll, grad_norm, stats: NormalizationStats):
    """Sum of absolute standardized deviations from the ID means."""
    ll = np.asarray(ll, dtype=np.float64)
    gn = np.asarray(grad_norm, dtype=np.float64)
    return np.abs(ll - stats.mu_L) / stats.sigma_L + np.abs(gn - stats.mu_T) / stats.sigma_T


def score_dataset(images: np.ndarray, model: FlowModel, stats: NormalizationStats | None,
                  seed: int = 0, sample_ids=None, csv_path=None, batch_size: int = 64,
                  with_grad=True, threads: int = 1) -> list[ScoreRecord]:
    """One record per image, optionally written to ``csv_path``.

    ``stats`` may be None when only raw scores are wanted; NSD is then NaN.
    """
    if stats is not None and stats.model_fingerprint != model.fingerprint():
        raise ValueError("statistics were computed for a different model (fingerprint mismatch)")
    if sample_ids is None:
        sample_ids = [f"{i:06d}" for i in range(len(images))]
    ll, gn = score_arrays(images, model, seed, batch_size, with_grad, threads)
    d = nsd(ll, gn, stats) if (stats is not None and with_grad) else np.full(len(ll), np.nan)
    records = [ScoreRecord(str(s), float(a), float(b), float(c)) for s, a, b, c in zip(sample_ids, ll, gn, d)]
    if csv_path is not None:
        write_scores(csv_path, records)
    return records


def _fmt(v: float) -> str:
    return "" if np.isnan(v) else repr(float(v))


def write_scores(path, records: list[ScoreRecord]):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(SCORES_HEADER)
        for r in records:
            w.writerow([r.sample_id, _fmt(r.log_likelihood), _fmt(r.grad_norm), _fmt(r.nsd)])


def read_scores(path) -> list[ScoreRecord]:
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows or rows[0] != SCORES_HEADER:
        raise ValueError(f"{path}: expected header {','.join(SCORES_HEADER)}")

    def num(s):
        return float(s) if s != "" else float("nan")

    return [ScoreRecord(r[0], num(r[1]), num(r[2]), num(r[3])) for r in rows[1:]]


def save_stats(path, stats: NormalizationStats):
    import json

    Path(path).write_text(json.dumps(stats.to_dict(), indent=2, sort_keys=True) + "\n")


def load_stats(path) -> NormalizationStats:
    import json

    return NormalizationStats.from_dict(json.loads(Path(path).read_text()))
