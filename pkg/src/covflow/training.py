"""Maximum-likelihood training with an input-gradient-norm penalty."""
from __future__ import annotations

import csv
import logging
import math
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .dataio import save_model
from .model import FlowModel, log_likelihood

log = logging.getLogger(__name__)

LOG_HEADER = ["epoch", "step", "nll_nats", "penalty", "bpd", "lr"]


@dataclass(frozen=True)
class TrainConfig:
    alpha: float = 2.0
    lr_max: float = 5e-4
    epochs: int = 30
    batch_size: int = 64
    seed: int = 0
    clip_norm: float | None = None
    checkpoint_every: int = 1
    val_fraction: float = 0.1
    warmup_frac: float = 0.3
    div_start: float = 25.0
    div_final: float = 1e4
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8

    def __post_init__(self):
        if self.alpha < 0:
            raise ValueError("alpha must be >= 0")
        if not self.lr_max > 0:
            raise ValueError("lr_max must be > 0")
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("epochs and batch_size must be >= 1")
        if not 0 < self.val_fraction < 1:
            raise ValueError("val_fraction must lie in (0, 1)")
        object.__setattr__(self, "betas", tuple(self.betas))

    def to_dict(self) -> dict:
        d = asdict(self)
        d["betas"] = list(self.betas)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ValueError(f"unknown train config keys: {sorted(unknown)}")
        return cls(**d)


class TrainingDiverged(RuntimeError):
    pass


def one_cycle_lr(step: int, total_steps: int, lr_max: float, warmup_frac=0.3,
                 div_start=25.0, div_final=1e4) -> float:
    """Cosine warmup from lr_max/div_start, cosine decay to lr_max/div_final."""
    if total_steps < 1:
        raise ValueError("total_steps must be >= 1")
    step = min(max(step, 0), total_steps)
    lo, hi, end = lr_max / div_start, lr_max, lr_max / div_final
    peak = warmup_frac * total_steps
    if step <= peak and peak > 0:
        t = step / peak
        return lo + (hi - lo) * 0.5 * (1.0 - math.cos(math.pi * t))
    t = (step - peak) / (total_steps - peak)
    return end + (hi - end) * 0.5 * (1.0 + math.cos(math.pi * t))


@dataclass
class Adam:
    lr: float = 1e-3
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    step_count: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)

    def step(self, params: dict[str, np.ndarray], grads: dict[str, np.ndarray], lr: float | None = None):
        """Update ``params`` in place."""
        lr = self.lr if lr is None else lr
        b1, b2 = self.betas
        self.step_count += 1
        c1 = 1.0 - b1 ** self.step_count
        c2 = 1.0 - b2 ** self.step_count
        for name, g in grads.items():
            m = self.m.setdefault(name, np.zeros_like(g))
            v = self.v.setdefault(name, np.zeros_like(g))
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * g * g
            params[name] -= lr * (m / c1) / (np.sqrt(v / c2) + self.eps)

    def state(self) -> dict:
        return {"step_count": self.step_count, "m": self.m, "v": self.v}

    def load(self, state: dict):
        self.step_count = int(state["step_count"])
        self.m = {k: np.array(v, dtype=np.float64) for k, v in state["m"].items()}
        self.v = {k: np.array(v, dtype=np.float64) for k, v in state["v"].items()}


@dataclass
class LossResult:
    total: ad.Tensor
    nll: float
    penalty: float
    penalty_applied: bool
    grad_norms: np.ndarray
    log_likelihood: np.ndarray
    params: dict[str, ad.Tensor]


def loss_from_inputs(model: FlowModel, x: np.ndarray, low: np.ndarray | None, alpha: float) -> LossResult:
    """Mean NLL plus ``alpha`` times the mean per-sample input-gradient norm.

    ``x`` is the dequantized modeled input.  If some sample's gradient is
    exactly zero the norm is not differentiable; the penalty value is still
    reported but left out of ``total``.
    """
    if len(x) == 0:
        raise ValueError("empty batch")
    per_layer, flat = model.parameter_tensors()
    xt = ad.tensor(x, requires_grad=alpha > 0, name="x")
    ll, _, _ = model.log_prob(xt, low, per_layer)
    nll = ad.neg(ad.mean(ll))
    total, penalty, applied, norms = nll, 0.0, False, np.zeros(len(x))
    if alpha > 0:
        (gx,) = ad.grad(ad.sum(ll), [xt], create_graph=True)
        sq = ad.sum(ad.square(gx), axis=tuple(range(1, gx.ndim)))
        norms = np.sqrt(sq.data)
        penalty = float(np.mean(norms))
        if np.all(sq.data > 0):
            total = nll + ad.affine(ad.mean(ad.sqrt(sq)), alpha, 0.0)
            applied = True
    return LossResult(total, float(nll.data), penalty, applied, norms, ll.data, flat)


def loss(batch: np.ndarray, model: FlowModel, alpha: float, seed: int | None = 0,
         rng: np.random.Generator | None = None) -> LossResult:
    """Training objective on a batch of images; same dequantization for both terms."""
    x, low = model.prepare(batch, seed=seed, rng=rng)
    res = loss_from_inputs(model, x, low, alpha)
    if not np.isfinite(float(res.total.data)):
        raise FloatingPointError(f"non-finite loss (nll={res.nll}, penalty={res.penalty})")
    return res


def clip_by_global_norm(grads: dict[str, np.ndarray], max_norm: float) -> float:
    norm = math.sqrt(sum(float(np.sum(g * g)) for g in grads.values()))
    if norm > max_norm:
        scale = max_norm / (norm + 1e-12)
        for g in grads.values():
            g *= scale
    return norm


def split_dataset(images: np.ndarray, val_fraction: float, seed: int) -> tuple[np.ndarray, np.ndarray]:
    """Deterministic held-out split: (train, validation)."""
    perm = np.random.default_rng([seed, 7]).permutation(len(images))
    n_val = max(2, int(round(val_fraction * len(images))))
    return images[np.sort(perm[n_val:])], images[np.sort(perm[:n_val])]


def validation_bpd(model: FlowModel, images: np.ndarray, seed: int) -> float:
    return float(np.mean(log_likelihood(images, model, seed=seed).bits_per_dim))


@dataclass
class TrainResult:
    model: FlowModel
    history: list[dict]
    initial_val_bpd: float
    final_val_bpd: float
    train_state: dict


def train(images: np.ndarray, model: FlowModel, config: TrainConfig,
          checkpoint_path: str | Path | None = None, log_path: str | Path | None = None,
          resume: dict | None = None, val_images: np.ndarray | None = None,
          stop_after_epoch: int | None = None) -> TrainResult:
    """Train ``model`` in place.

    ``images`` is split into train/validation unless ``val_images`` is given.
    ``resume`` is a training-state dict from a checkpoint.  ``stop_after_epoch``
    ends the run early (as if interrupted) after that epoch's checkpoint.
    """
    if val_images is None:
        train_x, val_x = split_dataset(images, config.val_fraction, config.seed)
    else:
        train_x, val_x = images, val_images
    n_batches = math.ceil(len(train_x) / config.batch_size)
    total_steps = n_batches * config.epochs
    params = model.named_parameters()
    opt = Adam(betas=config.betas, eps=config.eps)
    history: list[dict] = []
    start_epoch = 1
    initial_bpd = None
    if resume is not None:
        model.load_state(resume["params64"])
        opt.load(resume["optimizer"])
        history = list(resume["history"])
        start_epoch = int(resume["epoch"]) + 1
        initial_bpd = resume.get("initial_val_bpd")
        params = model.named_parameters()
    if initial_bpd is None:
        initial_bpd = validation_bpd(model, val_x, config.seed)
        log.info("initial validation bpd %.4f", initial_bpd)

    def state(epoch):
        return {
            "epoch": epoch,
            "params64": {k: v.copy() for k, v in params.items()},
            "optimizer": opt.state(),
            "history": history,
            "initial_val_bpd": initial_bpd,
            "train_config": config.to_dict(),
        }

    bad_streak = 0
    for epoch in range(start_epoch, config.epochs + 1):
        t0 = time.time()
        rng = np.random.default_rng([config.seed, epoch])
        order = rng.permutation(len(train_x))
        nlls, pens = [], []
        lr = 0.0
        for b in range(n_batches):
            step = (epoch - 1) * n_batches + b
            lr = one_cycle_lr(step, total_steps, config.lr_max, config.warmup_frac,
                              config.div_start, config.div_final)
            batch = train_x[order[b * config.batch_size:(b + 1) * config.batch_size]]
            try:
                with np.errstate(all="ignore"):
                    res = loss(batch, model, config.alpha, rng=rng)
                    grads = ad.grad(res.total, [res.params[k] for k in params])
                grads = {k: g.data for k, g in zip(params, grads)}
                if not all(np.all(np.isfinite(g)) for g in grads.values()):
                    raise FloatingPointError("non-finite parameter gradient")
            except FloatingPointError as exc:
                bad_streak += 1
                log.warning("epoch %d batch %d skipped: %s", epoch, b, exc)
                if bad_streak >= 3:
                    raise TrainingDiverged(
                        f"non-finite loss on 3 consecutive batches (epoch {epoch}, batch {b}): {exc}"
                    ) from exc
                continue
            bad_streak = 0
            if config.clip_norm:
                clip_by_global_norm(grads, config.clip_norm)
            opt.step(params, grads, lr)
            nlls.append(res.nll)
            pens.append(res.penalty)
        val_bpd = validation_bpd(model, val_x, config.seed)
        row = {
            "epoch": epoch,
            "step": epoch * n_batches,
            "nll_nats": float(np.mean(nlls)) if nlls else float("nan"),
            "penalty": float(np.mean(pens)) if pens else float("nan"),
            "bpd": val_bpd,
            "lr": lr,
        }
        history.append(row)
        log.info("epoch %d nll %.2f penalty %.3f val bpd %.4f (%.1fs)", epoch, row["nll_nats"],
                 row["penalty"], val_bpd, time.time() - t0)
        if log_path is not None:
            write_log(log_path, history)
        last = epoch == config.epochs or epoch == stop_after_epoch
        if checkpoint_path is not None and (epoch % config.checkpoint_every == 0 or last):
            save_model(checkpoint_path, model, train_state=state(epoch))
        if stop_after_epoch is not None and epoch >= stop_after_epoch:
            break

    final_bpd = history[-1]["bpd"] if history else initial_bpd
    return TrainResult(model, history, initial_bpd, final_bpd, state(history[-1]["epoch"] if history else 0))


def write_log(path: str | Path, history: list[dict]):
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=LOG_HEADER)
        w.writeheader()
        for row in history:
            w.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in row.items()})
