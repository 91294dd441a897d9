"""Covariate shifts at five severity levels for building OOD test suites.

Parameter tables are engineering defaults in the style of the -C
benchmarks, not reproductions of the published archives.  Brightness is
additive in RGB rather than applied in HSV space.
"""
from __future__ import annotations

import copy
import json
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .dataio import image_checksum, save_dataset, verify_dataset
from .freq import blur

KINDS = ("gaussian_noise", "shot_noise", "impulse_noise", "gaussian_blur",
         "contrast", "brightness", "saturate", "pixelate")
SEVERITIES = (1, 2, 3, 4, 5)

DEFAULT_TABLES: dict[str, list[float]] = {
    "gaussian_noise": [0.04, 0.08, 0.12, 0.18, 0.26],
    "shot_noise": [500, 250, 100, 50, 25],
    "impulse_noise": [0.01, 0.02, 0.05, 0.1, 0.15],
    "gaussian_blur": [0.5, 1, 1.5, 2, 3],
    "contrast": [0.75, 0.5, 0.4, 0.3, 0.15],
    "brightness": [0.05, 0.1, 0.15, 0.2, 0.3],
    "saturate": [1.3, 1.6, 2.0, 2.5, 3.0],
    "pixelate": [1.25, 1.5, 2, 2.67, 4],
}


@dataclass(frozen=True)
class CorruptionSpec:
    kind: str
    severity: int
    seed: int = 0
    tables: dict | None = None

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown corruption kind {self.kind!r}; expected one of {KINDS}")
        if self.severity not in SEVERITIES:
            raise ValueError(f"severity must be in 1..5, got {self.severity}")
        if self.param < 0 or (self.kind in ("shot_noise", "pixelate", "saturate") and self.param <= 0):
            raise ValueError(f"{self.kind} parameter must be positive, got {self.param}")

    @property
    def param(self) -> float:
        table = (self.tables or DEFAULT_TABLES)[self.kind]
        return float(table[self.severity - 1])


def _nearest_resize(x: np.ndarray, h: int, w: int) -> np.ndarray:
    hi = np.minimum((np.arange(h) + 0.5) * x.shape[-2] / h, x.shape[-2] - 1).astype(int)
    wi = np.minimum((np.arange(w) + 0.5) * x.shape[-1] / w, x.shape[-1] - 1).astype(int)
    return x[..., hi, :][..., wi]


def apply_param(images: np.ndarray, kind: str, p: float, rng: np.random.Generator,
                clip: bool = True) -> np.ndarray:
    """Corrupt images (..., C, H, W) in [0, 1] with raw parameter ``p``.

    ``clip=False`` skips the final clamp to [0, 1] (for inspecting noise).
    """
    x = np.asarray(images, dtype=np.float64)
    if kind == "gaussian_noise":
        out = x + rng.normal(scale=p, size=x.shape) if p > 0 else x.copy()
    elif kind == "shot_noise":
        out = rng.poisson(x * p) / p
    elif kind == "impulse_noise":
        u = rng.random(x.shape)
        salt = rng.random(x.shape) < 0.5
        out = np.where(u < p, salt.astype(np.float64), x)
    elif kind == "gaussian_blur":
        out = blur(x, p) if p > 0 else x.copy()
    elif kind == "contrast":
        mean = x.mean(axis=(-3, -2, -1), keepdims=True)
        out = x * p + mean * (1.0 - p)
    elif kind == "brightness":
        out = x + p
    elif kind == "saturate":
        gray = x.mean(axis=-3, keepdims=True)
        out = x * p + gray * (1.0 - p)
    elif kind == "pixelate":
        h, w = x.shape[-2:]
        small = _nearest_resize(x, max(1, round(h / p)), max(1, round(w / p)))
        out = _nearest_resize(small, h, w)
    else:
        raise ValueError(f"unknown corruption kind {kind!r}")
    return np.clip(out, 0.0, 1.0) if clip else out


def apply(images: np.ndarray, spec: CorruptionSpec, rng: np.random.Generator | None = None) -> np.ndarray:
    if rng is None:
        rng = np.random.default_rng([spec.seed, KINDS.index(spec.kind), spec.severity])
    return apply_param(images, spec.kind, spec.param, rng)


def build_ood_suite(images: np.ndarray, out_dir, kinds=KINDS, severities=SEVERITIES, seed: int = 0,
                    tables: dict | None = None, run_config: dict | None = None, threads: int = 1) -> dict:
    """Write one corrupted dataset per (kind, severity) under ``out_dir``.

    ``suite.json`` is marked invalid until every dataset has been written and
    verified, so an interrupted build never looks complete.  Each condition
    has its own seeded generator, so ``threads`` does not change the output.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    resolved = copy.deepcopy(DEFAULT_TABLES)
    resolved.update(tables or {})
    source = image_checksum(images)
    suite = {"valid": False, "seed": seed, "source_checksum": source, "tables": resolved,
             "run_config": run_config or {}, "conditions": []}
    _write_json(out / "suite.json", suite)
    specs = [CorruptionSpec(kind, int(sev), seed, resolved) for kind in kinds for sev in severities]

    def build(spec):
        rel = f"{spec.kind}/{spec.severity}"
        save_dataset(out / rel, apply(images, spec), name=f"{spec.kind}-{spec.severity}", provenance={
            "kind": spec.kind, "severity": spec.severity, "param": spec.param, "seed": seed,
            "source_checksum": source, "tables": resolved,
        })
        if not verify_dataset(out / rel):
            raise OSError(f"written dataset {out / rel} failed verification")
        return {"kind": spec.kind, "severity": spec.severity, "path": rel}

    if threads > 1:
        with ThreadPoolExecutor(threads) as pool:
            suite["conditions"] = list(pool.map(build, specs))
    else:
        suite["conditions"] = [build(spec) for spec in specs]
    suite["valid"] = True
    _write_json(out / "suite.json", suite)
    return suite


def load_suite(out_dir) -> dict:
    suite = json.loads((Path(out_dir) / "suite.json").read_text())
    if not suite.get("valid"):
        raise ValueError(f"{out_dir}: OOD suite is incomplete or invalid")
    return suite


def _write_json(path: Path, obj):
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")
    os.replace(tmp, path)
