"""CovariateFlow: a conditional flow over the high band of an image."""
from __future__ import annotations

import hashlib
import math
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .freq import HIGH_RANGE, LOW_RANGE, DequantConfig, decompose, dequantize
from .layers import Conv1x1, Coupling, Layer, SignalDependentLayer

MODES = (
    "full-unconditional",      # (1) whole image, no decomposition
    "high-unconditional",      # (2) high band only
    "high-unconditional-sdl",  # (3) high band, SDL sees the low band
    "high-conditional-sdl",    # (4) SDL and every coupling see the low band
)
LOG_2PI = math.log(2.0 * math.pi)


@dataclass(frozen=True)
class ModelConfig:
    mode: str = "high-conditional-sdl"
    K: int = 16
    hidden: int = 32
    blocks: int = 2
    channels: int = 3
    height: int = 32
    width: int = 32
    sigma: float = 1.0
    bit_depth: int = 16
    high_range: tuple[float, float] = HIGH_RANGE
    low_range: tuple[float, float] = LOW_RANGE
    seed: int = 0
    init: str = "random"

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"unknown mode {self.mode!r}; expected one of {MODES}")
        if self.K < 1 or self.hidden < 1 or self.blocks < 0:
            raise ValueError("K and hidden must be >= 1, blocks >= 0")
        if self.channels < 1 or self.height < 2 or self.width < 2:
            raise ValueError(f"bad input shape {(self.channels, self.height, self.width)}")
        if self.init not in ("random", "identity"):
            raise ValueError(f"init must be 'random' or 'identity', got {self.init!r}")
        if self.sigma <= 0:
            raise ValueError("sigma must be positive")
        object.__setattr__(self, "high_range", tuple(float(v) for v in self.high_range))
        object.__setattr__(self, "low_range", tuple(float(v) for v in self.low_range))
        DequantConfig(self.bit_depth, self.high_range)

    @property
    def shape(self) -> tuple[int, int, int]:
        return (self.channels, self.height, self.width)

    @property
    def decomposed(self) -> bool:
        return self.mode != "full-unconditional"

    @property
    def uses_low(self) -> bool:
        return self.mode in ("high-unconditional-sdl", "high-conditional-sdl")

    @property
    def dequant(self) -> DequantConfig:
        rng_ = self.high_range if self.decomposed else self.low_range
        return DequantConfig(self.bit_depth, rng_)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["high_range"] = list(self.high_range)
        d["low_range"] = list(self.low_range)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        d = dict(d)
        for k in ("high_range", "low_range"):
            if k in d:
                d[k] = tuple(d[k])
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ValueError(f"unknown model config keys: {sorted(unknown)}")
        return cls(**d)


@dataclass
class LikelihoodResult:
    """Per-sample log-likelihood in nats and its parts."""

    log_likelihood: np.ndarray
    log_prior: np.ndarray
    log_det_total: np.ndarray
    bits_per_dim: np.ndarray
    finite: np.ndarray = field(default=None)

    def __post_init__(self):
        if self.finite is None:
            self.finite = np.isfinite(self.log_likelihood)


class FlowModel:
    def __init__(self, config: ModelConfig):
        self.config = config
        c, h, w = config.shape
        rng = np.random.default_rng(config.seed)
        identity = config.init == "identity"
        layers: list[Layer] = []
        if config.uses_low:
            layers.append(SignalDependentLayer(c, identity=identity))
        cond_c = c if config.mode == "high-conditional-sdl" else 0
        for k in range(config.K):
            layers.append(Conv1x1(c, rng, identity=identity))
            layers.append(Coupling(c, h, w, parity=k % 2, hidden=config.hidden,
                                   blocks=config.blocks, rng=rng, cond_channels=cond_c))
        self.layers = layers

    # parameters

    def named_parameters(self) -> dict[str, np.ndarray]:
        return {f"{i}.{k}": v for i, layer in enumerate(self.layers) for k, v in layer.params.items()}

    def named_buffers(self) -> dict[str, np.ndarray]:
        return {f"{i}.{k}": v for i, layer in enumerate(self.layers) for k, v in layer.buffers.items()}

    def num_parameters(self) -> int:
        return sum(layer.num_parameters() for layer in self.layers)

    def load_state(self, params: dict[str, np.ndarray], buffers: dict[str, np.ndarray] | None = None):
        own = self.named_parameters()
        if set(params) != set(own):
            missing, extra = set(own) - set(params), set(params) - set(own)
            raise ValueError(f"parameter names differ: missing {sorted(missing)[:5]}, extra {sorted(extra)[:5]}")
        for src, dst in ((params, "params"), (buffers or {}, "buffers")):
            for name, value in src.items():
                i, key = name.split(".", 1)
                store = getattr(self.layers[int(i)], dst)
                if store[key].shape != np.shape(value):
                    raise ValueError(f"{name}: shape {np.shape(value)} != {store[key].shape}")
                store[key][...] = value
        for layer in self.layers:
            layer.check()

    def parameter_tensors(self) -> tuple[list[dict[str, Tensor]], dict[str, Tensor]]:
        """Fresh differentiable leaves for every parameter, per layer and flat."""
        per_layer, flat = [], {}
        for i, layer in enumerate(self.layers):
            d = {}
            for k, v in layer.params.items():
                t = ad.tensor(v, requires_grad=True, name=f"{i}.{k}")
                d[k] = flat[f"{i}.{k}"] = t
            per_layer.append(d)
        return per_layer, flat

    def fingerprint(self) -> str:
        h = hashlib.sha256()
        h.update(repr(sorted(self.config.to_dict().items())).encode())
        for name, v in sorted({**self.named_parameters(), **self.named_buffers()}.items()):
            h.update(name.encode())
            h.update(np.ascontiguousarray(v, dtype="<f4").tobytes())
        return h.hexdigest()

    # data preparation

    @property
    def dims(self) -> int:
        c, h, w = self.config.shape
        return c * h * w

    def split(self, images: np.ndarray) -> tuple[np.ndarray, np.ndarray | None]:
        """Modeled component (undequantized) and conditioning low band."""
        images = np.asarray(images, dtype=np.float64)
        if images.ndim == 3:
            images = images[None]
        if images.shape[1:] != self.config.shape:
            raise ad.ShapeError(f"expected images of shape {self.config.shape}, got {images.shape[1:]}")
        if not self.config.decomposed:
            return images, None
        pair = decompose(images, self.config.sigma)
        return pair.high, (pair.low if self.config.uses_low else None)

    def prepare(self, images: np.ndarray, seed: int | None = None,
                rng: np.random.Generator | None = None) -> tuple[np.ndarray, np.ndarray | None]:
        """Dequantized modeled input and conditioning for a batch of images.

        With ``seed`` the noise of each sample is keyed on (seed, image bytes),
        so results do not depend on batch order or size.  With ``rng`` noise
        is drawn from the generator.
        """
        comp, low = self.split(images)
        cfg = self.config.dequant
        if rng is not None:
            noise = rng.random(comp.shape)
        else:
            noise = content_noise(np.asarray(images, dtype=np.float64).reshape(comp.shape),
                                  0 if seed is None else seed)
        return dequantize(comp, cfg, noise=noise, clip=True), low

    # flow

    def forward(self, x, cond=None, params: list[dict[str, Tensor]] | None = None) -> tuple[Tensor, Tensor]:
        """Push the modeled input through all layers; returns (z, total logdet)."""
        self._check_cond(cond)
        z = x if isinstance(x, Tensor) else ad.constant(x)
        cond_t = None if cond is None else (cond if isinstance(cond, Tensor) else ad.constant(cond))
        total = None
        for i, layer in enumerate(self.layers):
            p = None if params is None else params[i]
            z, ld = layer.forward(z, cond_t if (layer.conditional) else None, p)
            total = ld if total is None else total + ld
        return z, total

    def inverse(self, z: np.ndarray, cond: np.ndarray | None = None) -> np.ndarray:
        self._check_cond(cond)
        x = np.asarray(z, dtype=np.float64)
        for layer in reversed(self.layers):
            x = layer.inverse(x, cond if layer.conditional else None)
        return x

    def _check_cond(self, cond):
        if self.config.uses_low and cond is None:
            raise ValueError(f"mode {self.config.mode!r} needs the low-frequency component")
        if not self.config.uses_low and cond is not None:
            raise ValueError(f"mode {self.config.mode!r} takes no low-frequency component")

    def log_prob(self, x, cond=None, params=None) -> tuple[Tensor, Tensor, Tensor]:
        """(log-likelihood, log-prior, logdet), each per sample, as tensors."""
        z, logdet = self.forward(x, cond, params)
        n = z.shape[0]
        sq = ad.sum(ad.square(ad.reshape(z, (n, int(np.prod(z.shape[1:]))))), axis=1)
        prior = ad.affine(sq, -0.5, -0.5 * self.dims * LOG_2PI)
        return prior + logdet, prior, logdet

    def bits_per_dim(self, ll: np.ndarray) -> np.ndarray:
        cfg = self.config.dequant
        lo, hi = cfg.value_range
        return -(np.asarray(ll) / math.log(2.0)) / self.dims + cfg.bit_depth - math.log2(hi - lo)

    def check_invertible(self, seed=0, tol=1e-6):
        """Spot-check the round trip on one random input."""
        rng = np.random.default_rng(seed)
        x = rng.normal(scale=0.05, size=(1,) + self.config.shape)
        cond = rng.uniform(0.1, 0.9, size=x.shape) if self.config.uses_low else None
        with ad.no_grad():
            z, _ = self.forward(x, cond)
        err = np.max(np.abs(self.inverse(z.data, cond) - x))
        if not err <= tol:
            raise ValueError(f"model failed round-trip check (max error {err:.3g})")


def content_noise(images: np.ndarray, seed: int) -> np.ndarray:
    """Uniform [0, 1) noise per sample keyed on (seed, sample bytes)."""
    out = np.empty(images.shape)
    for i, img in enumerate(images):
        digest = hashlib.blake2b(np.ascontiguousarray(img).tobytes(), digest_size=16).digest()
        key = [seed & 0xFFFFFFFF] + [int.from_bytes(digest[j:j + 4], "little") for j in range(0, 16, 4)]
        out[i] = np.random.default_rng(key).random(img.shape)
    return out


def build_model(config: ModelConfig | dict | None = None, **overrides) -> FlowModel:
    if config is None:
        config = ModelConfig(**overrides)
    elif isinstance(config, dict):
        config = ModelConfig.from_dict({**config, **overrides})
    elif overrides:
        config = replace(config, **overrides)
    return FlowModel(config)


def log_likelihood(images: np.ndarray, model: FlowModel, seed: int | None = 0,
                   batch_size: int = 256) -> LikelihoodResult:
    """Exact per-sample log-likelihood of the modeled component of ``images``."""
    images = np.asarray(images, dtype=np.float64)
    if images.ndim == 3:
        images = images[None]
    lls, priors, dets = [], [], []
    with ad.no_grad():
        for start in range(0, len(images), batch_size):
            x, low = model.prepare(images[start:start + batch_size], seed=seed)
            with np.errstate(all="ignore"):
                ll, prior, det = model.log_prob(x, low)
            lls.append(ll.data)
            priors.append(prior.data)
            dets.append(det.data)
    ll = np.concatenate(lls)
    return LikelihoodResult(ll, np.concatenate(priors), np.concatenate(dets), model.bits_per_dim(ll))


def sample(model: FlowModel, x_low: np.ndarray | None = None, temperature: float = 1.0,
           seed: int = 0, n: int | None = None) -> np.ndarray:
    """Draw modeled components, conditioned on ``x_low`` where the mode uses it.

    Returns an array shaped like ``x_low`` (or ``(n, C, H, W)``).  Temperature
    0 gives the deterministic image of z = 0.
    """
    if temperature < 0:
        raise ValueError("temperature must be >= 0")
    cfg = model.config
    if x_low is not None:
        x_low = np.asarray(x_low, dtype=np.float64)
        if x_low.ndim == 3:
            x_low = x_low[None]
        shape = x_low.shape
    else:
        shape = (1 if n is None else n,) + cfg.shape
    model._check_cond(x_low)
    z = np.random.default_rng(seed).standard_normal(shape) * temperature
    return model.inverse(z, x_low)
