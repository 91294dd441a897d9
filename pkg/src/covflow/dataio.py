"""Dataset formats, synthetic textures, manifests and model checkpoints."""
from __future__ import annotations

import hashlib
import io
import json
import os
import re
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .freq import blur

CIFAR_RECORD = 3073
CIFAR_SHAPE = (3, 32, 32)


class FormatError(ValueError):
    pass


# ---------------------------------------------------------------- CIFAR-10


def read_cifar10_binary(path) -> tuple[np.ndarray, np.ndarray]:
    """Images (N, 3, 32, 32) in [0, 1] and labels (N,) from a CIFAR-10 batch file."""
    raw = Path(path).read_bytes()
    if len(raw) % CIFAR_RECORD:
        raise FormatError(f"{path}: size {len(raw)} is not a multiple of {CIFAR_RECORD}")
    rec = np.frombuffer(raw, dtype=np.uint8).reshape(-1, CIFAR_RECORD)
    labels = rec[:, 0].astype(np.int64)
    images = rec[:, 1:].reshape((-1,) + CIFAR_SHAPE).astype(np.float64) / 255.0
    return images, labels


def to_bytes(images: np.ndarray, maxval=255) -> np.ndarray:
    images = np.asarray(images, dtype=np.float64)
    if np.any(~np.isfinite(images)) or images.min(initial=0) < 0 or images.max(initial=0) > 1:
        raise ValueError("image values must lie in [0, 1]")
    return np.rint(images * maxval).astype(np.uint8 if maxval < 256 else np.uint16)


def write_cifar10_binary(path, images: np.ndarray, labels) -> None:
    images = np.asarray(images)
    if images.shape[1:] != CIFAR_SHAPE:
        raise ValueError(f"CIFAR images must have shape {CIFAR_SHAPE}, got {images.shape[1:]}")
    labels = np.asarray(labels, dtype=np.uint8).reshape(-1, 1)
    body = to_bytes(images).reshape(len(images), -1)
    Path(path).write_bytes(np.concatenate([labels, body], axis=1).tobytes())


# ---------------------------------------------------------------- Netpbm

_TOKEN = re.compile(rb"\s*(?:#[^\n]*\n\s*)*(\S+)")


def _header(raw: bytes) -> tuple[bytes, int, int, int, int]:
    pos = 0
    fields = []
    for _ in range(4):
        m = _TOKEN.match(raw, pos)
        if m is None:
            raise FormatError(f"truncated Netpbm header at byte {pos}")
        fields.append((m.group(1), m.start(1)))
        pos = m.end()
    magic, moff = fields[0]
    if magic not in (b"P5", b"P6"):
        raise FormatError(f"unsupported Netpbm magic {magic!r} at byte {moff}")
    vals = []
    for tok, off in fields[1:]:
        if not tok.isdigit():
            raise FormatError(f"malformed Netpbm header field {tok!r} at byte {off}")
        vals.append(int(tok))
    width, height, maxval = vals
    if width < 1 or height < 1:
        raise FormatError(f"bad Netpbm dimensions {width}x{height} at byte {fields[1][1]}")
    if maxval not in (255, 65535):
        raise FormatError(f"maxval {maxval} at byte {fields[3][1]}: only 255 and 65535 are supported")
    if pos >= len(raw) or not raw[pos:pos + 1].isspace():
        raise FormatError(f"missing whitespace after maxval at byte {pos}")
    return magic, width, height, maxval, pos + 1


def read_netpbm(path) -> np.ndarray:
    """Binary PGM/PPM as floats in [0, 1], shape (C, H, W)."""
    raw = Path(path).read_bytes()
    magic, width, height, maxval, off = _header(raw)
    channels = 3 if magic == b"P6" else 1
    itemsize = 1 if maxval == 255 else 2
    need = width * height * channels * itemsize
    if len(raw) - off < need:
        raise FormatError(f"{path}: payload at byte {off} has {len(raw) - off} bytes, need {need}")
    dtype = np.uint8 if itemsize == 1 else np.dtype(">u2")
    data = np.frombuffer(raw, dtype=dtype, count=width * height * channels, offset=off)
    return data.reshape(height, width, channels).transpose(2, 0, 1).astype(np.float64) / maxval


def write_netpbm(path, image: np.ndarray, maxval: int = 255) -> None:
    image = np.asarray(image, dtype=np.float64)
    if image.ndim == 2:
        image = image[None]
    channels, height, width = image.shape
    if channels not in (1, 3):
        raise ValueError(f"Netpbm stores 1 or 3 channels, got {channels}")
    if maxval not in (255, 65535):
        raise ValueError("maxval must be 255 or 65535")
    magic = b"P5" if channels == 1 else b"P6"
    q = to_bytes(image, maxval).transpose(1, 2, 0)
    if maxval == 65535:
        q = q.astype(">u2")
    Path(path).write_bytes(b"%s\n%d %d\n%d\n" % (magic, width, height, maxval) + q.tobytes())


# ---------------------------------------------------------------- datasets


@dataclass
class DatasetManifest:
    name: str
    shape: tuple[int, int, int]
    count: int
    source_format: str = "netpbm"
    checksum: str = ""
    provenance: dict = field(default_factory=lambda: {"kind": "clean"})
    splits: dict = field(default_factory=dict)
    files: list[str] = field(default_factory=list)

    def to_json(self) -> str:
        d = dict(self.__dict__)
        d["shape"] = list(self.shape)
        return json.dumps(d, indent=2, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "DatasetManifest":
        d = json.loads(text)
        d["shape"] = tuple(d["shape"])
        return cls(**d)


def image_checksum(images: np.ndarray) -> str:
    """sha256 of the 8-bit encoding of a batch of images."""
    return hashlib.sha256(to_bytes(images).tobytes()).hexdigest()


def save_dataset(directory, images: np.ndarray, name: str, provenance: dict | None = None,
                 splits: dict | None = None) -> DatasetManifest:
    """Write images as Netpbm files plus ``manifest.json``."""
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    images = np.asarray(images, dtype=np.float64)
    ext = ".ppm" if images.shape[1] == 3 else ".pgm"
    files = []
    for i, img in enumerate(images):
        fname = f"{i:06d}{ext}"
        write_netpbm(d / fname, img)
        files.append(fname)
    manifest = DatasetManifest(
        name=name, shape=tuple(images.shape[1:]), count=len(images),
        checksum=image_checksum(images), provenance=provenance or {"kind": "clean"},
        splits=splits or {}, files=files,
    )
    tmp = d / "manifest.json.tmp"
    tmp.write_text(manifest.to_json())
    os.replace(tmp, d / "manifest.json")
    return manifest


def load_dataset(path) -> tuple[np.ndarray, DatasetManifest]:
    """Read a Netpbm dataset directory or a CIFAR-10 batch file."""
    p = Path(path)
    if not p.exists():
        raise FileNotFoundError(f"dataset not found: {p}")
    if p.is_file():
        images, _ = read_cifar10_binary(p)
        return images, DatasetManifest(name=p.stem, shape=CIFAR_SHAPE, count=len(images),
                                       source_format="cifar10-binary", checksum=image_checksum(images))
    mpath = p / "manifest.json"
    if not mpath.exists():
        raise FileNotFoundError(f"no manifest.json in {p}")
    manifest = DatasetManifest.from_json(mpath.read_text())
    if len(manifest.files) != manifest.count:
        raise FormatError(f"{mpath}: count {manifest.count} but {len(manifest.files)} files listed")
    images = np.stack([read_netpbm(p / f) for f in manifest.files]) if manifest.files else \
        np.zeros((0,) + tuple(manifest.shape))
    if images.shape[1:] != tuple(manifest.shape):
        raise FormatError(f"{p}: images have shape {images.shape[1:]}, manifest says {manifest.shape}")
    return images, manifest


def verify_dataset(path) -> bool:
    """True if the manifest's count and checksum describe the files on disk."""
    try:
        images, manifest = load_dataset(path)
    except (OSError, ValueError):
        return False
    return len(images) == manifest.count and image_checksum(images) == manifest.checksum


def synth_dataset(count: int, shape=(3, 16, 16), smoothness: float = 1.5, seed: int = 0,
                  grain=(0.002, 0.0002)) -> np.ndarray:
    """Desk-scale texture images on the 8-bit grid.

    Blurred uniform noise (luminance shared across channels plus per-channel
    colour) rescaled around mid-grey, with Gaussian grain whose variance is
    ``grain[0] * x + grain[1]``.  ``smoothness == 0`` skips the blur.
    """
    c, h, w = shape
    if c > 3 or h > 32 or w > 32:
        raise ValueError(f"desk-scale shapes are at most 3x32x32, got {shape}")
    rng = np.random.default_rng(seed)
    lum = rng.uniform(size=(count, 1, h, w))
    col = rng.uniform(size=(count, c, h, w))
    if smoothness > 0:
        lum, col = blur(lum, smoothness), blur(col, smoothness)
    base = 0.7 * lum + 0.3 * col
    mu = base.mean(axis=(1, 2, 3), keepdims=True)
    sd = base.std(axis=(1, 2, 3), keepdims=True) + 1e-12
    contrast = rng.uniform(0.12, 0.2, size=(count, 1, 1, 1))
    bright = rng.uniform(0.4, 0.6, size=(count, 1, 1, 1))
    x = np.clip(bright + contrast * (base - mu) / sd, 0.0, 1.0)
    a, b = grain
    x = x + rng.standard_normal(x.shape) * np.sqrt(a * x + b)
    return np.rint(np.clip(x, 0.0, 1.0) * 255.0) / 255.0


# ---------------------------------------------------------------- checkpoints

MAGIC = b"CVFL"
FORMAT_VERSION = 1


@dataclass
class Checkpoint:
    config: dict
    params: dict[str, np.ndarray]
    buffers: dict[str, np.ndarray] = field(default_factory=dict)
    stats: dict | None = None
    train_state: dict | None = None
    fingerprint: str = ""


def _pack_state(state: dict | None) -> bytes:
    if state is None:
        return b""
    arrays = {}
    for k in ("params64",):
        for name, v in state[k].items():
            arrays[f"{k}/{name}"] = np.asarray(v, dtype=np.float64)
    opt = state["optimizer"]
    for k in ("m", "v"):
        for name, v in opt[k].items():
            arrays[f"adam_{k}/{name}"] = np.asarray(v, dtype=np.float64)
    meta = {k: v for k, v in state.items() if k not in ("params64", "optimizer")}
    meta["adam_step"] = opt["step_count"]
    arrays["meta"] = np.frombuffer(json.dumps(meta).encode(), dtype=np.uint8)
    buf = io.BytesIO()
    np.savez(buf, **arrays)
    return buf.getvalue()


def _unpack_state(blob: bytes) -> dict | None:
    if not blob:
        return None
    with np.load(io.BytesIO(blob), allow_pickle=False) as z:
        meta = json.loads(bytes(z["meta"]).decode())
        state = dict(meta)
        state["params64"] = {}
        opt = {"m": {}, "v": {}, "step_count": meta.pop("adam_step")}
        state.pop("adam_step", None)
        for key in z.files:
            if key == "meta":
                continue
            group, name = key.split("/", 1)
            if group == "params64":
                state["params64"][name] = z[key].copy()
            else:
                opt[group[len("adam_"):]][name] = z[key].copy()
        state["optimizer"] = opt
    return state


def save_checkpoint(path, ckpt: Checkpoint) -> None:
    """Write atomically: a failed write never replaces a valid checkpoint."""
    out = io.BytesIO()
    out.write(MAGIC)
    out.write(struct.pack("<H", FORMAT_VERSION))
    cfg = json.dumps(ckpt.config, sort_keys=True).encode()
    out.write(struct.pack("<I", len(cfg)) + cfg)
    tensors = [("param:" + k, v) for k, v in sorted(ckpt.params.items())]
    tensors += [("buffer:" + k, v) for k, v in sorted(ckpt.buffers.items())]
    out.write(struct.pack("<I", len(tensors)))
    for name, v in tensors:
        v = np.asarray(v)
        nb = name.encode()
        out.write(struct.pack("<H", len(nb)) + nb)
        out.write(struct.pack("<B", v.ndim) + struct.pack(f"<{v.ndim}I", *v.shape))
        out.write(np.ascontiguousarray(v, dtype="<f4").tobytes())
    stats = json.dumps(ckpt.stats, sort_keys=True).encode() if ckpt.stats is not None else b""
    out.write(struct.pack("<I", len(stats)) + stats)
    blob = _pack_state(ckpt.train_state)
    out.write(struct.pack("<Q", len(blob)) + blob)
    fp = ckpt.fingerprint.encode().ljust(64, b"\0")[:64]
    out.write(fp)
    payload = out.getvalue()
    data = payload + hashlib.sha256(payload).digest()
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(data)
    os.replace(tmp, path)


class CheckpointError(ValueError):
    pass


class _Reader:
    def __init__(self, data: bytes):
        self.data, self.pos = data, 0

    def take(self, n: int) -> bytes:
        if n < 0 or self.pos + n > len(self.data):
            raise CheckpointError(f"truncated checkpoint: need {n} bytes at offset {self.pos}")
        out = self.data[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def load_checkpoint(path) -> Checkpoint:
    data = Path(path).read_bytes()
    if len(data) < 4 + 2 + 32 or data[:4] != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint (bad magic)")
    (version,) = struct.unpack("<H", data[4:6])
    if version > FORMAT_VERSION:
        raise CheckpointError(f"{path}: format version {version} is newer than supported {FORMAT_VERSION}")
    payload, digest = data[:-32], data[-32:]
    if hashlib.sha256(payload).digest() != digest:
        raise CheckpointError(f"{path}: integrity digest mismatch (file truncated or modified)")
    r = _Reader(payload)
    r.take(6)
    (n,) = r.unpack("<I")
    config = json.loads(r.take(n))
    (count,) = r.unpack("<I")
    params, buffers = {}, {}
    for _ in range(count):
        (nl,) = r.unpack("<H")
        name = r.take(nl).decode()
        (ndim,) = r.unpack("<B")
        shape = r.unpack(f"<{ndim}I")
        size = int(np.prod(shape, dtype=np.int64))
        arr = np.frombuffer(r.take(4 * size), dtype="<f4").reshape(shape).astype(np.float64)
        group, key = name.split(":", 1)
        (params if group == "param" else buffers)[key] = arr
    (n,) = r.unpack("<I")
    stats = json.loads(r.take(n)) if n else None
    (n,) = r.unpack("<Q")
    train_state = _unpack_state(r.take(n))
    fingerprint = r.take(64).rstrip(b"\0").decode()
    if r.pos != len(payload):
        raise CheckpointError(f"{path}: {len(payload) - r.pos} trailing bytes")
    return Checkpoint(config, params, buffers, stats, train_state, fingerprint)


def save_model(path, model, stats: dict | None = None, train_state: dict | None = None) -> None:
    save_checkpoint(path, Checkpoint(
        config=model.config.to_dict(), params=model.named_parameters(),
        buffers=model.named_buffers(), stats=stats, train_state=train_state,
        fingerprint=model.fingerprint(),
    ))


def load_model(path):
    """Model from a checkpoint; returns ``(model, checkpoint)``.

    The fingerprint is recomputed from the loaded config and parameters and
    must match the stored one.
    """
    from .model import FlowModel, ModelConfig

    ckpt = load_checkpoint(path)
    model = FlowModel(ModelConfig.from_dict(ckpt.config))
    model.load_state(ckpt.params, ckpt.buffers)
    if model.fingerprint() != ckpt.fingerprint:
        raise CheckpointError(f"{path}: fingerprint mismatch")
    model.check_invertible()
    return model, ckpt
