"""Vision, sequence and survival encoders composed into a patient risk score."""
from __future__ import annotations

import io
import math
import struct
from collections import OrderedDict
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .nn import ConfigurationError, EncoderLayerParams, encoder_layer_forward, make_causal_mask

__all__ = [
    "ModelConfig",
    "ParameterStore",
    "ImageSequence",
    "InputError",
    "bilinear_resize",
    "patchify",
    "patchify_batch",
    "init_parameters",
    "vision_encode",
    "sequence_encode",
    "survival_head",
    "risk_score",
    "cohort_risks",
    "save_checkpoint",
    "load_checkpoint",
]


class InputError(ValueError):
    """Malformed patient data or landmark request."""


@dataclass(frozen=True)
class ModelConfig:
    P: int = 64
    d: int = 16
    heads: int = 4
    n_vision: int = 2
    n_seq: int = 2
    d_ff: int = 32
    d_s: int = 16
    d_x: int = 0
    dropout: float = 0.1
    seed: int = 0
    max_visits: int = 21
    seq_pos_embedding: bool = False

    def __post_init__(self):
        side = math.isqrt(self.P)
        if self.P < 1 or side * side != self.P:
            raise ConfigurationError(f"P={self.P} is not a perfect square")
        if self.heads < 1 or self.d % self.heads:
            raise ConfigurationError(f"heads={self.heads} must divide d={self.d}")
        if self.n_vision < 1 or self.n_seq < 1:
            raise ConfigurationError("encoders need at least one layer each")
        if self.d < 2 or self.d_ff < 1 or self.d_s < 1 or self.d_x < 0:
            raise ConfigurationError("invalid layer widths")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigurationError("dropout must lie in [0, 1)")

    @property
    def patch_side(self) -> int:
        return math.isqrt(self.P)

    @property
    def image_side(self) -> int:
        # P patches of sqrt(P) x sqrt(P) pixels tile a P x P image
        return self.P

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, raw: dict) -> "ModelConfig":
        known = {f.name: f.type for f in fields(cls)}
        unknown = set(raw) - set(known)
        if unknown:
            raise ConfigurationError(f"unknown model config keys: {sorted(unknown)}")
        out = {}
        for f in fields(cls):
            if f.name not in raw:
                continue
            v = raw[f.name]
            default = f.default
            if isinstance(default, bool):
                out[f.name] = v if isinstance(v, bool) else str(v).lower() in ("1", "true", "yes")
            elif isinstance(default, int):
                out[f.name] = int(v)
            else:
                out[f.name] = float(v)
        return cls(**out)


@dataclass
class ImageSequence:
    """One patient's grayscale visits, with visit times in standardized units."""

    patient_id: str
    times: np.ndarray
    images: list[np.ndarray]
    covariates: np.ndarray = field(default_factory=lambda: np.zeros(0))

    def __post_init__(self):
        self.times = np.asarray(self.times, dtype=np.float64)
        self.covariates = np.asarray(self.covariates, dtype=np.float64).reshape(-1)
        if len(self.images) < 1:
            raise InputError(f"patient {self.patient_id}: no images")
        if len(self.times) != len(self.images):
            raise InputError(f"patient {self.patient_id}: {len(self.times)} times for "
                             f"{len(self.images)} images")
        if np.any(np.diff(self.times) <= 0):
            raise InputError(f"patient {self.patient_id}: visit times must increase strictly")
        shape = np.shape(self.images[0])
        if any(np.shape(im) != shape or np.ndim(im) != 2 for im in self.images):
            raise InputError(f"patient {self.patient_id}: images must be equal-size 2-D grids")

    def __len__(self) -> int:
        return len(self.images)

    def visits_until(self, t: float) -> int:
        """Number of visits observed at or before ``t``."""
        return int(np.searchsorted(self.times, t + 1e-12, side="right"))

    def truncated(self, n_visits: int) -> "ImageSequence":
        return ImageSequence(self.patient_id, self.times[:n_visits],
                             list(self.images[:n_visits]), self.covariates)


# image preprocessing ----------------------------------------------------

def bilinear_resize(image, target) -> np.ndarray:
    """Bilinear resampling on a corner-aligned grid.

    ``target`` is a side length or a ``(rows, cols)`` pair.
    """
    img = np.asarray(image, dtype=np.float64)
    if img.ndim != 2 or img.size == 0:
        raise InputError("bilinear_resize expects a non-empty 2-D grid")
    rows, cols = (target, target) if np.isscalar(target) else target
    if rows < 2 or cols < 2:
        raise InputError("target side must be >= 2")
    if img.shape == (rows, cols):
        return img.copy()

    def coords(n_in, n_out):
        pos = np.linspace(0.0, n_in - 1, n_out) if n_in > 1 else np.zeros(n_out)
        lo = np.floor(pos).astype(int)
        lo = np.clip(lo, 0, max(n_in - 2, 0))
        hi = np.minimum(lo + 1, n_in - 1)
        return lo, hi, pos - lo

    r0, r1, fr = coords(img.shape[0], rows)
    c0, c1, fc = coords(img.shape[1], cols)
    top = img[r0][:, c0] * (1 - fc) + img[r0][:, c1] * fc
    bottom = img[r1][:, c0] * (1 - fc) + img[r1][:, c1] * fc
    return top * (1 - fr)[:, None] + bottom * fr[:, None]


def patchify(image, P: int) -> np.ndarray:
    """Split an image into ``P`` row-major patches of ``sqrt(P) x sqrt(P)`` pixels.

    Images that are not ``P x P`` are resized bilinearly first. Row ``p`` of
    the result is the row-major flattening of patch ``p``.
    """
    img = np.asarray(image, dtype=np.float64)
    if img.size == 0:
        raise InputError("empty image")
    side = math.isqrt(P)
    if side * side != P:
        raise ConfigurationError(f"P={P} is not a perfect square")
    if img.shape != (P, P):
        img = bilinear_resize(img, P)
    # (grid_r, side, grid_c, side) -> (grid_r, grid_c, side, side)
    blocks = img.reshape(side, side, side, side).transpose(0, 2, 1, 3)
    return blocks.reshape(P, P)


def patchify_batch(images: np.ndarray, P: int) -> np.ndarray:
    images = np.asarray(images, dtype=np.float64)
    side = math.isqrt(P)
    if images.shape[1:] != (P, P):
        return np.stack([patchify(im, P) for im in images])
    b = images.shape[0]
    return images.reshape(b, side, side, side, side).transpose(0, 1, 3, 2, 4).reshape(b, P, P)


# parameters -------------------------------------------------------------

class ParameterStore(OrderedDict):
    """Named float64 arrays holding every learnable tensor of the model."""

    def __init__(self, config: ModelConfig, *args, **kwargs):
        super().__init__(*args, **kwargs)
        self.config = config

    def copy(self) -> "ParameterStore":
        return ParameterStore(self.config, ((k, v.copy()) for k, v in self.items()))

    def tensors(self) -> dict[str, Tensor]:
        return {k: ad.parameter(v, k) for k, v in self.items()}

    def constants(self) -> dict[str, Tensor]:
        return {k: ad.tensor(v, k) for k, v in self.items()}

    def check(self) -> None:
        expected = parameter_shapes(self.config)
        missing = set(expected) - set(self)
        extra = set(self) - set(expected)
        if missing or extra:
            raise ConfigurationError(f"store mismatch: missing={sorted(missing)} "
                                     f"extra={sorted(extra)}")
        for k, shape in expected.items():
            if self[k].shape != shape:
                raise ConfigurationError(f"{k}: shape {self[k].shape} != {shape}")


def _layer_shapes(prefix: str, c: ModelConfig) -> dict[str, tuple[int, ...]]:
    d_h = c.d // c.heads
    shapes = {}
    for kind in ("w_q", "w_k", "w_v"):
        for h in range(c.heads):
            shapes[f"{prefix}.{kind}.{h}"] = (c.d, d_h)
    shapes.update({
        f"{prefix}.w_a": (c.d, c.d),
        f"{prefix}.w_1": (c.d, c.d_ff),
        f"{prefix}.b_1": (c.d_ff,),
        f"{prefix}.w_2": (c.d_ff, c.d),
        f"{prefix}.b_2": (c.d,),
        f"{prefix}.ln1_gain": (c.d,),
        f"{prefix}.ln1_shift": (c.d,),
        f"{prefix}.ln2_gain": (c.d,),
        f"{prefix}.ln2_shift": (c.d,),
    })
    return shapes


def parameter_shapes(c: ModelConfig) -> "OrderedDict[str, tuple[int, ...]]":
    shapes: OrderedDict[str, tuple[int, ...]] = OrderedDict()
    shapes["patch_proj"] = (c.P, c.d)
    shapes["cls_v"] = (c.d,)
    shapes["pos_emb"] = (c.P + 1, c.d)
    for layer in range(c.n_vision):
        shapes.update(_layer_shapes(f"vis.{layer}", c))
    shapes["cls_l"] = (c.d,)
    if c.seq_pos_embedding:
        shapes["seq_pos_emb"] = (c.max_visits + 1, c.d)
    for layer in range(c.n_seq):
        shapes.update(_layer_shapes(f"seq.{layer}", c))
    shapes["surv.w_1"] = (c.d + c.d_x, c.d_s)
    shapes["surv.b_1"] = (c.d_s,)
    shapes["surv.w_2"] = (c.d_s, 1)
    shapes["surv.b_2"] = (1,)
    return shapes


def is_weight_matrix(name: str) -> bool:
    """True for projection / weight matrices (the elastic-net penalized set)."""
    if name == "patch_proj":
        return True
    parts = name.split(".")
    if len(parts) >= 3 and parts[-2] in ("w_q", "w_k", "w_v"):
        return True
    return parts[-1] in ("w_a", "w_1", "w_2") and len(parts) >= 2


def init_parameters(config: ModelConfig, seed: int | None = None) -> ParameterStore:
    """Glorot-uniform weights; N(0, 0.02^2) biases, CLS tokens and position embeddings;
    unit layer-norm gains and zero shifts."""
    rng = np.random.default_rng(config.seed if seed is None else seed)
    store = ParameterStore(config)
    for name, shape in parameter_shapes(config).items():
        if name.endswith("_gain"):
            store[name] = np.ones(shape)
        elif name.endswith("_shift"):
            store[name] = np.zeros(shape)
        elif len(shape) == 2 and is_weight_matrix(name):
            limit = math.sqrt(6.0 / (shape[0] + shape[1]))
            store[name] = rng.uniform(-limit, limit, size=shape)
        else:
            store[name] = rng.normal(0.0, 0.02, size=shape)
    return store


# forward passes ---------------------------------------------------------

def _as_tensors(params) -> dict[str, Tensor]:
    if isinstance(params, ParameterStore):
        return params.constants()
    return params


def vision_encode_batch(patches: np.ndarray, params: dict[str, Tensor], config: ModelConfig,
                        rng: np.random.Generator | None = None) -> Tensor:
    """Batched vision encoder: ``(B, P, P)`` patch stacks -> ``(B, d)`` CLS embeddings."""
    b = patches.shape[0]
    d = config.d
    projected = ad.matmul(ad.tensor(patches), params["patch_proj"])  # (B, P, d)
    cls = ad.reshape(params["cls_v"], (1, 1, d)) + np.zeros((b, 1, d))
    z = ad.concat([cls, projected], axis=1) + params["pos_emb"]
    for layer in range(config.n_vision):
        p = EncoderLayerParams.from_store(params, f"vis.{layer}", config.heads)
        z = encoder_layer_forward(z, p, None, config.dropout, rng)
    return z[:, 0, :]


def vision_encode(image, params, config: ModelConfig) -> Tensor:
    """Embedding of one image: first output row (the CLS_v position) of the last layer."""
    patches = patchify(image, config.P)[None]
    return vision_encode_batch(patches, _as_tensors(params), config)[0]


def sequence_encode_batch(embeddings: Tensor, params: dict[str, Tensor], config: ModelConfig,
                          rng: np.random.Generator | None = None) -> Tensor:
    """``(G, J, d)`` visit embeddings -> ``(G, d)``, read from CLS_l appended last."""
    g, j, d = embeddings.shape
    if j < 1:
        raise InputError("empty visit sequence")
    if j > config.max_visits:
        raise InputError(f"{j} visits exceed the configured maximum {config.max_visits}")
    cls = ad.reshape(params["cls_l"], (1, 1, d)) + np.zeros((g, 1, d))
    z = ad.concat([embeddings, cls], axis=1)
    if config.seq_pos_embedding:
        z = z + params["seq_pos_emb"][: j + 1]
    mask = make_causal_mask(j + 1)
    for layer in range(config.n_seq):
        p = EncoderLayerParams.from_store(params, f"seq.{layer}", config.heads)
        z = encoder_layer_forward(z, p, mask, config.dropout, rng)
    return z[:, -1, :]


def sequence_encode(embeddings: Sequence[Tensor], params, config: ModelConfig) -> Tensor:
    if len(embeddings) == 0:
        raise InputError("empty visit sequence")
    rows = ad.stack([ad._as_tensor(e) for e in embeddings], axis=0)
    return sequence_encode_batch(ad.reshape(rows, (1, *rows.shape)),
                                 _as_tensors(params), config)[0]


def survival_head(seq_embedding: Tensor, covariates, params, config: ModelConfig) -> Tensor:
    """``GELU([O_l, x] W_s1 + b_s1) W_s2 + b_s2``; accepts ``(d,)`` or ``(n, d)``."""
    params = _as_tensors(params)
    h = ad._as_tensor(seq_embedding)
    single = h.ndim == 1
    if single:
        h = ad.reshape(h, (1, h.shape[0]))
    if config.d_x:
        x = np.asarray(covariates, dtype=np.float64).reshape(h.shape[0], config.d_x)
        h = ad.concat([h, ad.tensor(x)], axis=1)
    hidden = ad.gelu(ad.matmul(h, params["surv.w_1"]) + params["surv.b_1"])
    r = ad.matmul(hidden, params["surv.w_2"]) + params["surv.b_2"]
    r = ad.reshape(r, (r.shape[0],))
    return r[0] if single else r


def risk_score(seq: ImageSequence, landmark: int, params, config: ModelConfig) -> float:
    """Risk of one patient from the first ``landmark`` visits."""
    return float(cohort_risks([seq], [landmark], _as_tensors(params), config).data[0])


def cohort_risks(sequences: Sequence[ImageSequence], landmarks: Sequence[int],
                 params: dict[str, Tensor], config: ModelConfig,
                 rng: np.random.Generator | None = None,
                 patches: np.ndarray | None = None) -> Tensor:
    """Risk scores for many patients in one graph.

    All used images go through the vision encoder as one batch; patients are
    then grouped by visit count for the causal sequence encoder.
    ``patches`` may carry a precomputed ``patchify_batch`` of the used images
    in patient-then-visit order.
    """
    params = _as_tensors(params)
    counts = []
    for seq, j in zip(sequences, landmarks):
        if j < 1 or j > len(seq):
            raise InputError(f"patient {seq.patient_id}: landmark uses {j} of {len(seq)} images")
        counts.append(int(j))
    if patches is None:
        imgs = [im for seq, j in zip(sequences, counts) for im in seq.images[:j]]
        patches = _patch_stack(imgs, config.P)
    emb = vision_encode_batch(patches, params, config, rng)
    offsets = np.concatenate([[0], np.cumsum(counts)])

    groups: dict[int, list[int]] = {}
    for i, j in enumerate(counts):
        groups.setdefault(j, []).append(i)
    outs, order = [], []
    for j in sorted(groups):
        members = groups[j]
        idx = np.concatenate([np.arange(offsets[i], offsets[i] + j) for i in members])
        block = ad.reshape(emb[idx], (len(members), j, config.d))
        outs.append(sequence_encode_batch(block, params, config, rng))
        order.extend(members)
    seq_emb = ad.concat(outs, axis=0) if len(outs) > 1 else outs[0]
    inverse = np.argsort(np.asarray(order))
    if not np.array_equal(inverse, np.arange(len(order))):
        seq_emb = seq_emb[inverse]
    cov = None
    if config.d_x:
        cov = np.stack([s.covariates for s in sequences])
    return survival_head(seq_emb, cov, params, config)


def _patch_stack(images: Sequence[np.ndarray], P: int) -> np.ndarray:
    if all(np.shape(im) == (P, P) for im in images):
        return patchify_batch(np.stack(images), P)
    return np.stack([patchify(im, P) for im in images])


# checkpoints ------------------------------------------------------------

_MAGIC = b"SLF1"


def save_checkpoint(store: ParameterStore, path) -> None:
    """Write ``SLF1`` + config block + named little-endian float64 tensors."""
    buf = io.BytesIO()
    buf.write(_MAGIC)
    cfg = ";".join(f"{k}={v}" for k, v in store.config.to_dict().items()).encode("utf-8")
    buf.write(struct.pack("<I", len(cfg)))
    buf.write(cfg)
    buf.write(struct.pack("<I", len(store)))
    for name, arr in store.items():
        raw = name.encode("utf-8")
        buf.write(struct.pack("<I", len(raw)))
        buf.write(raw)
        buf.write(struct.pack("<I", arr.ndim))
        buf.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        buf.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())
    Path(path).write_bytes(buf.getvalue())


def load_checkpoint(path) -> ParameterStore:
    data = Path(path).read_bytes()
    if data[:4] != _MAGIC:
        raise InputError(f"{path}: not an SLF1 checkpoint")
    pos = 4

    def read_u32():
        nonlocal pos
        (v,) = struct.unpack_from("<I", data, pos)
        pos += 4
        return v

    n = read_u32()
    cfg_text = data[pos:pos + n].decode("utf-8")
    pos += n
    raw_cfg = dict(item.split("=", 1) for item in cfg_text.split(";") if item)
    store = ParameterStore(ModelConfig.from_dict(raw_cfg))
    for _ in range(read_u32()):
        n = read_u32()
        name = data[pos:pos + n].decode("utf-8")
        pos += n
        rank = read_u32()
        dims = struct.unpack_from(f"<{rank}I", data, pos)
        pos += 4 * rank
        count = int(np.prod(dims)) if rank else 1
        arr = np.frombuffer(data, dtype="<f8", count=count, offset=pos).astype(np.float64)
        pos += 8 * count
        store[name] = arr.reshape(dims)
    store.check()
    return store
