"""Dual encoders, bidirectional cross-attention fusion and the grounding heads.

Shapes are per sample: an image is ``H*W`` region tokens and a text is ``T``
word tokens. Both encoders end in a shared width ``d``; the pre-fusion
features are what the batch-level contrastive loss sees, the post-fusion
features feed the matching head, the box head and the MLM head.
"""

from __future__ import annotations

import hashlib
import json
import os
import struct
import tempfile
from collections import OrderedDict
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .synthworld import MAX_TOKENS, VOCAB, TextSpec, anchor_centers


class ConfigError(ValueError):
    pass


class InputError(ValueError):
    pass


class CheckpointError(IOError):
    pass


@dataclass(frozen=True)
class ModelConfig:
    img_dim: int = 30
    vocab_size: int = len(VOCAB)
    grid: tuple[int, int] = (6, 6)
    d: int = 32
    n_heads: int = 4
    n_img_layers: int = 2
    n_txt_layers: int = 2
    n_fusion: int = 2
    mlp_ratio: int = 2
    max_text_len: int = MAX_TOKENS
    text_pos: bool = True
    img_pos_scale: float = 1.0
    tau: float | None = None  # None -> 1/sqrt(d)
    init_std: float = 0.02

    def __post_init__(self):
        if self.d % self.n_heads:
            raise ConfigError(f"d={self.d} not divisible by n_heads={self.n_heads}")
        if self.d % 4:
            raise ConfigError("d must be a multiple of 4 for the 2-D sinusoidal encoding")
        if self.temperature <= 0:
            raise ConfigError("tau must be positive")
        if self.max_text_len > MAX_TOKENS:
            raise ConfigError(f"max_text_len capped at {MAX_TOKENS}")

    @property
    def temperature(self) -> float:
        return 1.0 / np.sqrt(self.d) if self.tau is None else float(self.tau)

    def digest(self) -> str:
        blob = json.dumps(asdict(self), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()[:16]

    @classmethod
    def from_dict(cls, d: dict) -> ModelConfig:
        d = dict(d)
        if "grid" in d:
            d["grid"] = tuple(d["grid"])
        return cls(**d)


class ModelParams:
    """Ordered name -> Tensor mapping plus the config that shaped it."""

    def __init__(self, config: ModelConfig, tensors: "OrderedDict[str, Tensor]"):
        self.config = config
        self.tensors = tensors

    def __getitem__(self, name: str) -> Tensor:
        return self.tensors[name]

    def __contains__(self, name: str) -> bool:
        return name in self.tensors

    def __iter__(self):
        return iter(self.tensors)

    def __len__(self) -> int:
        return len(self.tensors)

    def items(self):
        return self.tensors.items()

    def names(self) -> list[str]:
        return list(self.tensors)

    def census(self) -> dict[str, tuple[int, ...]]:
        return {k: v.shape for k, v in self.tensors.items()}

    def n_parameters(self) -> int:
        return int(sum(v.data.size for v in self.tensors.values()))

    def copy(self) -> ModelParams:
        return ModelParams(self.config, OrderedDict((k, Tensor(v.data, requires_grad=True))
                                                    for k, v in self.tensors.items()))

    def arrays(self) -> "OrderedDict[str, np.ndarray]":
        return OrderedDict((k, v.data) for k, v in self.tensors.items())

    def checksum(self, names: Sequence[str] | None = None) -> str:
        h = hashlib.sha256()
        for k in names if names is not None else self.tensors:
            h.update(k.encode())
            h.update(self.tensors[k].data.tobytes())
        return h.hexdigest()

    def zero_grad(self) -> None:
        for t in self.tensors.values():
            t.grad = None

    @classmethod
    def from_arrays(cls, config: ModelConfig, arrays: dict[str, np.ndarray]) -> ModelParams:
        ref = init_params(config, seed=0)
        if set(arrays) != set(ref.tensors):
            missing = set(ref.tensors) - set(arrays)
            extra = set(arrays) - set(ref.tensors)
            raise CheckpointError(f"tensor names differ (missing {sorted(missing)}, extra {sorted(extra)})")
        out = OrderedDict()
        for k, t in ref.tensors.items():
            if arrays[k].shape != t.shape:
                raise CheckpointError(f"{k}: shape {arrays[k].shape}, expected {t.shape}")
            out[k] = Tensor(arrays[k], requires_grad=True)
        return cls(config, out)


def init_params(config: ModelConfig, seed: int = 0) -> ModelParams:
    """Normal(0, init_std) weights, zero biases, unit LayerNorm gains.

    Fusion output projections start at zero so the untrained fusion stack
    is the identity map.
    """
    rng = np.random.default_rng([int(seed), 0x1417])
    c = config
    d, hid = c.d, c.d * c.mlp_ratio
    p: OrderedDict[str, Tensor] = OrderedDict()

    def normal(name, shape):
        p[name] = Tensor(rng.normal(0.0, c.init_std, size=shape), requires_grad=True)

    def const(name, shape, value):
        p[name] = Tensor(np.full(shape, float(value)), requires_grad=True)

    def linear(name, n_in, n_out, zero=False, bias=True):
        if zero:
            const(f"{name}.w", (n_in, n_out), 0.0)
        else:
            normal(f"{name}.w", (n_in, n_out))
        if bias:
            const(f"{name}.b", (n_out,), 0.0)

    def norm(name):
        const(f"{name}.g", (d,), 1.0)
        const(f"{name}.b", (d,), 0.0)

    def block(prefix):
        norm(f"{prefix}.ln1")
        linear(f"{prefix}.q", d, d)
        # a key bias shifts every score of a query equally, so softmax ignores it
        linear(f"{prefix}.k", d, d, bias=False)
        linear(f"{prefix}.v", d, d)
        linear(f"{prefix}.o", d, d)
        norm(f"{prefix}.ln2")
        linear(f"{prefix}.fc1", d, hid)
        linear(f"{prefix}.fc2", hid, d)

    linear("img.proj", c.img_dim, d)
    for i in range(c.n_img_layers):
        block(f"img.blocks.{i}")
    normal("txt.embed", (c.vocab_size, d))
    normal("txt.pos", (c.max_text_len, d))
    for i in range(c.n_txt_layers):
        block(f"txt.blocks.{i}")
    for i in range(c.n_fusion):
        f = f"fusion.{i}"
        norm(f"{f}.ln_img")
        norm(f"{f}.ln_txt")
        for side in ("i2t", "t2i"):  # i2t: image queries attend to text
            linear(f"{f}.{side}.q", d, d)
            linear(f"{f}.{side}.k", d, d, bias=False)
            linear(f"{f}.{side}.v", d, d)
            linear(f"{f}.{side}.o", d, d, zero=True)
    linear("box.fc1", d, d)
    linear("box.fc2", d, 5)
    linear("mlm.fc1", d, d)
    linear("mlm.fc2", d, c.vocab_size)
    return ModelParams(config, p)


# ---------------------------------------------------------------------------
# building blocks


def _linear(x: Tensor, params: ModelParams, name: str) -> Tensor:
    y = ad.matmul(x, params[f"{name}.w"])
    bias = f"{name}.b"
    return ad.add(y, params[bias]) if bias in params else y


def _norm(x: Tensor, params: ModelParams, name: str) -> Tensor:
    return ad.layer_norm(x, params[f"{name}.g"], params[f"{name}.b"])


def _block(x: Tensor, params: ModelParams, prefix: str) -> Tensor:
    h = _norm(x, params, f"{prefix}.ln1")
    a = ad.attention(_linear(h, params, f"{prefix}.q"), _linear(h, params, f"{prefix}.k"),
                     _linear(h, params, f"{prefix}.v"), params.config.n_heads)
    x = ad.add(x, _linear(a, params, f"{prefix}.o"))
    h = _norm(x, params, f"{prefix}.ln2")
    h = _linear(ad.gelu(_linear(h, params, f"{prefix}.fc1")), params, f"{prefix}.fc2")
    return ad.add(x, h)


_pos_cache: dict[tuple[int, int, int], np.ndarray] = {}


def sinusoidal_2d(grid: tuple[int, int], d: int) -> np.ndarray:
    """Fixed (H*W, d) encoding: first half encodes the row, second the column."""
    key = (grid[0], grid[1], d)
    if key not in _pos_cache:
        H, W = grid
        half = d // 2
        freqs = 1.0 / (100.0 ** (np.arange(half // 2) / (half // 2)))

        def enc(pos):
            ang = pos[:, None] * freqs[None, :]
            return np.concatenate([np.sin(ang), np.cos(ang)], axis=1)

        rows = np.repeat(np.arange(H), W).astype(np.float64)
        cols = np.tile(np.arange(W), H).astype(np.float64)
        _pos_cache[key] = np.concatenate([enc(rows), enc(cols)], axis=1)
    return _pos_cache[key]


# ---------------------------------------------------------------------------
# forward


def encode_image(image_tokens: np.ndarray, params: ModelParams) -> Tensor:
    c = params.config
    if image_tokens.shape[0] != c.grid[0] * c.grid[1]:
        raise InputError(f"expected {c.grid[0] * c.grid[1]} image tokens, got {image_tokens.shape[0]}")
    x = _linear(Tensor._wrap(np.asarray(image_tokens, dtype=np.float64)), params, "img.proj")
    if c.img_pos_scale:
        x = ad.add(x, c.img_pos_scale * sinusoidal_2d(c.grid, c.d))
    for i in range(c.n_img_layers):
        x = _block(x, params, f"img.blocks.{i}")
    return x


def embed_text(token_ids: Sequence[int], params: ModelParams, lookup: Tensor | None = None) -> Tensor:
    """Token embedding lookup plus learned positions (encoder input).

    ``lookup`` stands in for the embedding-table rows (a tuned prompt).
    """
    c = params.config
    n = len(token_ids) if lookup is None else lookup.shape[0]
    if n > c.max_text_len:
        raise InputError(f"text has {n} tokens, limit is {c.max_text_len}")
    x = ad.embedding(params["txt.embed"], token_ids) if lookup is None else lookup
    if c.text_pos:
        x = ad.add(x, ad.take_rows(params["txt.pos"], np.arange(n)))
    return x


def encode_text(token_ids: Sequence[int], params: ModelParams, lookup: Tensor | None = None) -> Tensor:
    x = embed_text(token_ids, params, lookup)
    for i in range(params.config.n_txt_layers):
        x = _block(x, params, f"txt.blocks.{i}")
    return x


PROMPT_LEVELS = ("embedding", "features")


@dataclass
class PromptMatrix:
    """A free continuous matrix standing in for one fixed prompt.

    ``level="embedding"`` replaces the token-embedding lookup (positions and
    the text encoder still apply); ``level="features"`` replaces the whole
    text-encoder output.
    """

    values: Tensor
    level: str = "embedding"

    def __post_init__(self):
        if self.level not in PROMPT_LEVELS:
            raise ConfigError(f"prompt level must be one of {PROMPT_LEVELS}, got {self.level!r}")

    @classmethod
    def initial(cls, params: ModelParams, token_ids: Sequence[int], level: str = "embedding") -> PromptMatrix:
        with ad.no_grad():
            if level == "embedding":
                data = params["txt.embed"].data[np.asarray(token_ids, dtype=np.intp)].copy()
            else:
                data = encode_text(token_ids, params).data.copy()
        return cls(Tensor(data, requires_grad=True), level)

    def features(self, params: ModelParams) -> Tensor:
        if self.level == "features":
            return self.values
        return encode_text((), params, lookup=self.values)


def dual_encode(sample, params: ModelParams, token_ids: Sequence[int] | None = None,
                text_features: Tensor | PromptMatrix | None = None) -> tuple[Tensor, Tensor]:
    """Pre-fusion region features and token features.

    ``sample`` is a GroundingSample (or anything with ``image_tokens`` and
    ``text``). ``token_ids`` overrides the sample's text (used for MLM
    corruption); ``text_features`` is how a tuned prompt is injected, either
    as ready pre-fusion features or as a :class:`PromptMatrix`.
    """
    ids = sample.text.token_ids if token_ids is None else token_ids
    if len(ids) > MAX_TOKENS:
        raise InputError(f"text has {len(ids)} tokens (max {MAX_TOKENS})")
    O0 = encode_image(sample.image_tokens, params)
    if text_features is None:
        P0 = encode_text(ids, params)
    elif isinstance(text_features, PromptMatrix):
        P0 = text_features.features(params)
    else:
        P0 = text_features
    return O0, P0


def fuse(O0: Tensor, P0: Tensor, params: ModelParams) -> tuple[Tensor, Tensor]:
    """Bidirectional cross-attention with residual connections."""
    c = params.config
    if O0.ndim != 2 or P0.ndim != 2 or O0.shape[1] != P0.shape[1] or O0.shape[1] != c.d:
        raise ad.DimensionError(f"fuse: O {O0.shape}, P {P0.shape}, d={c.d}")
    O, P = O0, P0
    for i in range(c.n_fusion):
        f = f"fusion.{i}"
        ho = _norm(O, params, f"{f}.ln_img")
        hp = _norm(P, params, f"{f}.ln_txt")
        a_img = ad.attention(_linear(ho, params, f"{f}.i2t.q"), _linear(hp, params, f"{f}.i2t.k"),
                             _linear(hp, params, f"{f}.i2t.v"), c.n_heads)
        a_txt = ad.attention(_linear(hp, params, f"{f}.t2i.q"), _linear(ho, params, f"{f}.t2i.k"),
                             _linear(ho, params, f"{f}.t2i.v"), c.n_heads)
        O = ad.add(O, _linear(a_img, params, f"{f}.i2t.o"))
        P = ad.add(P, _linear(a_txt, params, f"{f}.t2i.o"))
    return O, P


def matching_logits(O: Tensor, P: Tensor, tau: float) -> Tensor:
    """Region-word similarity ``O P^T / tau``."""
    if tau <= 0:
        raise ConfigError("tau must be positive")
    if O.shape[1] != P.shape[1]:
        raise ad.DimensionError(f"matching_logits: O {O.shape} vs P {P.shape}")
    return ad.scale(ad.matmul(O, ad.transpose(P)), 1.0 / tau)


def predict_boxes(O: Tensor, anchors: np.ndarray, params: ModelParams) -> tuple[Tensor, Tensor, Tensor]:
    """Per-region boxes, non-negative side offsets and centerness logits.

    Returns ``(boxes, offsets, centerness)`` where ``offsets`` are (l, t, r, b)
    via softplus and ``boxes`` are (cx-l, cy-t, cx+r, cy+b).
    """
    h = ad.gelu(_linear(O, params, "box.fc1"))
    out = _linear(h, params, "box.fc2")
    offsets = ad.softplus(out[:, 0:4])
    centerness = out[:, 4]
    sign = np.array([-1.0, -1.0, 1.0, 1.0])
    base = np.concatenate([anchors, anchors], axis=1)
    boxes = ad.add(ad.mul(offsets, sign), base)
    return boxes, offsets, centerness


def mlm_logits(P: Tensor, params: ModelParams) -> Tensor:
    return _linear(ad.gelu(_linear(P, params, "mlm.fc1")), params, "mlm.fc2")


@dataclass
class ForwardOutput:
    O0: Tensor
    P0: Tensor
    O: Tensor
    P: Tensor
    S: Tensor
    boxes: Tensor
    centerness: Tensor


def forward(sample, params: ModelParams, token_ids=None, text_features=None) -> ForwardOutput:
    O0, P0 = dual_encode(sample, params, token_ids=token_ids, text_features=text_features)
    O, P = fuse(O0, P0, params)
    S = matching_logits(O, P, params.config.temperature)
    boxes, _, ctr = predict_boxes(O, anchor_centers(params.config.grid), params)
    return ForwardOutput(O0, P0, O, P, S, boxes, ctr)


# ---------------------------------------------------------------------------
# inference decoding


@dataclass(frozen=True)
class Detection:
    box: tuple[float, float, float, float]
    score: float
    span: int
    region: int = -1

    def __post_init__(self):
        x1, y1, x2, y2 = self.box
        if not (x1 < x2 and y1 < y2):
            raise ValueError(f"degenerate box {self.box}")
        if not 0.0 <= self.score <= 1.0:
            raise ValueError(f"score {self.score} outside [0, 1]")


def _sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * np.asarray(x, dtype=np.float64)))


def clamp_boxes(boxes: np.ndarray, min_extent: float = 1e-3) -> np.ndarray:
    b = np.array(boxes, dtype=np.float64, copy=True)
    for lo, hi in ((0, 2), (1, 3)):
        short = b[:, hi] - b[:, lo] < min_extent
        mid = (b[short, lo] + b[short, hi]) / 2
        b[short, lo] = mid - min_extent / 2
        b[short, hi] = mid + min_extent / 2
    return b


def pairwise_iou(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    a = np.asarray(a, dtype=np.float64).reshape(-1, 4)
    b = np.asarray(b, dtype=np.float64).reshape(-1, 4)
    iw = np.clip(np.minimum(a[:, None, 2], b[None, :, 2]) - np.maximum(a[:, None, 0], b[None, :, 0]), 0, None)
    ih = np.clip(np.minimum(a[:, None, 3], b[None, :, 3]) - np.maximum(a[:, None, 1], b[None, :, 1]), 0, None)
    inter = iw * ih
    area_a = np.clip(a[:, 2] - a[:, 0], 0, None) * np.clip(a[:, 3] - a[:, 1], 0, None)
    area_b = np.clip(b[:, 2] - b[:, 0], 0, None) * np.clip(b[:, 3] - b[:, 1], 0, None)
    union = area_a[:, None] + area_b[None, :] - inter
    with np.errstate(invalid="ignore", divide="ignore"):
        iou = np.where(union > 0, inter / np.where(union > 0, union, 1.0), 0.0)
    return iou


def nms(boxes: np.ndarray, scores: np.ndarray, iou_thr: float) -> list[int]:
    """Greedy suppression; returns kept indices in descending score order."""
    order = np.argsort(-np.asarray(scores), kind="stable")
    iou = pairwise_iou(boxes, boxes)
    keep: list[int] = []
    alive = np.ones(len(order), dtype=bool)
    for pos, i in enumerate(order):
        if not alive[pos]:
            continue
        keep.append(int(i))
        for q in range(pos + 1, len(order)):
            if alive[q] and iou[i, order[q]] > iou_thr:
                alive[q] = False
    return keep


def decode_detections(S: np.ndarray, boxes: np.ndarray, centerness: np.ndarray,
                      spans: Sequence[tuple[int, int]], score_thr: float = 0.05,
                      nms_iou: float = 0.6) -> list[Detection]:
    """Span scores ``sigmoid(max_span S) * sigmoid(centerness)``, then per-span NMS."""
    if not spans:
        return []
    S = np.asarray(S, dtype=np.float64)
    boxes = clamp_boxes(boxes)
    ctr = _sigmoid(centerness)
    out: list[Detection] = []
    for k, (s, e) in enumerate(spans):
        scores = _sigmoid(S[:, s:e].max(axis=1)) * ctr
        idx = np.nonzero(scores >= score_thr)[0]
        if idx.size == 0:
            continue
        for j in nms(boxes[idx], scores[idx], nms_iou):
            r = int(idx[j])
            out.append(Detection(tuple(float(v) for v in boxes[r]), float(scores[r]), k, r))
    return out


def detect(sample, params: ModelParams, text: TextSpec | None = None, score_thr: float = 0.05,
           nms_iou: float = 0.6, text_features: Tensor | PromptMatrix | None = None) -> list[Detection]:
    """Inference for one image under one prompt (defaults to the sample's text)."""
    if text is not None:
        sample = _Prompted(sample.image_tokens, text)
    with ad.no_grad():
        out = forward(sample, params, text_features=text_features)
    return decode_detections(out.S.data, out.boxes.data, out.centerness.data, sample.text.spans,
                             score_thr, nms_iou)


@dataclass(frozen=True)
class _Prompted:
    image_tokens: np.ndarray
    text: TextSpec


# ---------------------------------------------------------------------------
# checkpoints
#
# layout (all little-endian):
#   8s   magic  b"GRNDCKPT"
#   u32  version
#   u32  n, then n bytes of config hash (utf-8)
#   u32  tensor count
#   per tensor: u32 name length, name (utf-8), u32 rank, rank x u64 extents,
#               prod(extents) x f64 values

MAGIC = b"GRNDCKPT"
VERSION = 1


def encode_checkpoint(arrays: dict[str, np.ndarray], config_hash: str) -> bytes:
    parts = [MAGIC, struct.pack("<I", VERSION)]
    h = config_hash.encode()
    parts += [struct.pack("<I", len(h)), h, struct.pack("<I", len(arrays))]
    for name, arr in arrays.items():
        nb = name.encode()
        arr = np.ascontiguousarray(arr, dtype="<f8")
        parts += [struct.pack("<I", len(nb)), nb, struct.pack("<I", arr.ndim)]
        parts += [struct.pack(f"<{arr.ndim}Q", *arr.shape), arr.tobytes()]
    return b"".join(parts)


def decode_checkpoint(blob: bytes) -> tuple["OrderedDict[str, np.ndarray]", str]:
    try:
        return _decode(blob)
    except (UnicodeDecodeError, ValueError, struct.error) as e:
        raise CheckpointError(f"malformed checkpoint: {e}") from e


def _decode(blob: bytes) -> tuple["OrderedDict[str, np.ndarray]", str]:
    view = memoryview(blob)
    pos = 0

    def take(n):
        nonlocal pos
        if pos + n > len(view):
            raise CheckpointError("truncated checkpoint")
        chunk = view[pos:pos + n]
        pos += n
        return chunk

    if bytes(take(8)) != MAGIC:
        raise CheckpointError("bad magic")
    (version,) = struct.unpack("<I", take(4))
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    (hlen,) = struct.unpack("<I", take(4))
    config_hash = bytes(take(hlen)).decode()
    (count,) = struct.unpack("<I", take(4))
    arrays: OrderedDict[str, np.ndarray] = OrderedDict()
    for _ in range(count):
        (nlen,) = struct.unpack("<I", take(4))
        name = bytes(take(nlen)).decode()
        (rank,) = struct.unpack("<I", take(4))
        shape = struct.unpack(f"<{rank}Q", take(8 * rank))
        size = int(np.prod(shape)) if rank else 1
        arrays[name] = np.frombuffer(bytes(take(8 * size)), dtype="<f8").reshape(shape).astype(np.float64)
    if pos != len(view):
        raise CheckpointError("trailing bytes after last tensor")
    return arrays, config_hash


def atomic_write(path: str | Path, blob: bytes) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(blob)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def save_checkpoint(path: str | Path, params: ModelParams, config_hash: str) -> None:
    atomic_write(path, encode_checkpoint(params.arrays(), config_hash))


def load_checkpoint(path: str | Path, config: ModelConfig | None = None):
    """Read a checkpoint; with ``config`` returns ModelParams, else raw arrays."""
    blob = Path(path).read_bytes()
    arrays, config_hash = decode_checkpoint(blob)
    if config is None:
        return arrays, config_hash
    return ModelParams.from_arrays(config, arrays), config_hash
