"""Procedural grounding data: scenes, rendered image tokens, prompts, targets.

A scene is a small grid holding a few coloured shapes. Each cell becomes one
image token whose feature row stacks one-hot blocks (background/occupied,
colour, shape, geometry of the covering box) plus optional Gaussian noise.
Texts come in two flavours:

* detection-type: ``"red circle . blue square ."`` -- every present label
  plus a few absent distractor labels, shuffled;
* grounding-type: a relational sentence such as ``"a red circle beside a
  blue square"`` that mentions a subset of the objects.

All generation is a pure function of ``(seed, config)``.
"""

from __future__ import annotations

import hashlib
import itertools
import json
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

MAX_TOKENS = 256

COLORS = ("red", "green", "blue", "yellow", "purple", "orange")
SHAPES = ("circle", "square", "triangle", "star", "cross", "diamond")
SPECIALS = ("[PAD]", "[CLS]", "[SEP]", "[MASK]")
FILLERS = (
    ".", "a", "the", "and", "is", "of", "to", "on", "in", "with", "there",
    "beside", "above", "below", "near", "under", "behind", "next", "left",
    "right", "top", "front", "picture", "shows",
)

# slots are written as {0}, {1}; each slot expands to "<color> <shape>"
TEMPLATES_ONE = (
    "a {0}",
    "there is a {0}",
    "the picture shows a {0}",
    "the {0}",
)
TEMPLATES_TWO = (
    "a {0} beside a {1}",
    "a {0} above the {1}",
    "the {0} is below a {1}",
    "a {0} near the {1}",
    "the {0} is left of the {1}",
    "a {0} to the right of a {1}",
    "a {0} and a {1}",
    "the picture shows a {0} next to a {1}",
    "a {0} on top of the {1}",
    "a {0} in front of a {1}",
    "a {0} with the {1}",
    "the {0} is behind the {1}",
)


class VocabularyError(KeyError):
    pass


class GenerationError(RuntimeError):
    pass


class ConsistencyError(ValueError):
    pass


class Vocabulary:
    """Closed word list with a fixed word <-> id bijection."""

    def __init__(self, words: Sequence[str] | None = None):
        if words is None:
            words = (*SPECIALS, *FILLERS, *COLORS, *SHAPES)
        if len(set(words)) != len(words):
            raise ValueError("duplicate vocabulary words")
        self.words = tuple(words)
        self._ids = {w: i for i, w in enumerate(self.words)}
        self.pad, self.cls, self.sep, self.mask = (self._ids[s] for s in SPECIALS)

    def __len__(self) -> int:
        return len(self.words)

    def __contains__(self, word: str) -> bool:
        return word in self._ids

    def id(self, word: str) -> int:
        try:
            return self._ids[word]
        except KeyError:
            raise VocabularyError(f"unknown word {word!r}") from None

    @property
    def special_ids(self) -> frozenset[int]:
        return frozenset((self.pad, self.cls, self.sep, self.mask))

    @property
    def regular_ids(self) -> np.ndarray:
        return np.array([i for i in range(len(self)) if i not in self.special_ids])


VOCAB = Vocabulary()


def tokenize(words: Iterable[str], vocab: Vocabulary = VOCAB) -> list[int]:
    """``[CLS] w1 ... wn [SEP]`` as ids; unknown words raise."""
    return [vocab.cls, *(vocab.id(w) for w in words), vocab.sep]


def detokenize(ids: Iterable[int], vocab: Vocabulary = VOCAB) -> list[str]:
    return [vocab.words[i] for i in ids if i not in (vocab.cls, vocab.sep, vocab.pad)]


def label_of(color: str, shape: str) -> str:
    return f"{color} {shape}"


# ---------------------------------------------------------------------------
# configuration and scenes


@dataclass(frozen=True)
class WorldConfig:
    grid: tuple[int, int] = (6, 6)  # (H, W)
    count_range: tuple[int, int] = (1, 3)
    size_range: tuple[int, int] = (1, 3)
    colors: tuple[str, ...] = COLORS
    shapes: tuple[str, ...] = SHAPES
    heldout: tuple[tuple[str, str], ...] = (
        ("red", "triangle"),
        ("blue", "star"),
        ("green", "diamond"),
        ("yellow", "cross"),
    )
    distractor_range: tuple[int, int] = (0, 4)
    noise_sigma: float = 0.1
    max_overlap_iou: float = 0.3
    max_retries: int = 100

    def __post_init__(self):
        if not self.colors or not self.shapes:
            raise ValueError("attribute pools must be non-empty")
        combos = set(itertools.product(self.colors, self.shapes))
        for c in self.heldout:
            if tuple(c) not in combos:
                raise ValueError(f"heldout combo {c} not in colour x shape product")
        lo, hi = self.count_range
        if not 0 <= lo <= hi:
            raise ValueError(f"bad count_range {self.count_range}")
        slo, shi = self.size_range
        if not 1 <= slo <= shi or shi > min(self.grid):
            raise ValueError(f"bad size_range {self.size_range}")
        dlo, dhi = self.distractor_range
        if not 0 <= dlo <= dhi:
            raise ValueError(f"bad distractor_range {self.distractor_range}")
        if self.noise_sigma < 0:
            raise ValueError("noise_sigma must be >= 0")
        for w in (*self.colors, *self.shapes):
            if w not in VOCAB:
                raise VocabularyError(f"unknown word {w!r}")

    @property
    def all_combos(self) -> list[tuple[str, str]]:
        return list(itertools.product(self.colors, self.shapes))

    @property
    def train_combos(self) -> list[tuple[str, str]]:
        held = {tuple(c) for c in self.heldout}
        return [c for c in self.all_combos if c not in held]

    @property
    def heldout_labels(self) -> list[str]:
        return [label_of(*c) for c in self.heldout]

    @property
    def feature_dim(self) -> int:
        smax = self.size_range[1]
        return 2 + len(self.colors) + len(self.shapes) + 2 * (2 * smax - 1) + 2 * smax

    def digest(self) -> str:
        blob = json.dumps(asdict(self), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()[:16]

    @classmethod
    def from_dict(cls, d: dict) -> WorldConfig:
        d = dict(d)
        for key in ("grid", "count_range", "size_range", "colors", "shapes", "distractor_range"):
            if key in d:
                d[key] = tuple(d[key])
        if "heldout" in d:
            d["heldout"] = tuple(tuple(c) for c in d["heldout"])
        return cls(**d)


@dataclass(frozen=True)
class SceneObject:
    color: str
    shape: str
    box: tuple[float, float, float, float]  # x1, y1, x2, y2 in cell units

    @property
    def label(self) -> str:
        return label_of(self.color, self.shape)

    @property
    def area(self) -> float:
        x1, y1, x2, y2 = self.box
        return (x2 - x1) * (y2 - y1)


@dataclass(frozen=True)
class Scene:
    grid: tuple[int, int]
    objects: tuple[SceneObject, ...]
    seed: int

    def to_bytes(self) -> bytes:
        return json.dumps(asdict(self), sort_keys=True).encode()


def box_iou(a, b) -> float:
    ix = max(0.0, min(a[2], b[2]) - max(a[0], b[0]))
    iy = max(0.0, min(a[3], b[3]) - max(a[1], b[1]))
    inter = ix * iy
    area_a = (a[2] - a[0]) * (a[3] - a[1])
    area_b = (b[2] - b[0]) * (b[3] - b[1])
    union = area_a + area_b - inter
    return inter / union if union > 0 else 0.0


def sample_scene(seed: int, config: WorldConfig, split: str = "train") -> Scene:
    """Draw a scene.

    ``split`` selects the attribute pool: ``"train"`` never uses a heldout
    combination, ``"any"`` uses the full product and ``"heldout"`` forces the
    first object to be a heldout combination (others from the full product).
    """
    rng = np.random.default_rng([int(seed), 0x5CE4E])
    H, W = config.grid
    if split == "train":
        pool = config.train_combos
    elif split in ("any", "heldout"):
        pool = config.all_combos
    else:
        raise ValueError(f"unknown split {split!r}")
    if split == "heldout" and not config.heldout:
        raise ValueError("heldout split requested but no heldout combos configured")
    lo, hi = config.count_range
    if split == "heldout":
        lo = max(lo, 1)
        hi = max(hi, 1)
    n = int(rng.integers(lo, hi + 1))
    slo, shi = config.size_range
    objects: list[SceneObject] = []
    for k in range(n):
        if split == "heldout" and k == 0:
            color, shape = config.heldout[int(rng.integers(len(config.heldout)))]
        else:
            color, shape = pool[int(rng.integers(len(pool)))]
        placed = False
        for _ in range(config.max_retries):
            w = int(rng.integers(slo, shi + 1))
            h = int(rng.integers(slo, shi + 1))
            x1 = int(rng.integers(0, W - w + 1))
            y1 = int(rng.integers(0, H - h + 1))
            box = (float(x1), float(y1), float(x1 + w), float(y1 + h))
            if all(box_iou(box, o.box) < config.max_overlap_iou for o in objects):
                objects.append(SceneObject(color, shape, box))
                placed = True
                break
        if not placed:
            if len(objects) >= lo:
                break
            raise GenerationError(
                f"could not place {lo} objects on a {H}x{W} grid within {config.max_retries} retries"
            )
    return Scene(grid=(H, W), objects=tuple(objects), seed=int(seed))


# ---------------------------------------------------------------------------
# rendering


def anchor_centers(grid: tuple[int, int]) -> np.ndarray:
    """(H*W, 2) cell centres in row-major order as (cx, cy)."""
    H, W = grid
    ys, xs = np.meshgrid(np.arange(H), np.arange(W), indexing="ij")
    return np.stack([xs.ravel() + 0.5, ys.ravel() + 0.5], axis=1).astype(np.float64)


def owner_of_cells(objects: Sequence[SceneObject], grid: tuple[int, int]) -> np.ndarray:
    """Index of the object covering each cell centre, -1 for background.

    When boxes overlap the smallest one wins (ties: lowest index).
    """
    centers = anchor_centers(grid)
    owner = np.full(len(centers), -1, dtype=np.int64)
    best = np.full(len(centers), np.inf)
    for j, obj in enumerate(objects):
        x1, y1, x2, y2 = obj.box
        inside = (centers[:, 0] > x1) & (centers[:, 0] < x2) & (centers[:, 1] > y1) & (centers[:, 1] < y2)
        take = inside & (obj.area < best)
        owner[take] = j
        best[take] = obj.area
    return owner


def render_scene(scene: Scene, config: WorldConfig, noise_sigma: float | None = None,
                 seed: int | None = None) -> np.ndarray:
    """Image tokens, one feature row per cell (row-major)."""
    sigma = config.noise_sigma if noise_sigma is None else noise_sigma
    if sigma < 0:
        raise ValueError("noise_sigma must be >= 0")
    smax = config.size_range[1]
    nc, ns = len(config.colors), len(config.shapes)
    off_c = 2
    off_s = off_c + nc
    off_dx = off_s + ns
    nbin = 2 * smax - 1
    off_dy = off_dx + nbin
    off_w = off_dy + nbin
    off_h = off_w + smax
    centers = anchor_centers(scene.grid)
    owner = owner_of_cells(scene.objects, scene.grid)
    feats = np.zeros((len(centers), config.feature_dim))
    for i, j in enumerate(owner):
        if j < 0:
            feats[i, 0] = 1.0
            continue
        obj = scene.objects[j]
        x1, y1, x2, y2 = obj.box
        feats[i, 1] = 1.0
        feats[i, off_c + config.colors.index(obj.color)] = 1.0
        feats[i, off_s + config.shapes.index(obj.shape)] = 1.0
        # signed half-cell offsets from the box centre
        dx = int(round(2 * (centers[i, 0] - (x1 + x2) / 2)))
        dy = int(round(2 * (centers[i, 1] - (y1 + y2) / 2)))
        feats[i, off_dx + np.clip(dx + smax - 1, 0, nbin - 1)] = 1.0
        feats[i, off_dy + np.clip(dy + smax - 1, 0, nbin - 1)] = 1.0
        feats[i, off_w + int(np.clip(round(x2 - x1) - 1, 0, smax - 1))] = 1.0
        feats[i, off_h + int(np.clip(round(y2 - y1) - 1, 0, smax - 1))] = 1.0
    if sigma > 0:
        rng = np.random.default_rng([int(scene.seed if seed is None else seed), 0x4E015E])
        feats = feats + sigma * rng.standard_normal(feats.shape)
    return feats


# ---------------------------------------------------------------------------
# texts


@dataclass(frozen=True)
class TextSpec:
    text_type: str  # "detection" | "grounding"
    token_ids: tuple[int, ...]
    spans: tuple[tuple[int, int], ...]  # [start, end) token ranges
    span_labels: tuple[str, ...]
    span_objects: tuple[tuple[int, ...], ...]  # objects each span refers to; () for distractors

    def __post_init__(self):
        if self.text_type not in ("detection", "grounding"):
            raise ValueError(f"unknown text_type {self.text_type!r}")
        if len(self.token_ids) > MAX_TOKENS:
            raise ValueError(f"text has {len(self.token_ids)} tokens (max {MAX_TOKENS})")
        if not (len(self.spans) == len(self.span_labels) == len(self.span_objects)):
            raise ValueError("spans, span_labels and span_objects must align")
        prev_end = 0
        for s, e in sorted(self.spans):
            if not (0 <= s < e <= len(self.token_ids)) or s < prev_end:
                raise ValueError(f"bad span layout {self.spans}")
            prev_end = e

    @property
    def n_tokens(self) -> int:
        return len(self.token_ids)

    @property
    def words(self) -> list[str]:
        """One word per token position, sentinels included."""
        return [VOCAB.words[i] for i in self.token_ids]

    def span_to_object(self, k: int) -> int | None:
        objs = self.span_objects[k]
        return objs[0] if objs else None

    def column_labels(self) -> list[str | None]:
        """Label string owning each token column, ``None`` outside spans."""
        out: list[str | None] = [None] * self.n_tokens
        for (s, e), lab in zip(self.spans, self.span_labels):
            for t in range(s, e):
                out[t] = lab
        return out

    def span_mask(self) -> np.ndarray:
        m = np.zeros(self.n_tokens, dtype=bool)
        for s, e in self.spans:
            m[s:e] = True
        return m

    def with_objects(self, span_objects) -> TextSpec:
        return replace(self, span_objects=tuple(tuple(o) for o in span_objects))


def prompt_for_labels(labels: Sequence[str], objects: Sequence[SceneObject] = ()) -> TextSpec:
    """Detection-type prompt listing ``labels`` in order.

    Each span refers to every object in ``objects`` carrying that label.
    """
    words: list[str] = []
    spans = []
    for lab in labels:
        parts = lab.split()
        if not parts:
            raise ValueError("empty label")
        start = len(words) + 1  # [CLS] occupies position 0
        words.extend(parts)
        spans.append((start, start + len(parts)))
        words.append(".")
    ids = tokenize(words)
    span_objects = [tuple(j for j, o in enumerate(objects) if o.label == lab) for lab in labels]
    return TextSpec("detection", tuple(ids), tuple(spans), tuple(labels), tuple(span_objects))


def synthesize_text(scene: Scene, mode: str, seed: int, config: WorldConfig | None = None,
                    n_distractors: int | None = None, split: str = "train") -> TextSpec:
    config = config or WorldConfig()
    rng = np.random.default_rng([int(seed), 0x7E47])
    if mode == "detection":
        present = list(dict.fromkeys(o.label for o in scene.objects))
        if n_distractors is None:
            lo, hi = config.distractor_range
            n_distractors = int(rng.integers(lo, hi + 1))
        pool = config.train_combos if split == "train" else config.all_combos
        absent = [label_of(*c) for c in pool if label_of(*c) not in present]
        n_distractors = min(n_distractors, len(absent))
        picks = rng.choice(len(absent), size=n_distractors, replace=False) if n_distractors else []
        labels = present + [absent[int(i)] for i in picks]
        order = rng.permutation(len(labels))
        return prompt_for_labels([labels[int(i)] for i in order], scene.objects)
    if mode == "grounding":
        if not scene.objects:
            raise ValueError("grounding text needs at least one object")
        m = int(rng.integers(1, min(2, len(scene.objects)) + 1))
        chosen = [int(i) for i in rng.choice(len(scene.objects), size=m, replace=False)]
        table = TEMPLATES_ONE if m == 1 else TEMPLATES_TWO
        template = table[int(rng.integers(len(table)))]
        return _fill_template(template, [scene.objects[j] for j in chosen], chosen)
    raise ValueError(f"unknown mode {mode!r}")


def _fill_template(template: str, objs: Sequence[SceneObject], indices: Sequence[int]) -> TextSpec:
    words: list[str] = []
    spans: list[tuple[int, int]] = []
    slot_for_span: list[int] = []
    for piece in template.split():
        if piece.startswith("{") and piece.endswith("}"):
            slot = int(piece[1:-1])
            start = len(words) + 1
            words.extend([objs[slot].color, objs[slot].shape])
            spans.append((start, start + 2))
            slot_for_span.append(slot)
        else:
            words.append(piece)
    return TextSpec(
        "grounding",
        tuple(tokenize(words)),
        tuple(spans),
        tuple(objs[s].label for s in slot_for_span),
        tuple((indices[s],) for s in slot_for_span),
    )


# ---------------------------------------------------------------------------
# targets


@dataclass(frozen=True)
class TargetAffinity:
    matrix: np.ndarray  # (regions, tokens) of 0/1
    assignment: np.ndarray  # (regions,) object index or -1

    @property
    def positive_rows(self) -> np.ndarray:
        return self.assignment >= 0


def build_target_matrix(scene: Scene, text: TextSpec, anchors: np.ndarray | None = None,
                        iou_match_thr: float = 0.5) -> TargetAffinity:
    """Region x token targets under centre-inside assignment.

    An anchor whose centre lies inside a referenced box is matched to it
    (smallest box wins on overlap) and gets ones on that object's span
    tokens. ``iou_match_thr`` is validated but plays no role in the
    centre-inside rule.
    """
    if not 0 < iou_match_thr <= 1:
        raise ValueError("iou_match_thr must lie in (0, 1]")
    if anchors is None:
        anchors = anchor_centers(scene.grid)
    n_obj = len(scene.objects)
    spans_of: dict[int, list[int]] = {}
    for k, objs in enumerate(text.span_objects):
        for j in objs:
            if not 0 <= j < n_obj:
                raise ConsistencyError(f"span {k} references missing object {j}")
            spans_of.setdefault(j, []).append(k)
    referenced = sorted(spans_of)
    R, T = len(anchors), text.n_tokens
    matrix = np.zeros((R, T))
    assignment = np.full(R, -1, dtype=np.int64)
    best = np.full(R, np.inf)
    for j in referenced:
        x1, y1, x2, y2 = scene.objects[j].box
        area = scene.objects[j].area
        inside = (anchors[:, 0] > x1) & (anchors[:, 0] < x2) & (anchors[:, 1] > y1) & (anchors[:, 1] < y2)
        take = inside & (area < best)
        assignment[take] = j
        best[take] = area
    for r in np.nonzero(assignment >= 0)[0]:
        for k in spans_of[int(assignment[r])]:
            s, e = text.spans[k]
            matrix[r, s:e] = 1.0
    return TargetAffinity(matrix, assignment)


@dataclass(frozen=True)
class GroundingSample:
    image_tokens: np.ndarray
    text: TextSpec
    boxes: np.ndarray  # (K, 4) referenced ground-truth boxes
    box_spans: tuple[int, ...]  # span index per box
    box_labels: tuple[str, ...]
    targets: TargetAffinity | None
    scene: Scene
    split: str = "train"
    provenance: str = "gold"

    @property
    def grid(self) -> tuple[int, int]:
        return self.scene.grid

    def region_labels(self) -> list[str | None]:
        """Ground-truth label per region (``None`` for unmatched anchors)."""
        if self.targets is None:
            return [None] * len(self.image_tokens)
        return [self.scene.objects[j].label if j >= 0 else None for j in self.targets.assignment]

    def with_text(self, text: TextSpec) -> GroundingSample:
        return assemble_sample(self.scene, text, self.image_tokens, split=self.split,
                               provenance=self.provenance)


def assemble_sample(scene: Scene, text: TextSpec, image_tokens: np.ndarray, split: str = "train",
                    provenance: str = "gold", with_targets: bool = True) -> GroundingSample:
    boxes, box_spans, box_labels = [], [], []
    for k, objs in enumerate(text.span_objects):
        for j in objs:
            if not 0 <= j < len(scene.objects):
                raise ConsistencyError(f"span {k} references missing object {j}")
            boxes.append(scene.objects[j].box)
            box_spans.append(k)
            box_labels.append(scene.objects[j].label)
    targets = build_target_matrix(scene, text) if with_targets else None
    return GroundingSample(
        image_tokens=image_tokens,
        text=text,
        boxes=np.array(boxes, dtype=np.float64).reshape(-1, 4),
        box_spans=tuple(box_spans),
        box_labels=tuple(box_labels),
        targets=targets,
        scene=scene,
        split=split,
        provenance=provenance,
    )


def make_sample(seed: int, config: WorldConfig, mode: str = "detection", split: str = "train",
                with_targets: bool = True) -> GroundingSample:
    """Scene -> rendering -> text -> targets, all keyed on ``seed``."""
    scene = sample_scene(seed, config, split="train" if split == "train" else split)
    if mode == "grounding" and not scene.objects:
        # grounding needs a referent; fall back to a detection prompt
        mode = "detection"
    text = synthesize_text(scene, mode, seed, config, split="train" if split == "train" else "any")
    return assemble_sample(scene, text, render_scene(scene, config), split=split,
                           with_targets=with_targets)


# ---------------------------------------------------------------------------
# manifests


@dataclass(frozen=True)
class ManifestEntry:
    seed: int
    config_hash: str
    split: str
    mode: str = "detection"


def write_manifest(path: str | Path, entries: Iterable[ManifestEntry]) -> None:
    """One JSON object per line: ``{"seed", "config_hash", "split", "mode"}``."""
    with open(path, "w", encoding="utf-8") as fh:
        for e in entries:
            fh.write(json.dumps(asdict(e), sort_keys=True) + "\n")


def read_manifest(path: str | Path) -> list[ManifestEntry]:
    out = []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            if line.strip():
                out.append(ManifestEntry(**json.loads(line)))
    return out


def regenerate(entries: Iterable[ManifestEntry], config: WorldConfig) -> list[GroundingSample]:
    digest = config.digest()
    samples = []
    for e in entries:
        if e.config_hash != digest:
            raise ConsistencyError(f"manifest entry built for config {e.config_hash}, have {digest}")
        samples.append(make_sample(e.seed, config, e.mode, e.split))
    return samples


@dataclass
class DatasetSpec:
    """Convenience bundle: a manifest plus the world it was drawn from."""

    config: WorldConfig
    entries: list[ManifestEntry] = field(default_factory=list)

    def samples(self) -> list[GroundingSample]:
        return regenerate(self.entries, self.config)
