"""Training objectives: localisation, intra-image alignment, inter-image
region-word contrast with label-propagated targets, and masked language
modelling, combined into one weighted total.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import NamedTuple, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .model import ModelParams, PromptMatrix, dual_encode, fuse, matching_logits, mlm_logits, predict_boxes
from .synthworld import VOCAB, GroundingSample, TargetAffinity, Vocabulary, anchor_centers

FOCAL_ALPHA = 0.25
FOCAL_GAMMA = 2.0


class LossResult(NamedTuple):
    """A scalar loss and how many rows/cells contributed (0 flags an empty term)."""

    value: Tensor
    count: int

    @property
    def empty(self) -> bool:
        return self.count == 0


def _zero() -> Tensor:
    return Tensor(0.0)


@dataclass(frozen=True)
class LossWeights:
    w_loc: float = 1.0
    w_intra: float = 1.0
    w_inter: float = 1.0
    w_mlm: float = 1.0

    def __post_init__(self):
        for k, v in self.as_dict().items():
            if not np.isfinite(v) or v < 0:
                raise ValueError(f"loss weight {k} must be a finite non-negative number, got {v}")

    def as_dict(self) -> dict[str, float]:
        return {"w_loc": self.w_loc, "w_intra": self.w_intra, "w_inter": self.w_inter, "w_mlm": self.w_mlm}

    def replace(self, **kw) -> LossWeights:
        return LossWeights(**{**self.as_dict(), **kw})


# ---------------------------------------------------------------------------
# localisation


def centerness_target(l, t, r, b):
    """FCOS centerness from the distances to the four box sides."""
    l, t, r, b = (np.asarray(v, dtype=np.float64) for v in (l, t, r, b))
    return np.sqrt((np.minimum(l, r) / np.maximum(l, r)) * (np.minimum(t, b) / np.maximum(t, b)))


def giou(pred: Tensor, gt: np.ndarray) -> Tensor:
    """Generalised IoU between matching rows of (n, 4) boxes."""
    gt = np.asarray(gt, dtype=np.float64).reshape(-1, 4)
    px1, py1, px2, py2 = (pred[:, i] for i in range(4))
    gx1, gy1, gx2, gy2 = (gt[:, i] for i in range(4))
    iw = ad.maximum(ad.sub(ad.minimum(px2, gx2), ad.maximum(px1, gx1)), 0.0)
    ih = ad.maximum(ad.sub(ad.minimum(py2, gy2), ad.maximum(py1, gy1)), 0.0)
    inter = ad.mul(iw, ih)
    area_p = ad.mul(ad.sub(px2, px1), ad.sub(py2, py1))
    area_g = (gx2 - gx1) * (gy2 - gy1)
    union = ad.sub(ad.add(area_p, area_g), inter)
    cw = ad.sub(ad.maximum(px2, gx2), ad.minimum(px1, gx1))
    ch = ad.sub(ad.maximum(py2, gy2), ad.minimum(py1, gy1))
    enclose = ad.mul(cw, ch)
    iou = ad.div(inter, union)
    return ad.sub(iou, ad.div(ad.sub(enclose, union), enclose))


def loc_loss(pred_boxes: Tensor, centerness_logits: Tensor, gt_boxes: np.ndarray,
             positive: np.ndarray, anchors: np.ndarray) -> LossResult:
    """Mean over positive regions of ``1 - GIoU`` plus centerness BCE.

    ``gt_boxes`` is (R, 4) holding each region's matched box (rows of
    negatives are ignored); ``positive`` is the (R,) match mask.
    """
    rows = np.nonzero(np.asarray(positive, dtype=bool))[0]
    if rows.size == 0:
        return LossResult(_zero(), 0)
    gt = np.asarray(gt_boxes, dtype=np.float64)[rows]
    pb = ad.take_rows(pred_boxes, rows)
    reg = ad.sub(1.0, giou(pb, gt))
    cx, cy = anchors[rows, 0], anchors[rows, 1]
    c = centerness_target(cx - gt[:, 0], cy - gt[:, 1], gt[:, 2] - cx, gt[:, 3] - cy)
    z = centerness_logits[rows]
    bce = ad.neg(ad.add(ad.mul(ad.log_sigmoid(z), c), ad.mul(ad.log_sigmoid(ad.neg(z)), 1.0 - c)))
    return LossResult(ad.mean(ad.add(reg, bce)), int(rows.size))


# ---------------------------------------------------------------------------
# intra-image alignment


def focal_loss_terms(S: Tensor, T: np.ndarray, alpha: float = FOCAL_ALPHA,
                     gamma: float = FOCAL_GAMMA) -> Tensor:
    """Elementwise binary focal loss of logits ``S`` against 0/1 targets ``T``."""
    T = np.asarray(T, dtype=np.float64)
    p = ad.sigmoid(S)
    q = ad.sigmoid(ad.neg(S))
    pos = ad.mul(ad.mul(ad.power(q, gamma), ad.log_sigmoid(S)), alpha * T)
    neg = ad.mul(ad.mul(ad.power(p, gamma), ad.log_sigmoid(ad.neg(S))), (1.0 - alpha) * (1.0 - T))
    return ad.neg(ad.add(pos, neg))


def intra_alignment_loss(S: Tensor, T, column_mask: np.ndarray | None = None) -> LossResult:
    """Focal loss averaged over cells whose token column is unmasked.

    ``column_mask`` marks the token columns that belong to some phrase span;
    sentinels and filler words are left out. Defaults to all columns.
    """
    matrix = T.matrix if isinstance(T, TargetAffinity) else np.asarray(T, dtype=np.float64)
    R, n_tok = S.shape
    cols = np.ones(n_tok, dtype=bool) if column_mask is None else np.asarray(column_mask, dtype=bool)
    n = int(cols.sum()) * R
    if n == 0:
        return LossResult(_zero(), 0)
    cell_mask = np.broadcast_to(cols.astype(np.float64), (R, n_tok))
    terms = focal_loss_terms(S, matrix)
    return LossResult(ad.scale(ad.sum(ad.mul(terms, cell_mask)), 1.0 / n), n)


# ---------------------------------------------------------------------------
# inter-image contrast


@dataclass
class BatchTargets:
    per_sample: list[np.ndarray]
    matrix: np.ndarray
    row_offsets: np.ndarray  # len B+1
    col_offsets: np.ndarray  # len B+1
    text_types: list[str]
    column_labels: list[str | None]
    row_labels: list[str | None] = field(default_factory=list)

    def block(self, i: int, j: int) -> np.ndarray:
        r0, r1 = self.row_offsets[i], self.row_offsets[i + 1]
        c0, c1 = self.col_offsets[j], self.col_offsets[j + 1]
        return self.matrix[r0:r1, c0:c1]


def propagate_labels(samples: Sequence[GroundingSample],
                     targets: Sequence[TargetAffinity | np.ndarray] | None = None) -> BatchTargets:
    """Assemble the batch target matrix.

    Diagonal blocks are the per-sample targets. Off-diagonal, region ``r`` of
    sample ``i`` is positive to token ``c`` of sample ``j`` exactly when text
    ``j`` is detection-type and ``c`` lies in a span whose label equals the
    region's ground-truth label. Grounding-type texts never receive
    propagated positives.
    """
    if not samples:
        raise ValueError("empty batch")
    if targets is None:
        targets = [s.targets for s in samples]
    mats = [t.matrix if isinstance(t, TargetAffinity) else np.asarray(t, dtype=np.float64) for t in targets]
    row_sizes = [m.shape[0] for m in mats]
    col_sizes = [s.text.n_tokens for s in samples]
    for m, s in zip(mats, samples):
        if m.shape[1] != s.text.n_tokens:
            raise ValueError(f"target has {m.shape[1]} columns for a {s.text.n_tokens}-token text")
    ro = np.concatenate([[0], np.cumsum(row_sizes)]).astype(np.int64)
    co = np.concatenate([[0], np.cumsum(col_sizes)]).astype(np.int64)
    big = np.zeros((ro[-1], co[-1]))
    row_labels: list[str | None] = []
    col_labels: list[str | None] = []
    types = [s.text.text_type for s in samples]
    for s in samples:
        col_labels.extend(s.text.column_labels())
    for i, s in enumerate(samples):
        labels_i = _region_labels(s, targets[i])
        row_labels.extend(labels_i)
    row_labels_arr = np.array(row_labels, dtype=object)
    col_labels_arr = np.array(col_labels, dtype=object)
    for j, s in enumerate(samples):
        if types[j] != "detection":
            continue
        cl = col_labels_arr[co[j]:co[j + 1]]
        for lab in {c for c in cl if c is not None}:
            rows = np.nonzero(row_labels_arr == lab)[0]
            cols = co[j] + np.nonzero(cl == lab)[0]
            if rows.size:
                big[np.ix_(rows, cols)] = 1.0
    # diagonal blocks are copied verbatim, overriding anything propagated there
    for i, m in enumerate(mats):
        big[ro[i]:ro[i + 1], co[i]:co[i + 1]] = m
    return BatchTargets(mats, big, ro, co, types, col_labels, row_labels)


def _region_labels(sample: GroundingSample, target) -> list[str | None]:
    if isinstance(target, TargetAffinity):
        objs = sample.scene.objects
        return [objs[j].label if j >= 0 else None for j in target.assignment]
    return sample.region_labels()


def _soft_ce_weights(T: np.ndarray, axis: int) -> tuple[np.ndarray, int]:
    """Per-row (axis=1) or per-column (axis=0) uniform targets over positives,
    pre-divided by the number of contributing rows/columns."""
    tot = T.sum(axis=axis, keepdims=True)
    has = (tot > 0)
    n = int(has.sum())
    if n == 0:
        return np.zeros_like(T), 0
    W = np.where(has, T / np.where(has, tot, 1.0), 0.0) / n
    return W, n


def inter_contrastive_loss(O0_list: Sequence[Tensor], P0_list: Sequence[Tensor],
                           targets: BatchTargets, tau: float) -> LossResult:
    """Bidirectional contrastive loss over every region/token pair in a batch.

    Rows (regions) with at least one positive contribute a soft cross-entropy
    over all batch columns; columns (tokens) with a positive do the same over
    all batch rows. The result is the mean over positive rows plus the mean
    over positive columns.
    """
    O = ad.concat(list(O0_list), axis=0)
    P = ad.concat(list(P0_list), axis=0)
    S = ad.scale(ad.matmul(O, ad.transpose(P)), 1.0 / tau)
    T = targets.matrix
    if S.shape != T.shape:
        raise ad.DimensionError(f"similarity {S.shape} vs targets {T.shape}")
    W_row, n_row = _soft_ce_weights(T, axis=1)
    W_col, n_col = _soft_ce_weights(T, axis=0)
    if n_row == 0:
        return LossResult(_zero(), 0)
    row_term = ad.neg(ad.sum(ad.mul(ad.log_softmax(S, axis=1), W_row)))
    col_term = ad.neg(ad.sum(ad.mul(ad.log_softmax(S, axis=0), W_col)))
    return LossResult(ad.add(row_term, col_term), n_row + n_col)


# ---------------------------------------------------------------------------
# masked language modelling


def mlm_mask(token_ids: Sequence[int], rng: np.random.Generator, mask_rate: float = 0.15,
             vocab: Vocabulary = VOCAB) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """BERT-style corruption.

    Returns ``(corrupted_ids, positions, labels)``. Each non-sentinel token is
    selected with probability ``mask_rate``; selected tokens become [MASK]
    80% of the time, a random regular word 10%, and stay unchanged 10%.
    """
    if not 0 <= mask_rate < 1:
        raise ValueError("mask_rate must lie in [0, 1)")
    ids = np.asarray(token_ids, dtype=np.int64)
    maskable = ~np.isin(ids, list(vocab.special_ids))
    chosen = maskable & (rng.random(ids.shape) < mask_rate)
    positions = np.nonzero(chosen)[0]
    labels = ids[positions].copy()
    out = ids.copy()
    action = rng.random(positions.size)
    randoms = rng.choice(vocab.regular_ids, size=positions.size)
    out[positions[action < 0.8]] = vocab.mask
    swap = (action >= 0.8) & (action < 0.9)
    out[positions[swap]] = randoms[swap]
    return out, positions, labels


def mlm_loss(P: Tensor, positions: np.ndarray, labels: np.ndarray, params: ModelParams) -> LossResult:
    """Mean cross-entropy of the two-layer MLM head at the masked positions."""
    positions = np.asarray(positions, dtype=np.intp)
    if positions.size == 0:
        return LossResult(_zero(), 0)
    logits = mlm_logits(ad.take_rows(P, positions), params)
    return LossResult(mlm_from_logits(logits, labels), int(positions.size))


def mlm_from_logits(logits: Tensor, labels) -> Tensor:
    labels = np.asarray(labels, dtype=np.intp)
    if not np.all(np.isfinite(logits.data)):
        raise ad.NumericError("non-finite MLM logits")
    lp = ad.log_softmax(logits, axis=1)
    return ad.neg(ad.mean(lp[np.arange(labels.size), labels]))


# ---------------------------------------------------------------------------
# batches and the total objective


@dataclass
class Batch:
    samples: list[GroundingSample]
    targets: BatchTargets
    mlm: list[tuple[np.ndarray, np.ndarray, np.ndarray]] | None = None  # per sample (ids, pos, labels)

    def __len__(self) -> int:
        return len(self.samples)


def make_batch(samples: Sequence[GroundingSample], rng: np.random.Generator | None = None,
               mask_rate: float = 0.15) -> Batch:
    samples = list(samples)
    if not samples:
        raise ValueError("empty batch")
    mlm = None
    if rng is not None:
        mlm = [mlm_mask(s.text.token_ids, rng, mask_rate) for s in samples]
    return Batch(samples, propagate_labels(samples), mlm)


def sample_gt_boxes(sample: GroundingSample, assignment: np.ndarray) -> np.ndarray:
    gt = np.zeros((len(assignment), 4))
    objs = sample.scene.objects
    for r, j in enumerate(assignment):
        if j >= 0:
            gt[r] = objs[j].box
    return gt


@dataclass
class LossBreakdown:
    total: Tensor
    terms: dict[str, Tensor]
    counts: dict[str, int]

    def values(self) -> dict[str, float | None]:
        out: dict[str, float | None] = {"total": float(self.total.data)}
        for k in ("loc", "intra", "inter", "mlm"):
            out[k] = float(self.terms[k].data) if k in self.terms else None
        return out


def total_loss(batch: Batch, params: ModelParams, weights: LossWeights = LossWeights(),
               prompt: Tensor | PromptMatrix | None = None) -> LossBreakdown:
    """Weighted sum of the four terms on one batch.

    Localisation and intra-image alignment read post-fusion features; the
    inter-image contrast reads the pre-fusion features. The MLM term runs a
    second forward pass on the corrupted text. Terms whose weight is zero are
    not evaluated. ``prompt`` replaces the text of every sample with one tuned
    prompt (pre-fusion features or a :class:`PromptMatrix`).
    """
    if not batch.samples:
        raise ValueError("empty batch")
    cfg = params.config
    tau = cfg.temperature
    anchors = anchor_centers(cfg.grid)
    need_ground = weights.w_loc > 0 or weights.w_intra > 0
    prompt_features = prompt.features(params) if isinstance(prompt, PromptMatrix) else prompt
    O0s, P0s = [], []
    loc_terms, intra_terms = [], []
    n_loc = n_intra = 0
    for s in batch.samples:
        O0, P0 = dual_encode(s, params, text_features=prompt_features)
        O0s.append(O0)
        P0s.append(P0)
        if not need_ground:
            continue
        O, P = fuse(O0, P0, params)
        tgt = s.targets
        if weights.w_intra > 0:
            r = intra_alignment_loss(matching_logits(O, P, tau), tgt, s.text.span_mask())
            if not r.empty:
                intra_terms.append(r.value)
                n_intra += r.count
        if weights.w_loc > 0:
            boxes, _, ctr = predict_boxes(O, anchors, params)
            r = loc_loss(boxes, ctr, sample_gt_boxes(s, tgt.assignment), tgt.positive_rows, anchors)
            if not r.empty:
                loc_terms.append(r.value)
                n_loc += r.count
    terms: dict[str, Tensor] = {}
    counts: dict[str, int] = {}
    if weights.w_loc > 0:
        terms["loc"] = _mean_of(loc_terms)
        counts["loc"] = n_loc
    if weights.w_intra > 0:
        terms["intra"] = _mean_of(intra_terms)
        counts["intra"] = n_intra
    if weights.w_inter > 0:
        r = inter_contrastive_loss(O0s, P0s, batch.targets, tau)
        terms["inter"], counts["inter"] = r.value, r.count
    if weights.w_mlm > 0:
        if batch.mlm is None:
            raise ValueError("batch carries no MLM masks; build it with make_batch(..., rng=...)")
        mlm_terms = []
        n_mlm = 0
        for s, (ids, pos, labels) in zip(batch.samples, batch.mlm):
            if pos.size == 0:
                continue
            O0, P0 = dual_encode(s, params, token_ids=ids)
            _, P = fuse(O0, P0, params)
            r = mlm_loss(P, pos, labels, params)
            mlm_terms.append(ad.scale(r.value, r.count))
            n_mlm += r.count
        terms["mlm"] = _zero() if n_mlm == 0 else ad.scale(_sum_of(mlm_terms), 1.0 / n_mlm)
        counts["mlm"] = n_mlm
    w = {"loc": weights.w_loc, "intra": weights.w_intra, "inter": weights.w_inter, "mlm": weights.w_mlm}
    parts = [ad.scale(v, w[k]) for k, v in terms.items()]
    total = _sum_of(parts) if parts else _zero()
    return LossBreakdown(total, terms, counts)


def _sum_of(ts: Sequence[Tensor]) -> Tensor:
    out = ts[0]
    for t in ts[1:]:
        out = ad.add(out, t)
    return out


def _mean_of(ts: Sequence[Tensor]) -> Tensor:
    if not ts:
        return _zero()
    return ad.scale(_sum_of(ts), 1.0 / len(ts))
