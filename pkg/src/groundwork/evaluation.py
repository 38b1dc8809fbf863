"""Detection and grounding metrics, chunked zero-shot inference, and the
few-shot evaluation matrix.

AP follows the COCO recipe: detections sorted by score, greedy matching to
the best still-unmatched ground truth of the same category, 101-point
interpolated precision.
"""

from __future__ import annotations

import csv
import io
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np

from .model import Detection, ModelParams, detect, nms
from .synthworld import MAX_TOKENS, GroundingSample, TextSpec, prompt_for_labels

IOU_THRESHOLDS = tuple(np.round(np.arange(0.5, 0.951, 0.05), 2))
RECALL_POINTS = np.linspace(0.0, 1.0, 101)


def compute_iou(a, b) -> float:
    """IoU of two (x1, y1, x2, y2) boxes; zero-area boxes give 0."""
    ax1, ay1, ax2, ay2 = (float(v) for v in a)
    bx1, by1, bx2, by2 = (float(v) for v in b)
    area_a = max(0.0, ax2 - ax1) * max(0.0, ay2 - ay1)
    area_b = max(0.0, bx2 - bx1) * max(0.0, by2 - by1)
    if area_a <= 0 or area_b <= 0:
        return 0.0
    iw = max(0.0, min(ax2, bx2) - max(ax1, bx1))
    ih = max(0.0, min(ay2, by2) - max(ay1, by1))
    inter = iw * ih
    return inter / (area_a + area_b - inter)


def _match(dets, gts, iou_thr: float) -> tuple[np.ndarray, int]:
    """True-positive flags for score-sorted ``dets`` and the GT count."""
    by_image: dict = {}
    for img, box in gts:
        by_image.setdefault(img, []).append(box)
    used = {img: np.zeros(len(b), dtype=bool) for img, b in by_image.items()}
    order = sorted(range(len(dets)), key=lambda i: -dets[i][1])
    tp = np.zeros(len(dets), dtype=bool)
    for rank, i in enumerate(order):
        img, _, box = dets[i]
        cands = by_image.get(img, [])
        best, best_iou = -1, iou_thr
        for g, gbox in enumerate(cands):
            if used[img][g]:
                continue
            iou = compute_iou(box, gbox)
            if iou >= best_iou:
                best, best_iou = g, iou
        if best >= 0:
            used[img][best] = True
            tp[rank] = True
    return tp, len(gts)


def average_precision(detections: Sequence[tuple], ground_truths: Sequence[tuple],
                      iou_thr: float = 0.5) -> float:
    """AP for one category.

    ``detections`` are ``(image_id, score, box)``; ``ground_truths`` are
    ``(image_id, box)``. With no ground truth the AP is 1.0 if there are no
    detections either, else 0.0.
    """
    if not ground_truths:
        return 1.0 if not detections else 0.0
    if not detections:
        return 0.0
    tp, n_gt = _match(list(detections), list(ground_truths), iou_thr)
    ctp = np.cumsum(tp)
    cfp = np.cumsum(~tp)
    recall = ctp / n_gt
    precision = ctp / (ctp + cfp)
    # monotone envelope from the right
    precision = np.maximum.accumulate(precision[::-1])[::-1]
    idx = np.searchsorted(recall, RECALL_POINTS, side="left")
    sampled = np.where(idx < len(precision), precision[np.minimum(idx, len(precision) - 1)], 0.0)
    return float(sampled.mean())


def grounding_recall_at_1(predictions: Sequence, gt_boxes: Sequence[Sequence], iou_thr: float = 0.5) -> float:
    """Any-box Recall@1: a phrase is a hit when its top box overlaps any of
    its ground-truth boxes at ``iou_thr``. Phrases without ground truth are
    skipped; a missing prediction (``None``) is a miss."""
    hits = total = 0
    for pred, gts in zip(predictions, gt_boxes):
        if len(gts) == 0:
            continue
        total += 1
        if pred is not None and any(compute_iou(pred, g) >= iou_thr for g in gts):
            hits += 1
    return hits / total if total else 0.0


@dataclass
class EvalReport:
    ap50: float
    map: float
    per_category: dict[str, dict[str, float]]
    recall_at_1: float | None
    n_samples: int
    config_hash: str = ""
    meta: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> EvalReport:
        return cls(**d)


def evaluate_detections(dets: Sequence[tuple], gts: Sequence[tuple], categories: Sequence[str],
                        n_samples: int = 0, config_hash: str = "",
                        recall_at_1: float | None = None) -> EvalReport:
    """Aggregate per-category AP.

    ``dets`` are ``(image_id, category, score, box)``; ``gts`` are
    ``(image_id, category, box)``.
    """
    per: dict[str, dict[str, float]] = {}
    for cat in categories:
        d = [(i, s, b) for i, c, s, b in dets if c == cat]
        g = [(i, b) for i, c, b in gts if c == cat]
        aps = [average_precision(d, g, t) for t in IOU_THRESHOLDS]
        per[cat] = {"ap50": aps[0], "map": float(np.mean(aps))}
    ap50 = float(np.mean([v["ap50"] for v in per.values()])) if per else 0.0
    mAP = float(np.mean([v["map"] for v in per.values()])) if per else 0.0
    return EvalReport(ap50, mAP, per, recall_at_1, n_samples, config_hash)


# ---------------------------------------------------------------------------
# prompting


def chunk_categories(labels: Sequence[str], max_per_prompt: int = 40) -> list[TextSpec]:
    """Split labels into consecutive detection prompts of at most
    ``max_per_prompt`` labels, shrinking a chunk further if it would exceed
    the token budget."""
    if max_per_prompt < 1:
        raise ValueError("max_per_prompt must be >= 1")
    labels = list(labels)
    for lab in labels:
        if len(lab.split()) + 3 > MAX_TOKENS:
            raise ValueError(f"label {lab[:40]!r}... alone exceeds {MAX_TOKENS} tokens")
    prompts: list[TextSpec] = []
    i = 0
    while i < len(labels):
        n = min(max_per_prompt, len(labels) - i)
        while n > 1 and 2 + sum(len(lab.split()) + 1 for lab in labels[i:i + n]) > MAX_TOKENS:
            n -= 1
        prompts.append(prompt_for_labels(labels[i:i + n]))
        i += n
    return prompts


def zero_shot_detect(params: ModelParams, image_tokens: np.ndarray, labels: Sequence[str],
                     max_per_prompt: int = 40, score_thr: float = 0.05, nms_iou: float = 0.6,
                     chunks: Sequence[Sequence[str]] | None = None) -> list[Detection]:
    """Detect every label, querying the model once per prompt chunk.

    Returned detections carry ``span`` = index of the first occurrence of
    their label in ``labels``. Chunks are merged with a per-label NMS.
    """
    labels = list(labels)
    if not labels:
        return []
    first_index = {}
    for i, lab in enumerate(labels):
        first_index.setdefault(lab, i)
    prompts = ([prompt_for_labels(list(c)) for c in chunks] if chunks is not None
               else chunk_categories(labels, max_per_prompt))
    sample = _Image(np.asarray(image_tokens))
    pooled: dict[str, list[Detection]] = {}
    for prompt in prompts:
        for det in detect(sample, params, prompt, score_thr, nms_iou):
            lab = prompt.span_labels[det.span]
            pooled.setdefault(lab, []).append(det)
    out: list[Detection] = []
    for lab in sorted(pooled, key=first_index.__getitem__):
        dets = pooled[lab]
        boxes = np.array([d.box for d in dets])
        scores = np.array([d.score for d in dets])
        for k in nms(boxes, scores, nms_iou):
            d = dets[k]
            out.append(Detection(d.box, d.score, first_index[lab], d.region))
    return out


@dataclass(frozen=True)
class _Image:
    image_tokens: np.ndarray


# ---------------------------------------------------------------------------
# task-level evaluation


@dataclass
class DetectionTask:
    """A fixed-prompt detection task with train and test splits."""

    name: str
    labels: list[str]
    train: list[GroundingSample]
    test: list[GroundingSample]

    @property
    def prompt(self) -> TextSpec:
        return prompt_for_labels(self.labels)


def evaluate_task(params: ModelParams, samples: Sequence[GroundingSample], labels: Sequence[str],
                  prompt=None, score_thr: float = 0.05, nms_iou: float = 0.6,
                  config_hash: str = "") -> EvalReport:
    """Detection AP of ``params`` on ``samples`` under the prompt listing
    ``labels``, or under a tuned ``prompt`` for that same label list."""
    text = prompt_for_labels(list(labels))
    dets, gts = [], []
    for i, s in enumerate(samples):
        for det in detect(s, params, text, score_thr, nms_iou, text_features=prompt):
            dets.append((i, text.span_labels[det.span], det.score, det.box))
        for o in s.scene.objects:
            if o.label in labels:
                gts.append((i, o.label, o.box))
    return evaluate_detections(dets, gts, list(dict.fromkeys(labels)), len(samples), config_hash)


def evaluate_grounding(params: ModelParams, samples: Sequence[GroundingSample]) -> float:
    """Any-box Recall@1 over every phrase of grounding-type samples."""
    preds, gts = [], []
    for s in samples:
        dets = detect(s, params, score_thr=0.0)
        for k in range(len(s.text.spans)):
            cand = [d for d in dets if d.span == k]
            preds.append(max(cand, key=lambda d: d.score).box if cand else None)
            gts.append([s.scene.objects[j].box for j in s.text.span_objects[k]])
    return grounding_recall_at_1(preds, gts)


ALL_SHOTS = "all"
DEFAULT_SHOTS = (0, 1, 3, 5, 10, ALL_SHOTS)


@dataclass
class EvalCell:
    task: str
    shots: int | str
    mode: str
    seed: int
    report: EvalReport

    def to_record(self) -> dict:
        return {"task": self.task, "shots": self.shots, "mode": self.mode, "seed": self.seed,
                "report": self.report.to_dict()}


def run_eval_matrix(params: ModelParams, tasks: Sequence[DetectionTask],
                    adapt: Callable[[ModelParams, DetectionTask, list, str, int], tuple],
                    shots: Sequence = DEFAULT_SHOTS, modes: Sequence[str] = ("prompt", "full"),
                    seed: int = 0, config_hash: str = "",
                    subsample: Callable | None = None) -> list[EvalCell]:
    """Evaluate every (task, shots, mode) cell.

    ``adapt(params, task, subset, mode, seed)`` returns ``(params, prompt)``
    after adaptation; zero-shot cells skip it. Each cell's seed is derived
    from ``seed`` and recorded so the cell can be reproduced alone.
    """
    from .train import cell_seed, few_shot_subsample

    subsample = subsample or few_shot_subsample
    cells = []
    for task in tasks:
        for k in shots:
            for mode in modes:
                cs = cell_seed(seed, task.name, k, mode)
                cells.append(evaluate_cell(params, task, k, mode, cs, adapt, config_hash, subsample))
    return cells


def evaluate_cell(params, task, k, mode, cs, adapt, config_hash="", subsample=None) -> EvalCell:
    from .train import few_shot_subsample

    subsample = subsample or few_shot_subsample
    subset = subsample(task.train, k, cs)
    if subset:
        tuned, prompt = adapt(params, task, subset, mode, cs)
    else:
        tuned, prompt = params, None
    report = evaluate_task(tuned, task.test, task.labels, prompt=prompt, config_hash=config_hash)
    report.meta = {"n_train": len(subset)}
    return EvalCell(task.name, k, mode, cs, report)


def write_reports(cells: Iterable[EvalCell], jsonl_path: str | Path, csv_path: str | Path | None = None) -> None:
    """One JSON record per cell plus a flat CSV mirror."""
    cells = list(cells)
    with open(jsonl_path, "w", encoding="utf-8") as fh:
        for c in cells:
            fh.write(json.dumps(c.to_record(), sort_keys=True) + "\n")
    if csv_path is not None:
        Path(csv_path).write_text(reports_to_csv(cells), encoding="utf-8")


def reports_to_csv(cells: Iterable[EvalCell]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf)
    w.writerow(["task", "shots", "mode", "seed", "ap50", "map", "n_samples", "config_hash"])
    for c in cells:
        r = c.report
        w.writerow([c.task, c.shots, c.mode, c.seed, f"{r.ap50:.6f}", f"{r.map:.6f}", r.n_samples,
                    r.config_hash])
    return buf.getvalue()

