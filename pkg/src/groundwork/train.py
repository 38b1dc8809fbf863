"""Optimisation loop, two-stage pre-training, pseudo-box self-training,
prompt tuning, full fine-tuning and few-shot subsampling."""

from __future__ import annotations

import json
import logging
import zlib
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .autodiff import NumericError, Tensor
from .evaluation import ALL_SHOTS, DetectionTask
from .losses import Batch, LossWeights, make_batch, total_loss
from .model import (
    CheckpointError,
    ModelConfig,
    ModelParams,
    PromptMatrix,
    atomic_write,
    decode_checkpoint,
    detect,
    encode_checkpoint,
    init_params,
    save_checkpoint,
)
from .synthworld import (
    GroundingSample,
    Scene,
    SceneObject,
    TextSpec,
    WorldConfig,
    assemble_sample,
    make_sample,
    prompt_for_labels,
    render_scene,
    sample_scene,
)

log = logging.getLogger(__name__)


class NonFiniteLossError(ArithmeticError):
    def __init__(self, term: str, value: float):
        super().__init__(f"loss term {term!r} is non-finite ({value})")
        self.term = term


# ---------------------------------------------------------------------------
# seeding


def _subsystem_key(name: str) -> int:
    return zlib.crc32(name.encode())


def derive_seed(root: int, subsystem: str, counter: int = 0) -> int:
    """Counter-based child seed: (root, subsystem, counter) -> 63-bit int."""
    ss = np.random.SeedSequence(int(root), spawn_key=(_subsystem_key(subsystem), int(counter)))
    return int(ss.generate_state(1, dtype=np.uint64)[0] >> np.uint64(1))


def derive_rng(root: int, subsystem: str, counter: int = 0) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence(int(root), spawn_key=(_subsystem_key(subsystem), int(counter))))


def cell_seed(root: int, task: str, shots, mode: str) -> int:
    return derive_seed(root, f"cell/{task}/{shots}/{mode}")


# ---------------------------------------------------------------------------
# optimiser


@dataclass
class OptimizerConfig:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    clip_norm: float = 1.0
    group_lr: dict[str, float] = field(default_factory=dict)  # name prefix -> lr multiplier
    milestones: tuple[float, ...] = (0.67, 0.89)  # fractions of the run where lr drops
    gamma: float = 0.1

    def __post_init__(self):
        if self.lr <= 0 or self.clip_norm <= 0 or not 0 <= self.beta1 < 1 or not 0 <= self.beta2 < 1:
            raise ValueError("invalid optimizer settings")


class OptimizerState:
    """Adam moments keyed by parameter name."""

    def __init__(self, config: OptimizerConfig | None = None, total_steps: int | None = None):
        self.config = config or OptimizerConfig()
        self.total_steps = total_steps
        self.step = 0
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}

    def lr_for(self, name: str) -> float:
        c = self.config
        lr = c.lr
        for prefix, mult in c.group_lr.items():
            if name.startswith(prefix):
                lr *= mult
                break
        if self.total_steps:
            for frac in c.milestones:
                if self.step >= frac * self.total_steps:
                    lr *= c.gamma
        return lr

    def update(self, tensors: dict[str, Tensor], grads: dict[str, np.ndarray]) -> None:
        c = self.config
        self.step += 1
        t = self.step
        for name, g in grads.items():
            p = tensors[name]
            if name not in self.m:
                self.m[name] = np.zeros_like(p.data)
                self.v[name] = np.zeros_like(p.data)
            m, v = self.m[name], self.v[name]
            m *= c.beta1
            m += (1 - c.beta1) * g
            v *= c.beta2
            v += (1 - c.beta2) * g * g
            mhat = m / (1 - c.beta1**t)
            vhat = v / (1 - c.beta2**t)
            p.data -= self.lr_for(name) * mhat / (np.sqrt(vhat) + c.eps)


def train_step(batch: Batch, params: ModelParams, opt: OptimizerState,
               weights: LossWeights = LossWeights(), trainable: Iterable[str] | None = None,
               prompt: PromptMatrix | None = None) -> dict:
    """One clipped Adam step on the tensors named in ``trainable``.

    ``trainable=None`` trains every model tensor. A tuned ``prompt`` matrix
    is addressable as ``"prompt"``. Tensors outside the mask are not touched.
    """
    named: dict[str, Tensor] = dict(params.items())
    if prompt is not None:
        named["prompt"] = prompt.values
    mask = set(params.names()) if trainable is None else set(trainable)
    unknown = mask - set(named)
    if unknown:
        raise KeyError(f"unknown trainable tensors: {sorted(unknown)}")
    flags = {k: t.requires_grad for k, t in named.items()}
    try:
        for k, t in named.items():
            t.requires_grad = k in mask
            t.grad = None
        try:
            out = total_loss(batch, params, weights, prompt=prompt)
        except NumericError as e:
            # raised by guards inside a term, before any value exists
            raise NonFiniteLossError("mlm" if "MLM" in str(e) else "total", float("nan")) from e
        values = out.values()
        for term, v in values.items():
            if v is not None and not np.isfinite(v):
                raise NonFiniteLossError(term, v)
        grads: dict[str, np.ndarray] = {}
        if out.total.requires_grad:
            out.total.backward()
            grads = {k: named[k].grad for k in sorted(mask) if named[k].grad is not None}
        sq = float(sum(float((g * g).sum()) for g in grads.values()))
        norm = float(np.sqrt(sq))
        if not np.isfinite(norm):
            raise NonFiniteLossError("grad_norm", norm)
        clip = opt.config.clip_norm
        if norm > clip:
            grads = {k: g * (clip / norm) for k, g in grads.items()}
        lr = opt.lr_for("")
        if grads:
            opt.update(named, grads)
        else:
            opt.step += 1
    finally:
        for k, t in named.items():
            t.requires_grad = flags[k]
            t.grad = None
    return {"step": opt.step, "loss": values, "grad_norm": norm, "lr": lr}


# ---------------------------------------------------------------------------
# data streams


@dataclass
class DataMix:
    streams: tuple[str, ...] = ("detection", "grounding")  # round-robin order; "pseudo" uses a pool
    batch_size: int = 4
    mask_rate: float = 0.15


class SampleStream:
    """Endless deterministic sequence of training samples of one kind."""

    def __init__(self, kind: str, world: WorldConfig, root_seed: int, pool: Sequence[GroundingSample] = ()):
        self.kind = kind
        self.world = world
        self.root = root_seed
        self.pool = list(pool)
        self.i = 0
        if kind == "pseudo" and not self.pool:
            raise ValueError("pseudo stream needs a non-empty pool")

    def next(self) -> GroundingSample:
        i = self.i
        self.i += 1
        if self.kind == "pseudo":
            order = derive_rng(self.root, "pseudo-order", i // len(self.pool)).permutation(len(self.pool))
            return self.pool[int(order[i % len(self.pool)])]
        return make_sample(derive_seed(self.root, f"data/{self.kind}", i), self.world, self.kind, "train")


def batch_iterator(world: WorldConfig, mix: DataMix, root_seed: int,
                   pseudo_pool: Sequence[GroundingSample] = ()):
    streams = [SampleStream(k, world, root_seed, pseudo_pool if k == "pseudo" else ()) for k in mix.streams]
    j = 0
    b = 0
    while True:
        samples = []
        for _ in range(mix.batch_size):
            samples.append(streams[j % len(streams)].next())
            j += 1
        yield make_batch(samples, derive_rng(root_seed, "mlm", b), mix.mask_rate)
        b += 1


# ---------------------------------------------------------------------------
# pre-training


@dataclass
class PretrainConfig:
    stage1_steps: int = 600
    stage2_steps: int = 200
    weights: LossWeights = field(default_factory=LossWeights)
    optimizer: OptimizerConfig = field(default_factory=OptimizerConfig)
    mix: DataMix = field(default_factory=DataMix)
    checkpoint_every: int = 0
    log_every: int = 1


def pretrain(world: WorldConfig, model_cfg: ModelConfig, cfg: PretrainConfig, seed: int,
             params: ModelParams | None = None, pseudo_pool: Sequence[GroundingSample] = (),
             out_dir: str | Path | None = None, config_hash: str = "",
             metrics_log: str | Path | None = None) -> tuple[ModelParams, list[dict]]:
    """Stage 1 uses every loss weight; stage 2 continues with ``w_mlm = 0``."""
    if params is None:
        params = init_params(model_cfg, derive_seed(seed, "init"))
    total = cfg.stage1_steps + cfg.stage2_steps
    opt = OptimizerState(cfg.optimizer, total_steps=total)
    batches = batch_iterator(world, cfg.mix, derive_seed(seed, "data"), pseudo_pool)
    history = []
    log_fh = open(metrics_log, "a", encoding="utf-8") if metrics_log else None
    try:
        for step in range(total):
            weights = cfg.weights if step < cfg.stage1_steps else cfg.weights.replace(w_mlm=0.0)
            m = train_step(next(batches), params, opt, weights)
            m["stage"] = 1 if step < cfg.stage1_steps else 2
            history.append(m)
            if log_fh and (step % cfg.log_every == 0 or step == total - 1):
                log_fh.write(json.dumps({**m, "config_hash": config_hash}, sort_keys=True) + "\n")
            if out_dir and cfg.checkpoint_every and (step + 1) % cfg.checkpoint_every == 0:
                save_checkpoint(Path(out_dir) / f"step_{step + 1:06d}.ckpt", params, config_hash)
    finally:
        if log_fh:
            log_fh.close()
    if out_dir:
        save_checkpoint(Path(out_dir) / "final.ckpt", params, config_hash)
    return params, history


# ---------------------------------------------------------------------------
# self-training


@dataclass
class PseudoTriplet:
    sample: GroundingSample
    row_scores: np.ndarray  # teacher score per target row (0 for unmatched rows)
    index: int = -1  # position of the source caption in the pseudo_label input
    provenance: str = "pseudo"


def caption_seeds(n: int, seed: int) -> list[int]:
    return [derive_seed(seed, "captions", i) for i in range(n)]


def caption_pool(world: WorldConfig, n: int, seed: int) -> tuple[list[int], list[GroundingSample]]:
    """Grounding-type image-text pairs with their boxes withheld, plus the
    seed that regenerates each one. Empty scenes yield no caption."""
    seeds, samples = [], []
    for sd in caption_seeds(n, seed):
        s = make_sample(sd, world, "grounding", "train", with_targets=False)
        if s.text.text_type == "grounding":
            seeds.append(sd)
            samples.append(s)
    return seeds, samples


def caption_samples(world: WorldConfig, n: int, seed: int) -> list[GroundingSample]:
    return caption_pool(world, n, seed)[1]


def pseudo_sample(caption: GroundingSample, objects: Sequence[SceneObject],
                  span_objects: Sequence[tuple[int, ...]]) -> GroundingSample:
    """Rebuild ``caption`` around teacher boxes so targets follow the usual assignment."""
    scene = Scene(caption.scene.grid, tuple(objects), caption.scene.seed)
    text = caption.text.with_objects([tuple(r) for r in span_objects])
    return assemble_sample(scene, text, caption.image_tokens, split=caption.split, provenance="pseudo")


def pseudo_label(teacher: ModelParams, samples: Sequence[GroundingSample], score_thr: float = 0.5,
                 nms_iou: float = 0.6) -> list[PseudoTriplet]:
    """Teacher boxes for every caption phrase, rebuilt into targets.

    Per span, each surviving detection with score >= ``score_thr`` becomes a
    pseudo ground-truth box; samples with no surviving span are dropped.
    """
    if not 0 < score_thr < 1:
        raise ValueError("score_thr must lie in (0, 1)")
    out = []
    for i, s in enumerate(samples):
        if s.text.text_type != "grounding":
            raise ValueError("pseudo labelling expects grounding-type captions")
        dets = detect(s, teacher, score_thr=score_thr, nms_iou=nms_iou)
        objects: list[SceneObject] = []
        scores: list[float] = []
        span_objects: list[tuple[int, ...]] = []
        for k, lab in enumerate(s.text.span_labels):
            color, shape = lab.split()
            refs = []
            for d in dets:
                if d.span == k:
                    refs.append(len(objects))
                    objects.append(SceneObject(color, shape, d.box))
                    scores.append(d.score)
            span_objects.append(tuple(refs))
        if not objects:
            continue
        sample = pseudo_sample(s, objects, span_objects)
        assign = sample.targets.assignment
        row_scores = np.where(assign >= 0, np.asarray(scores)[np.maximum(assign, 0)], 0.0)
        out.append(PseudoTriplet(sample, row_scores, i))
    return out


def write_pseudo(path: str | Path, triplets: Sequence[PseudoTriplet], seeds: Sequence[int],
                 config_hash: str) -> None:
    """One JSON record per triplet; images are regenerated from the caption seed."""
    lines = []
    for t in triplets:
        objs = t.sample.scene.objects
        lines.append(json.dumps({
            "seed": int(seeds[t.index]),
            "objects": [[o.color, o.shape, list(o.box)] for o in objs],
            "span_objects": [list(r) for r in t.sample.text.span_objects],
            "row_scores": [float(v) for v in t.row_scores],
            "config_hash": config_hash,
        }, sort_keys=True))
    atomic_write(path, ("\n".join(lines) + ("\n" if lines else "")).encode())


def read_pseudo(path: str | Path, world: WorldConfig) -> tuple[list[PseudoTriplet], set[str]]:
    """Triplets from :func:`write_pseudo` plus the config hashes they carry."""
    out, hashes = [], set()
    for line in Path(path).read_text(encoding="utf-8").splitlines():
        if not line.strip():
            continue
        rec = json.loads(line)
        caption = make_sample(rec["seed"], world, "grounding", "train", with_targets=False)
        objects = [SceneObject(c, sh, tuple(b)) for c, sh, b in rec["objects"]]
        sample = pseudo_sample(caption, objects, rec["span_objects"])
        out.append(PseudoTriplet(sample, np.asarray(rec["row_scores"], dtype=np.float64)))
        hashes.add(rec["config_hash"])
    return out, hashes


# ---------------------------------------------------------------------------
# adaptation


@dataclass
class AdaptConfig:
    steps: int = 150
    batch_size: int = 4
    lr: float = 1e-3
    prompt_lr: float = 1e-2
    prompt_level: str = "embedding"
    weights: LossWeights = field(default_factory=lambda: LossWeights(1.0, 1.0, 0.0, 0.0))


def _task_batches(samples: Sequence[GroundingSample], batch_size: int, seed: int):
    rng = derive_rng(seed, "adapt-batches")
    n = len(samples)
    while True:
        order = rng.permutation(n)
        for i in range(0, n, batch_size):
            idx = order[i:i + batch_size]
            if len(idx) < min(batch_size, n):
                continue
            yield make_batch([samples[int(j)] for j in idx])


def prompt_tune(params: ModelParams, prompt: TextSpec, samples: Sequence[GroundingSample],
                steps: int, seed: int = 0, cfg: AdaptConfig | None = None) -> PromptMatrix:
    """Tune a free matrix standing in for ``prompt``; the model stays frozen.

    Every sample must carry the same prompt. Model tensors are left
    bit-identical; only the returned matrix changes.
    """
    cfg = cfg or AdaptConfig()
    for s in samples:
        if tuple(s.text.token_ids) != tuple(prompt.token_ids):
            raise ValueError("prompt tuning requires one prompt shared by all task samples")
    matrix = PromptMatrix.initial(params, prompt.token_ids, cfg.prompt_level)
    if steps == 0 or not samples:
        return matrix
    opt = OptimizerState(OptimizerConfig(lr=cfg.prompt_lr), total_steps=steps)
    batches = _task_batches(samples, cfg.batch_size, seed)
    for _ in range(steps):
        train_step(next(batches), params, opt, cfg.weights, trainable={"prompt"}, prompt=matrix)
    return matrix


def save_prompt(path: str | Path, prompt: PromptMatrix, config_hash: str) -> None:
    """Tuned prompts use the checkpoint layout with one tensor, ``prompt.<level>``."""
    atomic_write(path, encode_checkpoint({f"prompt.{prompt.level}": prompt.values.data}, config_hash))


def load_prompt(path: str | Path) -> tuple[PromptMatrix, str]:
    arrays, config_hash = decode_checkpoint(Path(path).read_bytes())
    if len(arrays) != 1:
        raise CheckpointError(f"a prompt file holds one tensor, found {len(arrays)}")
    (name, values), = arrays.items()
    if not name.startswith("prompt."):
        raise CheckpointError(f"unexpected tensor {name!r} in prompt file")
    return PromptMatrix(Tensor(values, requires_grad=True), name.split(".", 1)[1]), config_hash


def fine_tune(params: ModelParams, samples: Sequence[GroundingSample], steps: int, seed: int = 0,
              cfg: AdaptConfig | None = None) -> ModelParams:
    """Full fine-tuning of a copy of ``params`` on task samples."""
    cfg = cfg or AdaptConfig()
    tuned = params.copy()
    if steps == 0 or not samples:
        return tuned
    opt = OptimizerState(OptimizerConfig(lr=cfg.lr), total_steps=steps)
    batches = _task_batches(samples, cfg.batch_size, seed)
    for _ in range(steps):
        train_step(next(batches), tuned, opt, cfg.weights)
    return tuned


def few_shot_subsample(dataset: Sequence[GroundingSample], k, seed: int) -> list[GroundingSample]:
    """``k`` samples per label category (``ALL_SHOTS`` keeps everything).

    Categories are visited in sorted order; each draws uniformly without
    replacement from samples containing it that were not already taken.
    """
    if k == ALL_SHOTS:
        return list(dataset)
    k = int(k)
    if k < 0:
        raise ValueError("k must be >= 0")
    if k == 0:
        return []
    rng = derive_rng(seed, "few-shot")
    cats = sorted({lab for s in dataset for lab in s.box_labels})
    taken: list[int] = []
    used: set[int] = set()
    for cat in cats:
        cands = [i for i, s in enumerate(dataset) if cat in s.box_labels and i not in used]
        n = min(k, len(cands))
        for j in rng.choice(len(cands), size=n, replace=False) if n else []:
            taken.append(cands[int(j)])
            used.add(cands[int(j)])
    return [dataset[i] for i in sorted(taken)]


# ---------------------------------------------------------------------------
# tasks


def make_task(world: WorldConfig, labels: Sequence[str], n_train: int, n_test: int, seed: int,
              name: str = "heldout") -> DetectionTask:
    """A fixed-prompt detection task over ``labels``.

    Scenes come from the heldout split (at least one heldout object each);
    objects whose label is not in ``labels`` are background.
    """
    labels = list(labels)

    def build(split_name, n):
        out = []
        for i in range(n):
            sd = derive_seed(seed, f"task/{name}/{split_name}", i)
            scene = sample_scene(sd, world, split="heldout")
            prompt = prompt_for_labels(labels, scene.objects)
            out.append(assemble_sample(scene, prompt, render_scene(scene, world), split=split_name))
        return out

    return DetectionTask(name, labels, build("train", n_train), build("test", n_test))


def adapt_fn(cfg: AdaptConfig | None = None):
    """Adapter for :func:`run_eval_matrix`: ``mode`` is "prompt" or "full"."""
    cfg = cfg or AdaptConfig()

    def adapt(params, task, subset, mode, seed):
        if mode == "prompt":
            return params, prompt_tune(params, task.prompt, subset, cfg.steps, seed, cfg)
        if mode == "full":
            return fine_tune(params, subset, cfg.steps, seed, cfg), None
        raise ValueError(f"unknown adaptation mode {mode!r}")

    return adapt


def config_to_dict(cfg) -> dict:
    return asdict(cfg)
