"""Command-line entry point.

Exit codes: 0 success, 2 usage or config error, 3 numeric failure,
4 corrupt or inconsistent artifact.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

from . import config as C
from .evaluation import ALL_SHOTS, EvalCell, evaluate_cell, evaluate_task, write_reports
from .model import CheckpointError, ModelParams, atomic_write, decode_checkpoint, load_checkpoint, save_checkpoint
from .synthworld import label_of
from .train import (
    NonFiniteLossError,
    adapt_fn,
    caption_pool,
    cell_seed,
    few_shot_subsample,
    fine_tune,
    make_task,
    pretrain,
    prompt_tune,
    pseudo_label,
    read_pseudo,
    save_prompt,
    write_pseudo,
)

log = logging.getLogger("groundwork")

EXIT_OK, EXIT_USAGE, EXIT_NUMERIC, EXIT_CORRUPT = 0, 2, 3, 4


class UsageError(Exception):
    pass


# ---------------------------------------------------------------------------
# shared plumbing


def _load_config(args) -> C.RunConfig:
    path = args.config
    if path is None and getattr(args, "checkpoint", None):
        sibling = Path(args.checkpoint).parent / "config.yaml"
        if sibling.exists():
            path = sibling
    cfg = C.load(path) if path else C.from_dict({})
    if getattr(args, "seed", None) is not None:
        cfg.seed = args.seed
    if getattr(args, "out", None):
        cfg.out_dir = args.out
    C.validate(cfg)
    return cfg


def _out_dir(cfg: C.RunConfig) -> Path:
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _write_json(path: Path, obj) -> None:
    atomic_write(path, (json.dumps(obj, indent=2, sort_keys=True) + "\n").encode())


def _load_params(cfg: C.RunConfig, path) -> ModelParams:
    if path is None:
        raise UsageError("--checkpoint is required")
    if not Path(path).is_file():
        raise UsageError(f"checkpoint {path} does not exist")
    params, h = load_checkpoint(path, cfg.model)
    if h != cfg.digest():
        log.warning("checkpoint was written under config %s, running under %s", h, cfg.digest())
    return params


def task_labels(name: str, world) -> list[str]:
    if name == "heldout":
        return world.heldout_labels
    if name == "seen":
        return [label_of(*c) for c in world.train_combos]
    if name == "all":
        return [label_of(*c) for c in world.all_combos]
    raise UsageError(f"unknown task {name!r} (heldout, seen, all)")


def _task(cfg: C.RunConfig, name: str):
    t = cfg.task
    return make_task(cfg.world, task_labels(name, cfg.world), t.n_train, t.n_test, t.seed, name)


def _parse_shots(text: str):
    out = []
    for part in text.split(","):
        part = part.strip()
        if part == ALL_SHOTS:
            out.append(ALL_SHOTS)
            continue
        try:
            k = int(part)
        except ValueError:
            raise UsageError(f"bad --shots entry {part!r}") from None
        if k < 0:
            raise UsageError("--shots must be >= 0")
        out.append(k)
    return out


def _one_shot(args):
    shots = _parse_shots(args.shots)
    if len(shots) != 1:
        raise UsageError("this command takes a single --shots value")
    return shots[0]


def _report(cfg, out: Path, stem: str, cells: list[EvalCell]) -> None:
    write_reports(cells, out / f"{stem}.jsonl", out / f"{stem}.csv")
    for c in cells:
        print(f"{c.task}\tshots={c.shots}\t{c.mode}\tAP50={c.report.ap50:.4f}\tmAP={c.report.map:.4f}")


# ---------------------------------------------------------------------------
# commands


def cmd_pretrain(args) -> int:
    cfg = _load_config(args)
    pool = []
    if args.pseudo:
        triplets, hashes = read_pseudo(args.pseudo, cfg.world)
        pool = [t.sample for t in triplets]
        if not pool:
            raise UsageError(f"{args.pseudo} holds no pseudo-labelled samples")
        if "pseudo" not in cfg.data.streams:
            cfg.data.streams = (*cfg.data.streams, "pseudo")
        log.info("pseudo pool: %d samples (teacher config %s)", len(pool), ",".join(sorted(hashes)))
    elif "pseudo" in cfg.data.streams:
        raise UsageError("data.streams includes 'pseudo' but no --pseudo file was given")
    out = _out_dir(cfg)
    h = cfg.digest()
    cfg.dump(out / "config.yaml")
    metrics = out / "metrics.jsonl"
    if metrics.exists():
        metrics.unlink()
    params, hist = pretrain(cfg.world, cfg.model, cfg.pretrain_config(), cfg.seed, pseudo_pool=pool,
                            out_dir=out, config_hash=h, metrics_log=metrics)
    last = hist[-1]["loss"] if hist else {}
    _write_json(out / "run.json", {"command": "pretrain", "config_hash": h, "seed": cfg.seed,
                                   "steps": len(hist), "final_loss": last, "checksum": params.checksum()})
    print(f"final checkpoint {out / 'final.ckpt'} (config {h})")
    return EXIT_OK


def cmd_zeroshot(args) -> int:
    cfg = _load_config(args)
    params = _load_params(cfg, args.checkpoint)
    task = _task(cfg, args.task)
    out = _out_dir(cfg)
    thr = 0.05 if args.threshold is None else args.threshold
    report = evaluate_task(params, task.test, task.labels, score_thr=thr, config_hash=cfg.digest())
    report.meta = {"n_train": 0, "score_thr": thr}
    _report(cfg, out, "zeroshot", [EvalCell(task.name, 0, "zeroshot", cfg.seed, report)])
    return EXIT_OK


def _adapt_subset(cfg, args, mode):
    task = _task(cfg, args.task)
    k = _one_shot(args)
    cs = cell_seed(cfg.seed, task.name, k, mode)
    return task, k, cs, few_shot_subsample(task.train, k, cs)


def cmd_prompt_tune(args) -> int:
    cfg = _load_config(args)
    params = _load_params(cfg, args.checkpoint)
    task, k, cs, subset = _adapt_subset(cfg, args, "prompt")
    out = _out_dir(cfg)
    h = cfg.digest()
    prompt = prompt_tune(params, task.prompt, subset, cfg.adapt.steps, cs, cfg.adapt)
    save_prompt(out / "prompt.bin", prompt, h)
    report = evaluate_task(params, task.test, task.labels, prompt=prompt, config_hash=h)
    report.meta = {"n_train": len(subset), "prompt_level": prompt.level}
    _report(cfg, out, "prompt_tune", [EvalCell(task.name, k, "prompt", cs, report)])
    return EXIT_OK


def cmd_finetune(args) -> int:
    cfg = _load_config(args)
    params = _load_params(cfg, args.checkpoint)
    task, k, cs, subset = _adapt_subset(cfg, args, "full")
    out = _out_dir(cfg)
    h = cfg.digest()
    tuned = fine_tune(params, subset, cfg.adapt.steps, cs, cfg.adapt)
    save_checkpoint(out / "finetuned.ckpt", tuned, h)
    report = evaluate_task(tuned, task.test, task.labels, config_hash=h)
    report.meta = {"n_train": len(subset)}
    _report(cfg, out, "finetune", [EvalCell(task.name, k, "full", cs, report)])
    return EXIT_OK


def cmd_pseudo_label(args) -> int:
    cfg = _load_config(args)
    teacher = _load_params(cfg, args.checkpoint)
    out = _out_dir(cfg)
    thr = cfg.pseudo.threshold if args.threshold is None else args.threshold
    if not 0 < thr < 1:
        raise UsageError("--threshold must lie in (0, 1)")
    seeds, captions = caption_pool(cfg.world, cfg.pseudo.n_captions, cfg.seed)
    triplets = pseudo_label(teacher, captions, thr)
    write_pseudo(out / "pseudo.jsonl", triplets, seeds, cfg.digest())
    n_boxes = sum(len(t.sample.scene.objects) for t in triplets)
    print(f"{len(triplets)} of {len(captions)} captions kept, {n_boxes} pseudo boxes at threshold {thr}")
    return EXIT_OK


def _cell_job(job):
    arrays, model_cfg, task, k, mode, cs, adapt_cfg, h = job
    params = ModelParams.from_arrays(model_cfg, arrays)
    return evaluate_cell(params, task, k, mode, cs, adapt_fn(adapt_cfg), h)


def cmd_eval_matrix(args) -> int:
    cfg = _load_config(args)
    params = _load_params(cfg, args.checkpoint)
    task = _task(cfg, args.task)
    out = _out_dir(cfg)
    h = cfg.digest()
    shots = _parse_shots(args.shots) if args.shots else list(cfg.eval.shots)
    workers = args.workers or cfg.eval.workers
    jobs = [(params.arrays(), cfg.model, task, k, mode, cell_seed(cfg.seed, task.name, k, mode), cfg.adapt, h)
            for k in shots for mode in cfg.eval.modes]
    if workers > 1:
        with ProcessPoolExecutor(workers) as ex:
            cells = list(ex.map(_cell_job, jobs))
    else:
        cells = [_cell_job(j) for j in jobs]
    _report(cfg, out, "eval_matrix", cells)
    return EXIT_OK


# ---------------------------------------------------------------------------
# verification


def artifact_hashes(path: Path) -> set[str]:
    """Config hashes recorded in one run artifact."""
    name = path.name
    if name.endswith((".ckpt", ".bin")):
        return {decode_checkpoint(path.read_bytes())[1]}
    if name == "config.yaml":
        return {C.load(path).digest()}
    if name.endswith(".jsonl"):
        out = set()
        for line in path.read_text(encoding="utf-8").splitlines():
            if line.strip():
                rec = json.loads(line)
                out.add(rec["config_hash"] if "config_hash" in rec else rec["report"]["config_hash"])
        return out
    if name.endswith(".csv"):
        with open(path, newline="", encoding="utf-8") as fh:
            return {row["config_hash"] for row in csv.DictReader(fh)}
    if name.endswith(".json"):
        return {json.loads(path.read_text(encoding="utf-8"))["config_hash"]}
    return set()


def cmd_verify(args) -> int:
    run = Path(args.run_dir)
    if not run.is_dir():
        raise UsageError(f"{run} is not a directory")
    seen: dict[str, set[str]] = {}
    for p in sorted(run.iterdir()):
        if p.is_file() and not p.name.startswith("."):
            try:
                hs = artifact_hashes(p)
            except (KeyError, ValueError, TypeError) as e:
                raise CheckpointError(f"{p.name}: unreadable ({e})") from e
            if hs:
                seen[p.name] = hs
    if not seen:
        raise UsageError(f"no artifacts found in {run}")
    every = set().union(*seen.values())
    if len(every) != 1:
        for n, hs in seen.items():
            print(f"{n}\t{','.join(sorted(hs))}")
        print(f"inconsistent: {len(every)} distinct config hashes", file=sys.stderr)
        return EXIT_CORRUPT
    print(f"ok: {len(seen)} artifacts share config {every.pop()}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="groundwork", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def add(name, fn, help_, checkpoint=True, task=False, shots=None, threshold=False):
        s = sub.add_parser(name, help=help_)
        s.add_argument("--config", help="YAML run config (default: config.yaml beside the checkpoint)")
        s.add_argument("--seed", type=int, help="root seed (overrides the config)")
        s.add_argument("--out", help="output directory (overrides out_dir)")
        if checkpoint:
            s.add_argument("--checkpoint", help="model checkpoint")
        if task:
            s.add_argument("--task", default="heldout", help="heldout, seen or all")
        if shots is not None:
            s.add_argument("--shots", default=shots, help="examples per category, or 'all'")
        if threshold:
            s.add_argument("--threshold", type=float, help="detection score threshold")
        s.set_defaults(fn=fn)
        return s

    pt = add("pretrain", cmd_pretrain, "two-stage pre-training", checkpoint=False)
    pt.add_argument("--pseudo", help="pseudo-label file to mix into the data streams")
    add("zeroshot", cmd_zeroshot, "zero-shot detection report", task=True, threshold=True)
    add("prompt-tune", cmd_prompt_tune, "tune the prompt matrix only", task=True, shots="all")
    add("finetune", cmd_finetune, "full fine-tuning", task=True, shots="all")
    add("pseudo-label", cmd_pseudo_label, "teacher boxes for caption samples", threshold=True)
    em = add("eval-matrix", cmd_eval_matrix, "shots x mode evaluation table", task=True, shots="")
    em.add_argument("--workers", type=int, help="worker processes for cells")
    v = sub.add_parser("verify", help="check a run directory for config-hash consistency")
    v.add_argument("run_dir")
    v.set_defaults(fn=cmd_verify)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s")
    try:
        return args.fn(args)
    except (UsageError, C.RunConfigError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except (NonFiniteLossError, FloatingPointError) as e:
        print(f"numeric failure: {e}", file=sys.stderr)
        return EXIT_NUMERIC
    except CheckpointError as e:
        print(f"corrupt artifact: {e}", file=sys.stderr)
        return EXIT_CORRUPT


if __name__ == "__main__":
    sys.exit(main())
