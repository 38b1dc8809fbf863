"""Self-training round trip: a detection-only teacher labels caption
phrases with boxes, then training continues on detection data plus the
pseudo-labelled captions."""

import dataclasses
import sys

import numpy as np

from groundwork import config as C
from groundwork import train as T
from groundwork.evaluation import compute_iou, evaluate_task

cfg = C.load(sys.argv[1] if len(sys.argv) > 1 else "configs/default.yaml")
world, seed = cfg.world, cfg.seed
task = T.make_task(world, world.heldout_labels, 0, cfg.task.n_test, cfg.task.seed)

teacher_cfg = cfg.pretrain_config()
teacher_cfg.mix = dataclasses.replace(cfg.data, streams=("detection",))
teacher, _ = T.pretrain(world, cfg.model, teacher_cfg, seed)
print(f"teacher zero-shot AP50: {evaluate_task(teacher, task.test, task.labels).ap50:.3f}")

captions = T.caption_samples(world, cfg.pseudo.n_captions, seed)
trips = T.pseudo_label(teacher, captions, cfg.pseudo.threshold)
hits = total = 0
for t in trips:
    truth = captions[t.index].scene.objects
    for o in t.sample.scene.objects:
        total += 1
        hits += any(g.label == o.label and compute_iou(g.box, o.box) >= 0.5 for g in truth)
print(f"{len(trips)}/{len(captions)} captions kept, pseudo-box precision {hits / max(total, 1):.3f}")

student_cfg = cfg.pretrain_config()
student_cfg.stage1_steps, student_cfg.stage2_steps = 0, cfg.schedule.stage2_steps
student_cfg.mix = dataclasses.replace(cfg.data, streams=("detection", "grounding", "pseudo"))
student, _ = T.pretrain(world, cfg.model, student_cfg, T.derive_seed(seed, "student"), params=teacher.copy(),
                        pseudo_pool=[t.sample for t in trips])
print(f"after self-training AP50: {evaluate_task(student, task.test, task.labels).ap50:.3f}")
print("mean teacher score of kept boxes:", np.round(np.mean([s for t in trips for s in t.row_scores if s > 0]), 3))
