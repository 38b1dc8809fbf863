"""Pre-train a small grounding model, then compare zero-shot, prompt-tuned
and fully fine-tuned detection on colour/shape pairs never seen in training.

Takes about a minute and a half on one CPU core.
"""

import sys

from groundwork import config as C
from groundwork import train as T
from groundwork.evaluation import evaluate_task
from groundwork.model import init_params

cfg = C.load(sys.argv[1] if len(sys.argv) > 1 else "configs/default.yaml")
world, seed = cfg.world, cfg.seed
task = T.make_task(world, world.heldout_labels, cfg.task.n_train, cfg.task.n_test, cfg.task.seed)

untrained = init_params(cfg.model, T.derive_seed(seed, "init"))
chance = evaluate_task(untrained, task.test, task.labels).ap50
print(f"untrained AP50 on heldout pairs: {chance:.3f}")

params, hist = T.pretrain(world, cfg.model, cfg.pretrain_config(), seed)
print(f"pre-trained for {len(hist)} steps, final loss {hist[-1]['loss']['total']:.3f}")
zs = evaluate_task(params, task.test, task.labels).ap50
print(f"zero-shot AP50: {zs:.3f}")

before = params.checksum()
prompt = T.prompt_tune(params, task.prompt, task.train, cfg.adapt.steps, seed, cfg.adapt)
assert params.checksum() == before, "prompt tuning must not touch the model"
pt = evaluate_task(params, task.test, task.labels, prompt=prompt).ap50
print(f"prompt-tuned AP50: {pt:.3f}  (only a {prompt.values.shape} matrix was trained)")

ft = evaluate_task(T.fine_tune(params, task.train, cfg.adapt.steps, seed, cfg.adapt), task.test, task.labels).ap50
print(f"fine-tuned AP50: {ft:.3f}")
