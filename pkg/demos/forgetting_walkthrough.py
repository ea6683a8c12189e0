"""
Selective forgetting: erase one task's parameters, leave the rest bit-exact.

Attribution is read off the stored binary masks: a unit belongs exclusively
to a task if that task's mask claims it and no other stored mask does. A
trunk weight is erased only when BOTH of its endpoints are exclusive; the
task's private head is erased outright. Everything else is untouched — not
approximately, but to the bit.

Run with:  python3 demos/forgetting_walkthrough.py
"""

import numpy as np

from taskgate import (E_MAX, HATLinear, ReLU, Sequential, TrainerConfig,
                      evaluate, init_embeddings, task_indexed_linear,
                      train_task)
from taskgate.data import continual_tasks
from taskgate.forgetting import attribution, forget_task

# ---------------------------------------------------------------------------
# Part 1: forgetting after real sequential training.

TASKS = 3
rng = np.random.default_rng(5)
tasks = continual_tasks(TASKS, rng, dim=10, train_n=400, test_n=200)

model = Sequential(
    HATLinear(10, 20, TASKS, "l1", np.random.default_rng(6)),
    ReLU(),
    HATLinear(20, 20, TASKS, "l2", np.random.default_rng(7)),
    ReLU(),
    task_indexed_linear(20, 2, TASKS, "head", np.random.default_rng(8)),
)
init_embeddings(model.maskers(), "ones")
cfg = TrainerConfig(task_count=TASKS, epochs=6, batch_size=8, seed=1,
                    reg_lambda=0.6, momentum=0.5)
for t in range(TASKS):
    train_task(model, tasks[t].train, t, cfg)

before = [evaluate(model, tasks[c].test, c) for c in range(TASKS)]
print("accuracies before forgetting:", [f"{a:.4f}" for a in before])

# Which units does task 0 own outright? Usually none in the trunk: reusing a
# claimed unit is free under the capacity quota, so later tasks re-claim
# task 0's units and shared units are never erased.
for masker in model.maskers():
    exclusive = attribution(masker, 0)
    claimed = masker.stored_task_masks[0].sum()
    print(f"{masker.layer_tag}: task 0 claimed {int(claimed)} units, "
          f"{int(exclusive.sum())} exclusively")

report = forget_task(model, 0)
print()
for line in report.lines():
    print(line)

after = [evaluate(model, tasks[c].test, c) for c in range(TASKS)]
print("\naccuracies after forgetting: ", [f"{a:.4f}" for a in after])
print("task 0 collapsed to chance:", after[0] == 0.5)
for c in range(1, TASKS):
    print(f"task {c} delta: {after[c] - before[c]:+.17f}")

# The freed slot is genuinely reusable later, like a brand-new task.
print("task 0 slot free again:", 0 not in model.maskers()[0].completed_tasks())

# ---------------------------------------------------------------------------
# Part 2: the weight rule, isolated.
#
# Hand-set binary masks make the erasure pattern exact and inspectable:
#   task 0 claims units {0,1} of the hidden layer, task 1 claims {1,2} —
#   so unit 0 is exclusively task 0's and unit 1 is shared.

print("\n--- crafted masks ---")
crafted = Sequential(
    HATLinear(3, 4, 2, "hidden", np.random.default_rng(20)),
    ReLU(),
    HATLinear(4, 3, 2, "out", np.random.default_rng(21)),
)
crafted.steps[0].bias.data[...] = 1.0   # nonzero so erasures are visible
crafted.steps[2].bias.data[...] = 1.0

plan = {"hidden": ([0, 1], [1, 2]), "out": ([0], [1])}
for masker in crafted.maskers():
    on0, on1 = plan[masker.layer_tag.removesuffix(".mask")]
    for task, on in ((0, on0), (1, on1)):
        row = masker.embedding_rows[task].data
        row[...] = -E_MAX
        row[on] = E_MAX
        masker.finalize_task(task)

for masker in crafted.maskers():
    print(f"{masker.layer_tag}: exclusive to task 0 -> "
          f"{attribution(masker, 0).astype(int)}")

report = forget_task(crafted, 0)
for line in report.lines():
    print(line)

# First layer: inputs carry no mask, so every weight INTO an exclusive unit
# goes — row 0 of the hidden weights (3 entries) plus its bias.
print("hidden weight row 0:", crafted.steps[0].weight.data[0])
print("hidden weight row 1 (shared unit, kept):", crafted.steps[0].weight.data[1])
# Deeper layer: both endpoints must be exclusive — weight (out 0, in 0) only.
print("out weights into exclusive unit 0:", crafted.steps[2].weight.data[:, 0])
