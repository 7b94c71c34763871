"""Knowledge distillation versus pruning + fine-tuning.

The student shares the pruned model's architecture but starts from fresh
weights and learns from the teacher's temperature-softened outputs
(alpha = 0.5, T = 2).  Fine-tuning the pruned weights usually matches or
beats the distilled student at the same iteration budget, and distillation
pays for an extra teacher forward pass every iteration.
"""

import time

from qprune import (
    KDConfig,
    TrainConfig,
    apply_prune,
    build_model,
    build_prune_plan,
    count_params,
    distill_train,
    finetune,
    make_student_from_plan,
    synth_dataset,
    train_loop,
)
from qprune.autodiff import evaluate_accuracy

ds = synth_dataset(4, 600, seed=2, frames=32, bins=16)
teacher = build_model("qcnn-mini", 4, (4, 32, 16), seed=2)
train_loop(teacher, ds.features, ds.labels,
           TrainConfig(iterations=800, lr=3e-3, seed=2, eval_every=50,
                       target_metric=0.99))
print(f"teacher: acc {evaluate_accuracy(teacher, ds.features, ds.labels):.3f}, "
      f"{count_params(teacher)} params")

plan = build_prune_plan(teacher, "op", p=0.5)
budget = dict(iterations=400, lr=3e-3, batch_size=16, eval_every=50)

pruned = apply_prune(teacher, plan)
t0 = time.perf_counter()
ft = finetune(pruned, ds, TrainConfig(seed=3, **budget))
t_ft = time.perf_counter() - t0

student = make_student_from_plan(teacher, plan, seed=3)
kd_rows = []
t0 = time.perf_counter()
distill_train(teacher, student, ds, KDConfig(alpha=0.5, temperature=2.0),
              TrainConfig(seed=3, **budget), log_rows=kd_rows)
t_kd = time.perf_counter() - t0

acc_ft = evaluate_accuracy(ft, ds.features, ds.labels)
acc_kd = evaluate_accuracy(student, ds.features, ds.labels)
print(f"\nPrune_FT: acc {acc_ft:.3f}  ({count_params(ft)} params, {t_ft:.1f}s)")
print(f"KD:       acc {acc_kd:.3f}  ({count_params(student)} params, {t_kd:.1f}s)")
print("\nfirst/last KD loss rows (iteration, ce, kl, total):")
print(" ", tuple(round(v, 4) for v in kd_rows[0]))
print(" ", tuple(round(v, 4) for v in kd_rows[-1]))
print(f"\nper-iteration wall clock: KD {t_kd / 400 * 1e3:.1f} ms vs "
      f"fine-tune {t_ft / 400 * 1e3:.1f} ms (teacher forward each step)")
