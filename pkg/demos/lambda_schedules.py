"""Constant versus decaying alignment weights.

Prints the per-epoch lambda of each schedule, then trains a 5-task stream
with each one and reports final accuracy.
"""

from relcil.cli import execute
from relcil.config import from_dict
from relcil.trainer import LAMBDA_SCHEDULES, lambda_at

EPOCHS = 10
for name in LAMBDA_SCHEDULES:
    vals = [lambda_at(name, 1.0, e, EPOCHS) for e in range(EPOCHS)]
    print(f"{name:<12}", " ".join(f"{v:.2f}" for v in vals))

print()
for name in LAMBDA_SCHEDULES:
    cfg = from_dict(
        {"stream": {"tasks": 5}, "train": {"epochs": EPOCHS, "lambda_schedule": name}, "seed": 0}
    ).resolved()
    result, _ = execute(cfg)
    print(f"{name:<12} A_last={result.report()['A_last']:.3f}")
