"""Evaluate the forgetting bounds on a trained run.

Trains a 4-task stream, then scores every earlier task's test samples under
each later model. Prints how many records of each bound hold and shows a
few margin-bound records, where forgetting is compared with the mean
margin drop.
"""

from relcil.cli import execute
from relcil.config import from_dict
from relcil.metrics import max_identity_error, theory_report

cfg = from_dict({"stream": {"tasks": 4, "total_classes": 16}, "seed": 0}).resolved()
result, tasks = execute(cfg)
report = theory_report(result.backbone, result.head_history, tasks)

for name, c in sorted(report.counts().items()):
    print(f"{name:<18} {c['hold']:5d} / {c['records'] - c['excluded']:<5d} hold")
print(f"residual identity max relative error: {max_identity_error(report):.1e}")

print("\nmargin records (name s t lhs rhs holds):")
for r in report.by_name("lemma_margin"):
    print(" ", r.line())
# a negative rhs means margins grew on average; the bound has no slack for that case
