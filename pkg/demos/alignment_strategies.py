"""Compare every alignment strategy on one shared stream.

Same ablation as ``relcil ablate`` but with fewer epochs per task so it
finishes in about a minute. All variants see byte-identical data, which the
dataset hash confirms.
"""

from relcil.cli import ABLATION_VARIANTS, execute
from relcil.config import from_dict
from relcil.metrics import forgetting

rows = []
for strategy, norm in ABLATION_VARIANTS:
    cfg = from_dict(
        {"alignment": {"strategy": strategy, "normalize_features": norm}, "train": {"epochs": 8}, "seed": 1}
    ).resolved()
    result, _ = execute(cfg)
    rep = result.report()
    final_f = forgetting(result.accuracy.errors())[-1]
    rows.append((strategy, norm, rep["A_last"], rep["A_avg"], final_f, result.dataset_hash[:12]))
    print(f"{strategy:<13} norm={norm!s:<5} A_last={rep['A_last']:.3f}")

print(f"\n{'strategy':<13} {'norm':<5} {'A_last':>7} {'A_avg':>7} {'F_T':>7}  data")
for s, n, a, b, f, h in rows:
    print(f"{s:<13} {str(n):<5} {a:7.3f} {b:7.3f} {f:7.3f}  {h}")
