"""Train the full model and its unary-only ablation on the synthetic HMM corpus.

Prints the evaluation table (judge perplexities and sample statistics) and the
training-stability check, and writes both plus the per-epoch logs to ``--out``.

    python3 scripts/desk_table2.py --out runs/desk
"""

import argparse
import dataclasses
import json
import logging
from pathlib import Path

from crfgen.evaluation import format_table, write_report
from crfgen.experiments import DeskSetup, desk_table2, stable_after_warmup, warmup_epochs


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--out", type=Path, default=Path("runs/desk"))
    ap.add_argument("--lr", type=float)
    ap.add_argument("--batch-size", type=int)
    ap.add_argument("--epochs", type=int)
    ap.add_argument("--kl-warmup", type=int)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(message)s")

    setup = DeskSetup(seed=args.seed)
    overrides = {k: v for k, v in (("lr", args.lr), ("batch_size", args.batch_size),
                                   ("epochs", args.epochs), ("kl_warmup", args.kl_warmup))
                 if v is not None}
    setup.train = dataclasses.replace(setup.train, seed=args.seed, **overrides)
    result = desk_table2(setup)

    args.out.mkdir(parents=True, exist_ok=True)
    write_report(result.rows, args.out)
    print(format_table(result.rows))
    summary = {"seconds": result.seconds, "train": dataclasses.asdict(setup.train)}
    for label, tlog in result.logs.items():
        tlog.write_csv(args.out / f"trainlog-{label}.csv")
        first = warmup_epochs(setup.train, result.batches_per_epoch)
        ok, worst = stable_after_warmup(tlog, first)
        summary[label] = {"stable": ok, "worst_drop": worst, "first_checked_epoch": first}
        print(f"{label}: ELBO stable after epoch {first}: {ok} (worst smoothed drop {worst:.4f})")
    (args.out / "summary.json").write_text(json.dumps(summary, indent=2) + "\n")
    print(f"total {result.seconds:.0f}s")


if __name__ == "__main__":
    main()
