"""Re-identification table for a trained bundle on the held-out synthetic cohort.

    python3 scripts/desk_evaluate.py --bundle runs/h64/bundle.zip --hidden 64 --out runs/h64/eval
"""
import argparse
import json
import logging
from pathlib import Path

from motionmask.bundle import load_bundle
from motionmask.evaluation import emit_report, run_table
from motionmask.models import EncoderConfig
from motionmask.pipeline import desk_cohorts
from motionmask.training import TrainConfig


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--bundle", type=Path, required=True)
    ap.add_argument("--hidden", type=int, default=256)
    ap.add_argument("--epochs", type=int, default=60)
    ap.add_argument("--patience", type=int, default=10)
    ap.add_argument("--tabular", action="store_true", help="also run the summary-statistic baseline")
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--out", type=Path, required=True)
    args = ap.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(message)s")

    cohorts = desk_cohorts(seed=args.seed)
    bundle = load_bundle(args.bundle)
    h = args.hidden
    enc = EncoderConfig(frame_state_dim=h, summary_dim=h, embedding_dim=h, hidden_dense_dims=(h,))
    cfg = TrainConfig(max_epochs=args.epochs, patience=args.patience, seed=args.seed)
    idents = ("lstm_funnel", "summary_stats_tabular") if args.tabular else ("lstm_funnel",)
    reports = run_table(cohorts.attack, cohorts.windows, bundle, cfg, enc, idents, seed=args.seed)
    users = cohorts.attack.users
    emit_report(reports, args.out, {"cohort": {"users": len(users), "chance": 1 / len(users)}})
    print((args.out / "report.md").read_text())
    print(json.dumps([r.to_dict() for r in reports], indent=1))


if __name__ == "__main__":
    main()
