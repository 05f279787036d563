"""Train the defense on the first synthetic cohort and print the stage metrics.

    python3 scripts/desk_defense.py --hidden 64 --users 20 --out runs/desk
"""
import argparse
import json
import logging
import time
from pathlib import Path

from motionmask.bundle import load_bundle, save_bundle
from motionmask.models import ArchitectureConfig, EncoderConfig, NormalizerConfig
from motionmask.pipeline import DefenseConfig, desk_cohorts, stage_anonymizer, stage_normalizer, train_defense


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--users", type=int, default=20)
    ap.add_argument("--activities", type=int, default=10)
    ap.add_argument("--recordings", type=int, default=20)
    ap.add_argument("--hidden", type=int, default=256)
    ap.add_argument("--pairs", type=int, default=400)
    ap.add_argument("--sim-epochs", type=int, default=30)
    ap.add_argument("--anon-epochs", type=int, default=30)
    ap.add_argument("--alpha", type=float, default=1.0)
    ap.add_argument("--beta", type=float, default=1.0)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--anon-pairs", type=int, default=400)
    ap.add_argument("--resume", type=Path, help="bundle whose similarity models are reused")
    ap.add_argument("--out", type=Path, default=Path("runs/desk"))
    args = ap.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(message)s")

    # the second cohort is reserved for the re-identification attack
    cohorts = desk_cohorts(args.users, args.activities, args.recordings, seed=args.seed)
    h = args.hidden
    arch = ArchitectureConfig(encoder=EncoderConfig(frame_state_dim=h, summary_dim=h, embedding_dim=h,
                                                    hidden_dense_dims=(h,)),
                              normalizer=NormalizerConfig(state_dim=h))
    dcfg = DefenseConfig.desk(arch=arch, pairs_per_class=args.pairs, sim_epochs=args.sim_epochs,
                         anon_epochs=args.anon_epochs, anon_pairs=args.anon_pairs, alpha_action=args.alpha, beta_user=args.beta, seed=args.seed)
    t0 = time.time()
    if args.resume:
        bundle = load_bundle(args.resume)
        dcfg.arch = bundle.arch
        reports = {}
        pre, adv = stage_anonymizer(bundle, cohorts.defense, cohorts.windows, dcfg)
        reports["anonymizer_pretrain"], reports["anonymizer"] = pre, adv
        reports["normalizer"] = stage_normalizer(bundle, cohorts.defense, cohorts.windows, dcfg)
    else:
        bundle, reports = train_defense(cohorts.defense, cohorts.windows, dcfg)
    args.out.mkdir(parents=True, exist_ok=True)
    save_bundle(bundle, args.out / "bundle.zip")
    summary = {k: r.metrics for k, r in reports.items()}
    summary["wall_clock_s"] = time.time() - t0
    (args.out / "metrics.json").write_text(json.dumps(summary, indent=1))
    print(json.dumps(summary, indent=1))


if __name__ == "__main__":
    main()
