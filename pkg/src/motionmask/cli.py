"""Command-line front end.

Every command takes ``--seed`` and ``--config`` (a YAML or JSON mapping from
option names to values; explicit flags win). Exit codes: 0 success, 1 usage
or missing prerequisite, 2 bad input data, 3 training or evaluation failure.
"""
from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path

import yaml

from .bundle import BundleError, ModelBundle, load_bundle, save_bundle
from .core import FPS, InvalidInputError
from .dataset import (
    IngestError,
    Manifest,
    SamplingError,
    SplitError,
    format_frame,
    ingest,
    parse_frame,
    prepare_windows,
    read_recording,
    split_recordings,
    split_sessions,
    write_recording,
)
from .evaluation import (
    DEFENSES,
    IDENTIFIERS,
    KINDS,
    AdversaryScenario,
    EvaluationError,
    LeakageError,
    emit_report,
    load_report,
    render_markdown,
    run_scenario,
)
from .models import ArchitectureConfig, EncoderConfig, NormalizerConfig
from .pipeline import DefenseConfig, stage_anonymizer, stage_normalizer, stage_similarity
from .runtime import (
    StreamResampler,
    UsageError,
    anonymize_recording,
    benchmark_latency,
    fresh_noise,
    stream_open,
    stream_step_array,
)
from .synth import synth_generate
from .training import ConfigurationError, TrainConfig, TrainingError, train_identifier

log = logging.getLogger("motionmask")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_TRAINING = 0, 1, 2, 3
TRAIN_STAGES = ("identifier", "action-sim", "user-sim", "anonymizer", "normalizer")
PREREQUISITE = {"anonymizer": "train action-sim` and `motionmask train user-sim",
                "normalizer": "train anonymizer"}


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _add_common(p):
    p.add_argument("--seed", type=int, default=0, help="seed for every random choice (default 0)")
    p.add_argument("--config", type=Path, help="YAML/JSON file of option defaults")
    p.add_argument("--log-level", default="INFO", help="logging level (default INFO)")


def _add_hparams(p):
    g = p.add_argument_group("model and training hyperparameters")
    g.add_argument("--hidden", type=int, default=256, help="LSTM state width of encoders and normalizer")
    g.add_argument("--lr", type=float, default=1e-3, help="Adam learning rate")
    g.add_argument("--epochs", type=int, default=500, help="identifier epoch cap")
    g.add_argument("--patience", type=int, default=25, help="identifier early-stopping patience")
    g.add_argument("--batch-size", type=int, default=32)
    g.add_argument("--split", type=float, nargs=3, default=(0.7, 0.15, 0.15), metavar=("TRAIN", "VAL", "TEST"),
                   help="per-user recording split fractions when the manifest has none")
    skip = {"arch", "seed", "lr"}
    for f in dataclasses.fields(DefenseConfig):
        if f.name in skip:
            continue
        g.add_argument("--" + f.name.replace("_", "-"), type=type(f.default), default=f.default,
                       help=f"defense {f.name} (default {f.default})")


def build_parser() -> argparse.ArgumentParser:
    ap = _Parser(prog="motionmask", description=__doc__.splitlines()[0])
    sub = ap.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("synth", help="generate a synthetic corpus of JSON-lines recordings")
    p.add_argument("--out", type=Path, required=True, help="output directory")
    p.add_argument("--users", type=int, default=20)
    p.add_argument("--activities", type=int, default=10)
    p.add_argument("--recordings", type=int, default=20, help="recordings per user")
    p.add_argument("--duration", type=float, default=36.0, help="seconds per recording")
    _add_common(p)

    p = sub.add_parser("ingest", help="scan a directory of recordings into a manifest")
    p.add_argument("path", type=Path)
    p.add_argument("--out", type=Path, help="manifest path (default PATH/manifest.json)")
    p.add_argument("--strict", action="store_true", help="fail on any rejected recording")
    _add_common(p)

    p = sub.add_parser("train", help="train one stage and store it in a bundle")
    p.add_argument("stage", choices=TRAIN_STAGES)
    p.add_argument("--manifest", type=Path, required=True)
    p.add_argument("--bundle", type=Path, required=True, help="bundle to extend (created if missing)")
    _add_hparams(p)
    _add_common(p)

    p = sub.add_parser("anonymize", help="anonymize one recording after the fact")
    p.add_argument("--bundle", type=Path, required=True)
    p.add_argument("--input", type=Path, required=True)
    p.add_argument("--output", type=Path, required=True)
    _add_common(p)

    p = sub.add_parser("stream", help="anonymize JSON frames from stdin to stdout, one per line")
    p.add_argument("--bundle", type=Path, required=True)
    p.add_argument("--resample", action="store_true",
                   help="resample irregular input timestamps to 30 fps (adds one frame of delay)")
    _add_common(p)

    p = sub.add_parser("evaluate", help="cross-session re-identification scenarios")
    p.add_argument("--manifest", type=Path, required=True)
    p.add_argument("--bundle", type=Path, help="trained defense (needed for deep_motion_masking)")
    p.add_argument("--scenario", action="append", metavar="KIND:DEFENSE:IDENTIFIER",
                   help=f"kind in {KINDS}, defense in {DEFENSES}, identifier in {IDENTIFIERS}; "
                        "repeatable, default every cell")
    p.add_argument("--users", type=int, default=20)
    p.add_argument("--per-session", type=int, default=10)
    p.add_argument("--out", type=Path, required=True, help="report directory")
    _add_hparams(p)
    _add_common(p)

    p = sub.add_parser("bench", help="per-frame streaming latency")
    p.add_argument("--bundle", type=Path, help="default: randomly initialized full-size bundle")
    p.add_argument("--frames", type=int, default=2000)
    _add_common(p)

    p = sub.add_parser("report", help="render a report.json as markdown")
    p.add_argument("report", type=Path)
    _add_common(p)
    return ap


def _apply_config(ap: argparse.ArgumentParser, argv) -> None:
    pre = argparse.ArgumentParser(add_help=False)
    pre.add_argument("--config", type=Path)
    known, _ = pre.parse_known_args(argv)
    if known.config is None:
        return
    try:
        values = yaml.safe_load(known.config.read_text(encoding="utf-8")) or {}
    except (OSError, yaml.YAMLError) as exc:
        raise UsageError(f"cannot read config {known.config}: {exc}") from exc
    if not isinstance(values, dict):
        raise UsageError("config must be a mapping of option names to values")
    values = {k.replace("-", "_"): v for k, v in values.items()}
    subs = next(a for a in ap._actions if isinstance(a, argparse._SubParsersAction)).choices
    known_dests = set()
    for sp in subs.values():
        dests = {a.dest for a in sp._actions}
        known_dests |= dests
        sp.set_defaults(**{k: v for k, v in values.items() if k in dests})
    unknown = sorted(set(values) - known_dests)
    if unknown:
        raise UsageError(f"unknown config option(s): {', '.join(unknown)}")


# --- helpers ---------------------------------------------------------------

def _arch(args) -> ArchitectureConfig:
    h = args.hidden
    return ArchitectureConfig(
        encoder=EncoderConfig(frame_state_dim=h, summary_dim=h, embedding_dim=h, hidden_dense_dims=(h,)),
        normalizer=NormalizerConfig(state_dim=h))


def _defense_config(args, arch) -> DefenseConfig:
    kw = {f.name: getattr(args, f.name) for f in dataclasses.fields(DefenseConfig)
          if f.name not in ("arch", "seed", "lr")}
    return DefenseConfig(arch=arch, lr=args.lr, seed=args.seed, **kw)


def _identifier_config(args) -> TrainConfig:
    return TrainConfig(lr=args.lr, max_epochs=args.epochs, patience=args.patience,
                       batch_size=args.batch_size, seed=args.seed)


def _load_windows(path: Path):
    manifest = Manifest.load(path)
    if not manifest.entries:
        raise InvalidInputError(f"manifest {path} lists no recordings")
    return manifest, prepare_windows(manifest)


def _emit(obj) -> None:
    print(json.dumps(obj, indent=1, sort_keys=True))


# --- commands --------------------------------------------------------------

def cmd_synth(args) -> int:
    corpus = synth_generate(args.users, args.activities, args.recordings, seed=args.seed, duration=args.duration)
    manifest = corpus.write(args.out)
    manifest.save(args.out / "manifest.json")
    log.info("wrote %d recordings of %d users to %s", len(manifest), len(manifest.users), args.out)
    return EXIT_OK


def cmd_ingest(args) -> int:
    manifest = ingest(args.path, strict=args.strict)
    out = args.out or args.path / "manifest.json"
    manifest.save(out)
    _emit({"manifest": str(out), "recordings": len(manifest), "users": len(manifest.users),
           "rejected": [{"path": str(r.path), "reason": r.reason} for r in manifest.rejected]})
    return EXIT_OK


def cmd_train(args) -> int:
    if args.bundle.exists():
        bundle = load_bundle(args.bundle)
    elif args.stage in PREREQUISITE:
        raise ConfigurationError(f"no bundle at {args.bundle}; run `motionmask {PREREQUISITE[args.stage]}` first")
    else:
        bundle = ModelBundle(_arch(args))
    manifest, windows = _load_windows(args.manifest)
    if not any(v == "train" for v in manifest.splits.values()):
        manifest = split_recordings(manifest, tuple(args.split), seed=args.seed)
    dcfg = _defense_config(args, bundle.arch)
    if args.stage == "identifier":
        model, report = train_identifier(manifest, windows, _identifier_config(args), bundle.arch.encoder)
        bundle.identifier = model
        reports = [report]
    elif args.stage in ("action-sim", "user-sim"):
        reports = [stage_similarity(bundle, args.stage, manifest, windows, dcfg)]
    elif args.stage == "anonymizer":
        reports = stage_anonymizer(bundle, manifest, windows, dcfg)
    else:
        reports = [stage_normalizer(bundle, manifest, windows, dcfg)]
    bundle.meta.setdefault("train_users", sorted(manifest.users))
    bundle.meta.setdefault("reports", {})
    for r in reports:
        bundle.meta["reports"][r.name] = {"metrics": r.metrics, "stopped_epoch": r.stopped_epoch}
    save_bundle(bundle, args.bundle)
    _emit({r.name: r.metrics for r in reports})
    return EXIT_OK


def cmd_anonymize(args) -> int:
    bundle = load_bundle(args.bundle)
    meta, seq = read_recording(args.input)
    out = anonymize_recording(seq, bundle, rng=args.seed)
    write_recording(args.output, replace(meta, fps=FPS), out)
    return EXIT_OK


def _is_header(line: str) -> bool:
    try:
        d = json.loads(line)
    except json.JSONDecodeError:
        return False
    return isinstance(d, dict) and "t" not in d and "user_id" in d


def cmd_stream(args) -> int:
    bundle = load_bundle(args.bundle)
    bundle.require_runtime()
    noise = fresh_noise(args.seed, bundle.arch.anonymizer.noise_dim)
    state = None
    resampler = StreamResampler() if args.resample else None
    out = sys.stdout
    for n, line in enumerate(sys.stdin, start=1):
        if not line.strip():
            continue
        if n == 1 and _is_header(line):
            out.write(line.rstrip("\n") + "\n")  # recording header passes through
            out.flush()
            continue
        try:
            t, row = parse_frame(line)
        except InvalidInputError as exc:
            raise InvalidInputError(f"stdin line {n}: {exc}") from exc
        frames = resampler.push(t, row) if resampler else [(t, row)]
        for ft, frow in frames:
            if state is None:
                state = stream_open(bundle, frow, noise)
            out.write(format_frame(ft, stream_step_array(state, frow)) + "\n")
            out.flush()
    return EXIT_OK


def _scenarios(specs) -> list[AdversaryScenario]:
    if not specs:
        return [AdversaryScenario(k, d, i) for i in IDENTIFIERS for d in DEFENSES for k in KINDS]
    out = []
    for spec in specs:
        parts = spec.split(":")
        if len(parts) != 3:
            raise UsageError(f"scenario {spec!r} must look like KIND:DEFENSE:IDENTIFIER")
        try:
            out.append(AdversaryScenario(*parts))
        except ValueError as exc:
            raise UsageError(str(exc)) from exc
    return out


def cmd_evaluate(args) -> int:
    scenarios = _scenarios(args.scenario)
    bundle = None
    if args.bundle is not None:
        bundle = load_bundle(args.bundle)
    elif any(s.defense == "deep_motion_masking" for s in scenarios):
        raise ConfigurationError("deep_motion_masking scenarios need --bundle; build one with "
                                 "`motionmask train action-sim|user-sim|anonymizer|normalizer`")
    manifest = Manifest.load(args.manifest)
    sessions = split_sessions(manifest, args.users, args.per_session, seed=args.seed)
    overlap = sorted(set(sessions.users) & set((bundle.meta if bundle else {}).get("train_users", [])))
    if overlap:
        log.warning("evaluation users overlap the defense training users: %s", overlap)
    windows = prepare_windows(sessions)
    cfg = _identifier_config(args)
    enc = _arch(args).encoder
    cache: dict = {}
    reports = [run_scenario(s, sessions, windows, bundle, cfg, enc, args.seed, cache) for s in scenarios]
    extra = {"cohort": {"users": len(sessions.users), "per_session": args.per_session,
                        "chance": 1.0 / len(sessions.users)}}
    jp, mp = emit_report(reports, args.out, extra)
    print(mp.read_text(encoding="utf-8"), end="")
    return EXIT_OK


def cmd_bench(args) -> int:
    bundle = load_bundle(args.bundle) if args.bundle else ModelBundle.untrained(seed=args.seed)
    _emit(benchmark_latency(bundle, n_frames=args.frames, seed=args.seed))
    return EXIT_OK


def cmd_report(args) -> int:
    extra = json.loads(args.report.read_text(encoding="utf-8")).get("extra", {})
    print(render_markdown(load_report(args.report), extra), end="")
    return EXIT_OK


COMMANDS = {"synth": cmd_synth, "ingest": cmd_ingest, "train": cmd_train, "anonymize": cmd_anonymize,
            "stream": cmd_stream, "evaluate": cmd_evaluate, "bench": cmd_bench, "report": cmd_report}


def main(argv=None) -> int:
    argv = sys.argv[1:] if argv is None else list(argv)
    ap = build_parser()
    try:
        _apply_config(ap, argv)
        args = ap.parse_args(argv)
        logging.basicConfig(level=getattr(logging, str(args.log_level).upper(), logging.INFO),
                            format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
        return COMMANDS[args.command](args)
    except (UsageError, ConfigurationError) as exc:
        print(f"motionmask: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (InvalidInputError, IngestError, SplitError, SamplingError, BundleError, LeakageError,
            json.JSONDecodeError, OSError) as exc:
        print(f"motionmask: data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (TrainingError, EvaluationError) as exc:
        print(f"motionmask: {exc}", file=sys.stderr)
        return EXIT_TRAINING
    except ValueError as exc:
        print(f"motionmask: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
