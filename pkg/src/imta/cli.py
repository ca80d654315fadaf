"""Command-line entry point for the imta toolkit.

Exit codes: 0 success, 2 usage error, 3 malformed input, 4 runtime failure.
Every run that writes files also writes a JSON manifest next to them.
"""

from __future__ import annotations

import argparse
import asyncio
import csv
import json
import logging
import math
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import __version__
from .detect_event import EventDetector, EventMatchConfig, MatchResult, correlate_events, format_match_csv
from .detect_shape import ShapeConfig, ShapeDetector, shape_decide
from .evaluation import (DEFAULT_THRESHOLDS, LabeledPair, associated_pairs, auc, auc_exact,
                         non_associated_pairs, observation_window, read_scores, roc, score_corpus,
                         tp_at_fp, write_scores, PairScore)
from .flow import Direction, FlowFormatError, read_flow, write_flow
from .model import ModelFormatError, default_model, load_model
from .obfuscate import ObfuscationConfig, OverheadReport, combine_reports, obfuscate_flow
from .synth import ChannelPair, Corpus, CorpusConfig, UserSimConfig, make_pair
from .trace import BurstConfig, TraceFormatError, extract_events, read_trace

log = logging.getLogger("imta")

EXIT_OK, EXIT_USAGE, EXIT_INPUT, EXIT_RUNTIME = 0, 2, 3, 4


class InputError(Exception):
    """Raised for unreadable or malformed inputs (exit code 3)."""


class UsageError(Exception):
    """Raised for argument combinations argparse cannot check (exit code 2)."""


@dataclass
class RunManifest:
    subcommand: str
    config: dict
    seed: int | None
    version: str = __version__
    argv: list[str] = field(default_factory=list)
    inputs: list[str] = field(default_factory=list)
    outputs: list[str] = field(default_factory=list)
    results: dict = field(default_factory=dict)

    def write(self, path: Path) -> None:
        path.write_text(json.dumps(asdict(self), indent=2, sort_keys=True, default=str) + "\n")


def _manifest(args, argv, inputs=(), outputs=(), results=None) -> RunManifest:
    cfg = {k: (str(v) if isinstance(v, Path) else v) for k, v in vars(args).items() if k != "func"}
    return RunManifest(args.command, cfg, getattr(args, "seed", None), argv=list(argv),
                       inputs=[str(p) for p in inputs], outputs=[str(p) for p in outputs], results=results or {})


def _file_manifest_path(out: Path) -> Path:
    return out.with_name(out.name + ".manifest.json")


# -- argument types -----------------------------------------------------------

def _positive_int(text: str) -> int:
    v = int(text)
    if v < 1:
        raise argparse.ArgumentTypeError(f"must be at least 1, got {v}")
    return v


def _positive_float(text: str) -> float:
    v = float(text)
    if not v > 0:
        raise argparse.ArgumentTypeError(f"must be positive, got {v}")
    return v


def _nonneg_float(text: str) -> float:
    v = float(text)
    if not v >= 0:
        raise argparse.ArgumentTypeError(f"must be non-negative, got {v}")
    return v


def _fraction(text: str) -> float:
    v = float(text)
    if not 0.0 <= v <= 1.0:
        raise argparse.ArgumentTypeError(f"must lie in [0, 1], got {v}")
    return v


def _load_model(path):
    return default_model() if path is None else load_model(path)


# -- synth --------------------------------------------------------------------

def _synth_one(job):
    model_path, index, cfg = job
    return make_pair(_load_model(model_path), index, cfg)


def cmd_synth(args, argv) -> int:
    model = _load_model(args.model)
    user = UserSimConfig(bandwidth=args.bandwidth, role=args.role)
    cfg = CorpusConfig(duration=args.hours * 3600.0, seed=args.seed, rate_per_day=args.rate, user=user)
    jobs = [(args.model, i, cfg) for i in range(args.channels)]
    if args.jobs > 1:
        with ProcessPoolExecutor(args.jobs) as ex:
            pairs = list(ex.map(_synth_one, jobs, chunksize=max(1, args.channels // (4 * args.jobs))))
    else:
        pairs = [make_pair(model, i, cfg) for i in range(args.channels)]

    out = args.out
    (out / "channels").mkdir(parents=True, exist_ok=True)
    (out / "users").mkdir(parents=True, exist_ok=True)
    counts = [0] * len(model.buckets)
    with (out / "corpus.csv").open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["index", "bucket", "rate_per_day", "channel_events", "user_events"])
        for p in pairs:
            write_flow(p.channel, out / "channels" / f"c{p.index:06d}.flow")
            write_flow(p.user, out / "users" / f"u{p.index:06d}.flow")
            w.writerow([p.index, p.bucket, repr(p.rate_per_day), len(p.channel), len(p.user)])
            counts[p.bucket] += 1
    results = {"bucket_counts": counts, "pairs": len(pairs)}
    _manifest(args, argv, [args.model] if args.model else [], [out / "channels", out / "users", out / "corpus.csv"],
              results).write(out / "manifest.json")
    print(f"wrote {len(pairs)} pairs to {out}; bucket counts {counts}")
    return EXIT_OK


def load_corpus(directory: Path) -> Corpus:
    index_file = directory / "corpus.csv"
    if not index_file.exists():
        raise InputError(f"{index_file}: no corpus index")
    pairs = []
    with index_file.open() as fh:
        for row in csv.DictReader(fh):
            i = int(row["index"])
            pairs.append(ChannelPair(i, int(row["bucket"]), float(row["rate_per_day"]),
                                     read_flow(directory / "channels" / f"c{i:06d}.flow"),
                                     read_flow(directory / "users" / f"u{i:06d}.flow")))
    if not pairs:
        raise InputError(f"{index_file}: corpus is empty")
    counts = [0] * (max(p.bucket for p in pairs) + 1)
    for p in pairs:
        counts[p.bucket] += 1
    return Corpus(tuple(pairs), tuple(counts))


# -- extract ------------------------------------------------------------------

def cmd_extract(args, argv) -> int:
    trace = read_trace(args.input, args.endpoint)
    direction = None if args.direction == "both" else Direction(args.direction)
    flow = extract_events(trace, BurstConfig(args.te, args.min_pkt, direction))
    out = args.out or args.input.with_suffix(".flow")
    write_flow(flow, out)
    _manifest(args, argv, [args.input], [out], {"packets": len(trace), "events": len(flow)}).write(
        _file_manifest_path(out))
    print(f"{len(trace)} packets -> {len(flow)} events, written to {out}")
    return EXIT_OK


# -- correlate / score ----------------------------------------------------------

def _detector(args):
    if args.detector == "event":
        return EventDetector(EventMatchConfig(args.delta, args.gamma, args.eta, args.skew_window, args.skew_step))
    return ShapeDetector(ShapeConfig(args.te, args.ts, args.eta, args.skew_window, args.skew_step))


def cmd_correlate(args, argv) -> int:
    channel = read_flow(args.channel)
    user = read_flow(args.user)
    if len(channel) == 0:
        raise InputError(f"{args.channel}: channel flow is empty")
    det = _detector(args)
    length = args.length if args.length > 0 else math.inf
    pair = LabeledPair(args.pair_id or f"{args.channel.stem}:{args.user.stem}", channel, user, True)
    ch, us = observation_window(channel, user, length)
    score, offset = det.score(ch, us, 0.0, None if math.isinf(length) else length)
    decision = shape_decide(score, args.eta)
    print(f"detector={det.tag} score={score:.6f} offset={offset:+.2f}s decision={decision}")
    if args.detector == "event" and args.matches:
        res = correlate_events(ch, us, det.cfg)
        args.matches.write_text(format_match_csv([(pair.pair_id, res)]))
    if args.out:
        rec = PairScore(pair.pair_id, not args.unassociated, score, float(args.length), det.tag, offset)
        write_scores([rec], args.out, append=True)
        _manifest(args, argv, [args.channel, args.user], [args.out], {"score": score, "offset": offset}).write(
            _file_manifest_path(args.out))
    return EXIT_OK


def cmd_score(args, argv) -> int:
    corpus = load_corpus(args.corpus)
    pairs = associated_pairs(corpus) + non_associated_pairs(corpus, args.negatives)
    det = _detector(args)
    scores = score_corpus(pairs, det, args.length, jobs=args.jobs)
    write_scores(scores, args.out)
    curve = roc(scores)
    results = {"auc": auc_exact(scores), "tp_at_fp_1e-2": tp_at_fp(curve, 1e-2)[0],
               "tp_at_fp_1e-3": tp_at_fp(curve, 1e-3)[0], "pairs": len(scores)}
    _manifest(args, argv, [args.corpus], [args.out], results).write(_file_manifest_path(args.out))
    print(f"scored {len(scores)} pairs; AUC {results['auc']:.4f}; TP at FP<=1e-2 {results['tp_at_fp_1e-2']:.3f}")
    return EXIT_OK


# -- roc ----------------------------------------------------------------------

def cmd_roc(args, argv) -> int:
    scores = []
    for path in args.scores:
        try:
            scores += read_scores(path)
        except ValueError as exc:
            raise InputError(str(exc)) from None
    thresholds = np.linspace(0.0, 1.0, args.thresholds) if args.thresholds else DEFAULT_THRESHOLDS
    try:
        curve = roc(scores, thresholds)
    except ValueError as exc:
        raise InputError(str(exc)) from None
    args.out.write_text(curve.to_csv())
    tp2, eta2 = tp_at_fp(curve, 1e-2)
    results = {"auc": auc(curve), "auc_exact": auc_exact(scores), "tp_at_fp_1e-2": tp2, "eta_at_fp_1e-2": eta2,
               "positives": curve.n_pos, "negatives": curve.n_neg}
    _manifest(args, argv, args.scores, [args.out], results).write(_file_manifest_path(args.out))
    print(f"AUC {results['auc']:.4f} ({curve.n_pos} associated, {curve.n_neg} not); "
          f"TP {tp2:.3f} at FP<=1e-2 (eta={eta2:.4f})")
    return EXIT_OK


# -- obfuscate ----------------------------------------------------------------

def cmd_obfuscate(args, argv) -> int:
    cfg = ObfuscationConfig.with_mean_delay(args.mean_delay, r_padding=args.r_padding, p_padding=args.p_padding,
                                            seed=args.seed)
    args.out.mkdir(parents=True, exist_ok=True)
    reports = []
    outputs = []
    with (args.out / "overhead.csv").open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["flow"] + OverheadReport.csv_header())
        for i, path in enumerate(args.inputs):
            flow = read_flow(path)
            duration = args.duration if args.duration is not None else (
                math.ceil(flow.events[-1].time) + 1 if len(flow) else 0.0)
            rng = np.random.default_rng([args.seed, i])
            merge = args.merge if args.merge > 0 else None
            obf, rep = obfuscate_flow(flow, duration, cfg, rng, merge_threshold=merge)
            dest = args.out / (path.stem + ".obf")
            write_flow(obf, dest, obfuscated=True)
            outputs.append(dest)
            reports.append(rep)
            w.writerow([path.name] + rep.csv_row())
    total = combine_reports(reports)
    results = {"overhead": total.overhead, "expected_overhead": total.expected_overhead,
               "added_latency_s": total.added_latency}
    _manifest(args, argv, args.inputs, outputs + [args.out / "overhead.csv"], results).write(args.out / "manifest.json")
    exp = "n/a" if total.expected_overhead is None else f"{total.expected_overhead:.4f}"
    print(f"{len(reports)} flows; overhead {total.overhead:.4f} (expected {exp}); "
          f"added latency {total.added_latency:.3f}s")
    return EXIT_OK


# -- proxy --------------------------------------------------------------------

def cmd_proxy(args, argv) -> int:
    from .improxy import LocalProxy, RemoteProxy, capture_side_channel, load_proxy_config
    from .trace import write_line_trace

    cfg = load_proxy_config(args.config)
    if args.seed is not None:
        from dataclasses import replace
        cfg = replace(cfg, seed=args.seed)
    proxy = LocalProxy(cfg, capture=bool(args.capture)) if args.role == "local" else \
        RemoteProxy(cfg, capture=bool(args.capture))

    async def serve():
        host, port = await proxy.start()
        print(f"{args.role} proxy listening on {host}:{port}", flush=True)
        try:
            await proxy.serve_forever()
        finally:
            await proxy.close()

    try:
        asyncio.run(serve())
    except KeyboardInterrupt:
        pass
    finally:
        if args.capture:
            args.capture.mkdir(parents=True, exist_ok=True)
            for s in proxy.sessions:
                write_line_trace(capture_side_channel(s), args.capture / f"session{s.id:05d}.trace")
    return EXIT_OK


# -- rerun --------------------------------------------------------------------

def cmd_rerun(args, argv) -> int:
    try:
        manifest = json.loads(args.manifest.read_text())
        old_argv = manifest["argv"]
    except (OSError, ValueError, KeyError) as exc:
        raise InputError(f"{args.manifest}: not a run manifest ({exc})") from None
    if old_argv and old_argv[0] == "rerun":
        raise UsageError("refusing to rerun a rerun manifest")
    return main(old_argv)


# -- parser -------------------------------------------------------------------

def _add_detector_args(p: argparse.ArgumentParser) -> None:
    p.add_argument("--detector", choices=["event", "shape"], default="event",
                   help="event: matched-event ratio; shape: normalized shape correlation (default: event)")
    p.add_argument("--delta", type=_positive_float, default=3.0,
                   help="event timing tolerance in seconds (default: 3)")
    p.add_argument("--gamma", type=_nonneg_float, default=10_000.0,
                   help="event size tolerance in bytes (default: 10000, i.e. 10 KB)")
    p.add_argument("--ts", type=_positive_float, default=0.01, help="shape bin width in seconds (default: 0.01)")
    p.add_argument("--te", type=_positive_float, default=0.5,
                   help="burst threshold; shape bars are 2*te wide (default: 0.5 s)")
    p.add_argument("--eta", type=_fraction, default=0.5, help="decision threshold in [0,1] (default: 0.5)")
    p.add_argument("--skew-window", type=_nonneg_float, default=10.0,
                   help="clock-skew search half-width in seconds, 0 disables (default: 10)")
    p.add_argument("--skew-step", type=_positive_float, default=0.5,
                   help="clock-skew search step in seconds (default: 0.5)")
    p.add_argument("--length", type=_nonneg_float, default=900.0,
                   help="observation length in seconds of active time, 0 for all (default: 900)")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="imta", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"imta {__version__}")
    parser.add_argument("-v", "--verbose", action="count", default=0, help="more logging (repeatable)")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a corpus of channel/user flow pairs")
    p.add_argument("--channels", type=_positive_int, required=True, help="number of channels")
    p.add_argument("--rate", type=_positive_float, default=None,
                   help="messages/day for every channel (default: cycle the five rate buckets)")
    p.add_argument("--hours", type=_positive_float, default=24.0, help="duration per channel (default: 24)")
    p.add_argument("--bandwidth", type=_positive_float, default=1e6,
                   help="user bandwidth in bits/s (default: 1e6)")
    p.add_argument("--role", choices=["admin", "member"], default="admin",
                   help="admin: user uploads the posts; member: user downloads them (default: admin)")
    p.add_argument("--model", type=Path, default=None, help="traffic model TOML (default: bundled model)")
    p.add_argument("--seed", type=int, default=0, help="master seed (default: 0)")
    p.add_argument("--jobs", type=_positive_int, default=1, help="worker processes (default: 1)")
    p.add_argument("--out", type=Path, required=True, help="output directory")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("extract", help="extract events from a pcap or line trace")
    p.add_argument("--in", dest="input", type=Path, required=True, help="trace.pcap or trace.tsv")
    p.add_argument("--te", type=_positive_float, default=0.5, help="burst gap threshold in seconds (default: 0.5)")
    p.add_argument("--min-pkt", type=int, default=512,
                   help="packets smaller than this many bytes are ignored (default: 512)")
    p.add_argument("--endpoint", default=None, help="client IP address; pcap packets it sends are upstream")
    p.add_argument("--direction", choices=["up", "down", "both"], default="both",
                   help="which direction to extract (default: both)")
    p.add_argument("--seed", type=int, default=None, help="accepted for uniformity; extraction is deterministic")
    p.add_argument("--out", type=Path, default=None, help="output flow file (default: input with .flow suffix)")
    p.set_defaults(func=cmd_extract)

    p = sub.add_parser("correlate", help="score one channel/user flow pair")
    p.add_argument("--channel", type=Path, required=True)
    p.add_argument("--user", type=Path, required=True)
    _add_detector_args(p)
    p.add_argument("--pair-id", default=None)
    p.add_argument("--unassociated", action="store_true", help="label the pair as not associated in the CSV")
    p.add_argument("--matches", type=Path, default=None, help="write the event match record as CSV")
    p.add_argument("--seed", type=int, default=None, help="accepted for uniformity; scoring is deterministic")
    p.add_argument("--out", type=Path, default=None, help="append the score to this CSV")
    p.set_defaults(func=cmd_correlate)

    p = sub.add_parser("score", help="score all associated and same-bucket unassociated pairs of a corpus")
    p.add_argument("--corpus", type=Path, required=True, help="directory written by synth")
    _add_detector_args(p)
    p.add_argument("--negatives", type=_positive_int, default=10,
                   help="unassociated users per channel (default: 10)")
    p.add_argument("--jobs", type=_positive_int, default=1)
    p.add_argument("--seed", type=int, default=None, help="accepted for uniformity; scoring is deterministic")
    p.add_argument("--out", type=Path, required=True, help="score CSV")
    p.set_defaults(func=cmd_score)

    p = sub.add_parser("roc", help="ROC curve from score files")
    p.add_argument("--scores", type=Path, nargs="+", required=True)
    p.add_argument("--thresholds", type=_positive_int, default=None,
                   help="number of evenly spaced thresholds in [0,1] (default: 512)")
    p.add_argument("--seed", type=int, default=None, help="accepted for uniformity; the ROC is deterministic")
    p.add_argument("--out", type=Path, required=True, help="ROC CSV (eta,tp,fp)")
    p.set_defaults(func=cmd_roc)

    p = sub.add_parser("obfuscate", help="pad, inject dummies into and delay flow files")
    p.add_argument("--in", dest="inputs", type=Path, nargs="+", required=True)
    p.add_argument("--r-padding", type=_nonneg_float, default=0.0, help="per-event padding cap (default: 0)")
    p.add_argument("--p-padding", type=_fraction, default=0.0,
                   help="dummy probability per silent second (default: 0)")
    p.add_argument("--mean-delay", type=_nonneg_float, default=0.0,
                   help="mean exponential delay in seconds on downstream flows, 0 disables (default: 0)")
    p.add_argument("--duration", type=_nonneg_float, default=None,
                   help="seconds covered by dummy injection (default: through the last event)")
    p.add_argument("--merge", type=_nonneg_float, default=0.0,
                   help="re-merge events closer than this many seconds, 0 keeps them apart (default: 0)")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", type=Path, required=True, help="output directory")
    p.set_defaults(func=cmd_obfuscate)

    p = sub.add_parser("proxy", help="run the local SOCKS5 proxy or its remote peer")
    p.add_argument("role", choices=["local", "remote"])
    p.add_argument("--config", type=Path, required=True, help="proxy TOML configuration")
    p.add_argument("--capture", type=Path, default=None, help="directory for per-session wire traces on exit")
    p.add_argument("--seed", type=int, default=None, help="seed for padding/delay draws (default: OS entropy)")
    p.set_defaults(func=cmd_proxy)

    p = sub.add_parser("rerun", help="repeat the run recorded in a manifest")
    p.add_argument("manifest", type=Path)
    p.set_defaults(func=cmd_rerun)
    return parser


def main(argv: list[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2),
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args, argv)
    except UsageError as exc:
        print(f"imta {args.command}: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (InputError, FlowFormatError, TraceFormatError, ModelFormatError, FileNotFoundError,
            IsADirectoryError) as exc:
        print(f"imta {args.command}: input error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except Exception as exc:  # noqa: BLE001 - report anything else as a runtime failure
        from .improxy.config import ProxyConfigError
        if isinstance(exc, ProxyConfigError):
            print(f"imta {args.command}: input error: {exc}", file=sys.stderr)
            return EXIT_INPUT
        log.debug("runtime failure", exc_info=True)
        print(f"imta {args.command}: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
