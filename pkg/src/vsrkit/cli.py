"""Command-line entry point: ``vsrkit <command> [options]``.

Exit codes: 0 ok, 2 usage or config error, 3 data error, 4 numeric failure.
Errors are reported as one line on standard error. Every output file is
written to a temporary name and renamed into place only when the command
succeeds, so a failed run leaves no partial artifacts.
"""

from __future__ import annotations

import argparse
import json
import logging
import math
import os
import sys
import tempfile
from dataclasses import replace
from pathlib import Path

from .config import ConfigError, RunConfig, load_config
from .decoding import DecodeParams, batch_decode, format_nbest
from .metrics import corpus_score, format_hypotheses, normalize, read_hypotheses
from .model import CheckpointError, VSRModel, build_lm, decode_checkpoint, encode_checkpoint
from .rover import rover_fuse
from .tensor import NonFiniteError
from .training import DivergenceError, Sample, train_lm, train_toy
from .video import (
    AugmentPolicy,
    ManifestEntry,
    VideoFormatError,
    augment,
    encode_vten,
    format_manifest,
    read_manifest,
    speed_perturb,
    synth_corpus,
    utterance_rng,
)
from .vocab import Vocabulary

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4

log = logging.getLogger("vsrkit")


class UsageError(Exception):
    pass


class DataError(Exception):
    pass


class Outputs:
    """Collects outputs under temporary names; ``commit`` renames them all into place."""

    def __init__(self):
        self.pending: list[tuple[Path, Path]] = []

    def write(self, path, data: bytes | str) -> None:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        if isinstance(data, str):
            data = data.encode("utf-8")
        fd, tmp = tempfile.mkstemp(prefix=f".{path.name}.", suffix=".part", dir=path.parent)
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        self.pending.append((Path(tmp), path))

    def commit(self) -> None:
        for tmp, final in self.pending:
            os.replace(tmp, final)
        self.pending.clear()

    def discard(self) -> None:
        for tmp, _ in self.pending:
            tmp.unlink(missing_ok=True)
        self.pending.clear()


def _rate_tag(rate: float) -> str:
    return f"_sp{float(rate)}"


def _parse_floats(text: str) -> list[float]:
    try:
        vals = [float(x) for x in text.split(",") if x.strip()]
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from exc
    if not vals:
        raise argparse.ArgumentTypeError("empty list")
    return vals


# ---------------------------------------------------------------- commands


def cmd_synth_data(args, cfg: RunConfig, out: Outputs) -> None:
    s = cfg.synth
    vocab = Vocabulary(tuple(s.vocab))
    root = Path(args.out)
    counts = {"train": args.train_count if args.train_count is not None else s.train_count,
              "dev": args.dev_count if args.dev_count is not None else s.dev_count}
    for split, count in counts.items():
        entries = []
        for uid, video, text in synth_corpus(vocab, split, count, cfg.seed, s.size, s.frames_per_token,
                                             s.min_tokens, s.max_tokens, s.noise):
            out.write(root / split / f"{uid}.vten", encode_vten(video.frames))
            entries.append(ManifestEntry(uid, f"{uid}.vten", text))
        out.write(root / split / "manifest.tsv", format_manifest(entries))


def _salt(policy: AugmentPolicy) -> tuple[int, ...]:
    # a zero salt keeps the stream of an unsalted run
    return (policy.rng_seed,) if policy.rng_seed else ()


def cmd_augment(args, cfg: RunConfig, out: Outputs) -> None:
    manifest = read_manifest(args.manifest)
    rates = args.rates or cfg.speed_rates
    if args.policy == "default":
        policy = AugmentPolicy()
    elif args.policy == "config":
        policy = cfg.policy()
    else:
        policy = AugmentPolicy.identity()
    root = Path(args.out)
    entries = []
    for e in manifest:
        video = manifest.load_video(e)
        for rate in rates:
            uid = e.utterance_id + _rate_tag(rate)
            clip = augment(speed_perturb(video, rate), policy, utterance_rng(cfg.seed, uid, *_salt(policy)))
            out.write(root / f"{uid}.vten", encode_vten(clip.frames))
            entries.append(ManifestEntry(uid, f"{uid}.vten", e.transcript))
    out.write(root / "manifest.tsv", format_manifest(entries))


def _load_samples(manifest_path, model: VSRModel) -> list[Sample]:
    manifest = read_manifest(manifest_path)
    vocab = model.vocab
    samples = []
    for e in manifest:
        unknown = sorted(set(normalize(e.transcript)) - set(vocab.content_tokens))
        if unknown:
            raise DataError(f"{e.utterance_id}: characters outside the vocabulary: {''.join(unknown)}")
        samples.append(Sample(e.utterance_id, model.prepare(manifest.load_video(e)), vocab.encode(e.transcript)))
    return samples


def cmd_train_toy(args, cfg: RunConfig, out: Outputs) -> None:
    if args.seed is not None:
        cfg = replace(cfg, seed=args.seed)
    steps = cfg.steps if args.steps is None else args.steps
    lm_steps = cfg.lm_steps if args.lm_steps is None else args.lm_steps
    model_cfg = cfg.model_config(list(cfg.synth.vocab))
    model = VSRModel(model_cfg)
    lm = build_lm(model_cfg)
    samples = _load_samples(args.train, model)

    def progress(step: int, loss: float) -> None:
        if args.verbose and (step % 50 == 0 or step == steps):
            print(f"step {step}/{steps} joint {loss:.4f}", file=sys.stderr)

    curve = train_toy(model, samples, cfg.optimizer, steps, cfg.seed, cfg.loss, progress)
    if lm is not None:
        train_lm(lm, [s.token_ids for s in samples], cfg.optimizer, lm_steps, cfg.seed)
    out.write(args.out, encode_checkpoint(model, lm))
    if args.curve:
        out.write(args.curve, curve.format_curve())


def _decode_params(args, cfg: RunConfig) -> DecodeParams:
    overrides = {
        "beam_size": args.beam, "ctc_weight": args.ctc_weight, "lm_weight": args.lm_weight,
        "max_len_ratio": args.max_len_ratio, "nbest": args.nbest, "mode": args.mode,
    }
    try:
        return replace(cfg.decode, **{k: v for k, v in overrides.items() if v is not None})
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc


def cmd_decode(args, cfg: RunConfig, out: Outputs) -> None:
    params = _decode_params(args, cfg)
    config, _ = decode_checkpoint(Path(args.ckpt).read_bytes())
    vocab = config.vocabulary
    results = batch_decode(args.manifest, args.ckpt, params, workers=args.workers, use_lm=not args.no_lm)
    out.write(args.out, "".join(f"{r.utterance_id}\t{r.text}\n" for r in results))
    if args.nbest_out:
        out.write(args.nbest_out, "".join(format_nbest(r.utterance_id, r.hyps, vocab) for r in results))


def _nbest_confidence(path) -> dict[str, float]:
    """Per-utterance confidence from a rank-1 n-best line: exp of the combined
    score per emitted token (+1 for eos)."""
    conf = {}
    for line in Path(path).read_text(encoding="utf-8").splitlines():
        f = line.split("\t")
        if len(f) != 7:
            raise DataError(f"{path}: malformed n-best line")
        if f[1] == "1":
            conf[f[0]] = math.exp(float(f[2]) / (len(normalize(f[6])) + 1))
    return conf


def cmd_fuse(args, cfg: RunConfig, out: Outputs) -> None:
    if len(args.hyps) < 2:
        raise UsageError("fuse needs at least 2 hypothesis files")
    confidences = None
    if args.confidence_weight:
        if not args.nbest or len(args.nbest) != len(args.hyps):
            raise UsageError("--confidence-weight needs one --nbest file per system")
        confidences = [_nbest_confidence(p) for p in args.nbest]
    systems = [read_hypotheses(p) for p in args.hyps]
    fused = rover_fuse(systems, args.confidence_weight, confidences)
    out.write(args.out, format_hypotheses(fused))


def cmd_score(args, cfg: RunConfig, out: Outputs) -> None:
    refs = read_manifest(args.ref).transcripts()
    score = corpus_score(refs, read_hypotheses(args.hyp))
    if args.out:
        out.write(args.out, score.report())
    else:
        sys.stdout.write(score.report())


def cmd_inspect_ckpt(args, cfg: RunConfig, out: Outputs) -> None:
    config, params = decode_checkpoint(Path(args.ckpt).read_bytes())
    total = sum(int(p.size) for p in params.values())
    lines = [json.dumps(config.to_dict(), sort_keys=True, indent=2)]
    lines += [f"{name}\t{'x'.join(map(str, p.shape))}" for name, p in params.items()]
    lines.append(f"#parameters\t{len(params)}\t{total}")
    sys.stdout.write("\n".join(lines) + "\n")


# ---------------------------------------------------------------- parser


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="vsrkit", description="Toy-scale visual speech recognition toolkit.")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def command(name, fn, help_):
        sp = sub.add_parser(name, help=help_)
        sp.add_argument("--config", help="JSON run configuration")
        sp.set_defaults(fn=fn)
        return sp

    sp = command("synth-data", cmd_synth_data, "generate a synthetic train/dev corpus")
    sp.add_argument("--out", required=True, help="output directory (train/ and dev/ inside)")
    sp.add_argument("--train-count", type=int)
    sp.add_argument("--dev-count", type=int)
    sp.add_argument("--seed", type=int)

    sp = command("augment", cmd_augment, "speed-perturb (and optionally augment) a manifest")
    sp.add_argument("--manifest", required=True)
    sp.add_argument("--out", required=True, help="output directory")
    sp.add_argument("--rates", type=_parse_floats, help="comma-separated speed rates (default from config)")
    sp.add_argument("--policy", choices=["none", "default", "config"], default="none",
                    help="clip augmentation: none, the standard policy, or the config's 'augment' section")
    sp.add_argument("--seed", type=int)

    sp = command("train-toy", cmd_train_toy, "train the joint model and LM, write a checkpoint")
    sp.add_argument("--train", required=True, help="training manifest")
    sp.add_argument("--out", required=True, help="checkpoint path")
    sp.add_argument("--curve", help="loss curve output (step, ctc, ce, joint)")
    sp.add_argument("--steps", type=int)
    sp.add_argument("--lm-steps", type=int)
    sp.add_argument("--seed", type=int)
    sp.add_argument("--verbose", action="store_true")

    sp = command("decode", cmd_decode, "beam-search a manifest with a checkpoint")
    sp.add_argument("--ckpt", required=True)
    sp.add_argument("--manifest", required=True)
    sp.add_argument("--out", required=True, help="hypothesis file")
    sp.add_argument("--nbest-out", help="optional n-best file")
    sp.add_argument("--beam", type=int)
    sp.add_argument("--ctc-weight", type=float)
    sp.add_argument("--lm-weight", type=float)
    sp.add_argument("--max-len-ratio", type=float)
    sp.add_argument("--nbest", type=int)
    sp.add_argument("--mode", choices=["joint", "rescore"])
    sp.add_argument("--no-lm", action="store_true", help="skip shallow fusion")
    sp.add_argument("--workers", type=int, default=1)
    sp.add_argument("--seed", type=int)

    sp = command("fuse", cmd_fuse, "ROVER-combine hypothesis files (order systems best first)")
    sp.add_argument("--hyps", nargs="+", required=True)
    sp.add_argument("--out", required=True)
    sp.add_argument("--confidence-weight", type=float, default=0.0)
    sp.add_argument("--nbest", nargs="+", help="n-best files supplying confidences, one per system")

    sp = command("score", cmd_score, "CER report of a hypothesis file against a manifest")
    sp.add_argument("--ref", required=True, help="reference manifest")
    sp.add_argument("--hyp", required=True)
    sp.add_argument("--out", help="report path (default: stdout)")

    sp = command("inspect-ckpt", cmd_inspect_ckpt, "print a checkpoint's config and parameter table")
    sp.add_argument("--ckpt", required=True)
    return p


def _exit_code(exc: BaseException) -> int:
    if isinstance(exc, (UsageError, ConfigError)):
        return EXIT_USAGE
    if isinstance(exc, (DivergenceError, NonFiniteError, FloatingPointError)):
        return EXIT_NUMERIC
    return EXIT_DATA


def main(argv=None) -> int:
    logging.basicConfig(level=logging.WARNING, format="vsrkit: warning: %(message)s", stream=sys.stderr)
    out = Outputs()
    try:
        args = build_parser().parse_args(argv)
        cfg = load_config(args.config)
        if getattr(args, "seed", None) is not None and args.command != "train-toy":
            cfg = replace(cfg, seed=args.seed)
        args.fn(args, cfg, out)
        out.commit()
        return EXIT_OK
    except (UsageError, ConfigError, DataError, VideoFormatError, CheckpointError, DivergenceError,
            NonFiniteError, FloatingPointError, OSError, ValueError, KeyError) as exc:
        out.discard()
        code = _exit_code(exc)
        msg = " ".join(str(exc).split()) or type(exc).__name__
        print(f"vsrkit: error[{code}]: {type(exc).__name__}: {msg}", file=sys.stderr)
        return code
    except BaseException:
        out.discard()
        raise


if __name__ == "__main__":
    sys.exit(main())
