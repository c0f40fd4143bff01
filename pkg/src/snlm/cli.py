"""Command-line entry point: train / diagnose / shift / complete / verify.

Every run writes a flat key=value manifest capturing the effective
configuration and seed; `--from-manifest` replays a previous run (only
`--out` may be combined with it) bit-identically. Exit codes: 0 success,
1 usage error, 2 runtime or verification failure. Errors print to stderr
as `ERROR <code>: message`.
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

import numpy as np

from . import corpus as corpus_mod
from . import diagnostics as diag_mod
from . import model as model_mod
from . import theory as theory_mod
from .objectives import Method, ObjectiveConfig
from .trainer import TrainConfig, train

__all__ = ["main", "app"]

SLACK_TOLERANCE = -1e-12
IDENTITY_TOLERANCE = 1e-10
OPTIMALITY_TOLERANCE = 1e-12


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # argparse default exits with code 2
        raise UsageError(message)


def _build_parser() -> _Parser:
    parser = _Parser(prog="snlm", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--out", required=True, help="output directory")
        p.add_argument("--from-manifest", dest="from_manifest", default=None,
                       help="replay a previous run's manifest")
        p.add_argument("--seed", type=int, default=0)

    p_train = sub.add_parser("train", help="fit a model and write a checkpoint")
    common(p_train)
    p_train.add_argument("--corpus", default=None, help="training corpus file")
    p_train.add_argument("--valid", default=None, help="validation corpus file")
    p_train.add_argument("--method", choices=[m.value for m in Method], default="sm")
    p_train.add_argument("--alpha", type=float, default=0.0)
    p_train.add_argument("--gamma", type=float, default=0.1)
    p_train.add_argument("--k", type=int, default=100)
    p_train.add_argument("--squash", action=argparse.BooleanOptionalAction, default=None)
    p_train.add_argument("--noise", choices=["per-token", "shared"], default="per-token")
    p_train.add_argument("--dim", type=int, default=100)
    p_train.add_argument("--dropout", type=float, default=0.5)
    p_train.add_argument("--epochs", type=int, default=20)
    p_train.add_argument("--lr", type=float, default=1.0)
    p_train.add_argument("--lr-decay", dest="lr_decay", type=float, default=None)
    p_train.add_argument("--decay-start", dest="decay_start", type=int, default=None)
    p_train.add_argument("--lr-preset", dest="lr_preset", choices=["standard", "mscc"],
                         default="standard")
    p_train.add_argument("--clip", type=float, default=5.0)
    p_train.add_argument("--batch-size", dest="batch_size", type=int, default=20)
    p_train.add_argument("--bptt", type=int, default=20)
    p_train.add_argument("--min-count", dest="min_count", type=int, default=1)
    p_train.add_argument("--eval-every", dest="eval_every", type=int, default=1)
    p_train.add_argument("--lowercase", action=argparse.BooleanOptionalAction, default=False)

    p_diag = sub.add_parser("diagnose", help="partition statistics and perplexities")
    common(p_diag)
    p_diag.add_argument("--checkpoint", default=None)
    p_diag.add_argument("--data", default=None, help="evaluation corpus file")
    p_diag.add_argument("--batch-size", dest="batch_size", type=int, default=20)
    p_diag.add_argument("--bptt", type=int, default=20)
    p_diag.add_argument("--histogram", action=argparse.BooleanOptionalAction, default=False)
    p_diag.add_argument("--bins", type=int, default=50)
    p_diag.add_argument("--max-contexts", dest="max_contexts", type=int, default=None)
    p_diag.add_argument("--lowercase", action=argparse.BooleanOptionalAction, default=False)

    p_shift = sub.add_parser("shift", help="center log partitions on a dev set")
    common(p_shift)
    p_shift.add_argument("--checkpoint", default=None)
    p_shift.add_argument("--data", default=None, help="dev corpus file")
    p_shift.add_argument("--batch-size", dest="batch_size", type=int, default=20)
    p_shift.add_argument("--bptt", type=int, default=20)
    p_shift.add_argument("--lowercase", action=argparse.BooleanOptionalAction, default=False)

    p_comp = sub.add_parser("complete", help="score a sentence-completion task")
    common(p_comp)
    p_comp.add_argument("--checkpoint", default=None)
    p_comp.add_argument("--task", default=None, help="completion task file")
    p_comp.add_argument("--mode", choices=["both", "normalized", "unnormalized"],
                        default="both")
    p_comp.add_argument("--lowercase", action=argparse.BooleanOptionalAction, default=False)

    p_verify = sub.add_parser("verify", help="run the randomized bound audits")
    common(p_verify)
    p_verify.add_argument("--instances", type=int, default=1000)
    p_verify.add_argument("--identity-instances", dest="identity_instances", type=int,
                          default=100)
    p_verify.add_argument("--optimality-instances", dest="optimality_instances", type=int,
                          default=1000)

    return parser


_SKIP_MANIFEST = {"command", "out", "from_manifest"}


def _format_value(v) -> str:
    if v is None:
        return "none"
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, float):
        return repr(v)
    return str(v)


def _write_manifest(args: argparse.Namespace, out_dir: Path) -> None:
    entries = {"command": args.command}
    for key, value in sorted(vars(args).items()):
        if key in _SKIP_MANIFEST:
            continue
        entries[key] = _format_value(value)
    lines = [f"{k}={v}" for k, v in entries.items()]
    (out_dir / "manifest.txt").write_text("\n".join(lines) + "\n", encoding="utf-8")


def _manifest_argv(path: str, out_override: str) -> list[str]:
    """Rebuild an argv from a manifest; --out comes from the caller."""
    entries = {}
    for lineno, raw in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        line = raw.strip()
        if not line:
            continue
        if "=" not in line:
            raise UsageError(f"manifest line {lineno} is not key=value")
        key, value = line.split("=", 1)
        entries[key.strip()] = value.strip()
    command = entries.pop("command", None)
    if command is None:
        raise UsageError("manifest has no command entry")
    argv = [command, "--out", out_override]
    for key, value in entries.items():
        option = "--" + key.replace("_", "-")
        if value == "none":
            continue
        if value == "true":
            argv.append(option)
        elif value == "false":
            argv.append("--no-" + key.replace("_", "-"))
        else:
            argv.extend([option, value])
    return argv


def _check_manifest_combination(argv: list[str]) -> None:
    allowed = {"--out", "--from-manifest"}
    extras = [
        tok for tok in argv[1:]
        if tok.startswith("--") and tok.split("=")[0] not in allowed
    ]
    if extras:
        raise UsageError(
            f"--from-manifest replays a run; only --out may accompany it (got {extras})"
        )


def _warn_irrelevant_flags(args, argv: list[str]) -> None:
    method = Method(args.method)
    irrelevant = {
        "--alpha": (Method.SM, Method.NCE),
        "--gamma": (Method.SM, Method.DEV, Method.NCE),
        "--k": (Method.SM, Method.DEV, Method.AND),
        "--squash": tuple(m for m in Method if m is not Method.AND),
        "--no-squash": tuple(m for m in Method if m is not Method.AND),
    }
    for flag, methods in irrelevant.items():
        if method in methods and any(tok.split("=")[0] == flag for tok in argv):
            print(f"warning: {flag} has no effect with --method {method.value}",
                  file=sys.stderr)


def _require(args, *names) -> None:
    for name in names:
        if getattr(args, name) in (None, ""):
            raise UsageError(f"--{name.replace('_', '-')} is required")


def _load_stream(path: str, vocab, batch_size: int, bptt: int, lowercase: bool):
    lines = corpus_mod.read_corpus(path, lowercase=lowercase)
    ids = corpus_mod.encode_lines(lines, vocab)
    return corpus_mod.batchify(ids, batch_size, bptt)


def _cmd_train(args, out_dir: Path) -> int:
    _require(args, "corpus")
    lines = corpus_mod.read_corpus(args.corpus, lowercase=args.lowercase)
    vocab = corpus_mod.build_vocab(lines, min_count=args.min_count)
    train_stream = corpus_mod.batchify(
        corpus_mod.encode_lines(lines, vocab), args.batch_size, args.bptt
    )
    valid_stream = None
    if args.valid:
        valid_stream = _load_stream(args.valid, vocab, args.batch_size, args.bptt,
                                    args.lowercase)
    objective = ObjectiveConfig(
        method=Method(args.method),
        alpha=args.alpha,
        gamma=args.gamma,
        k=args.k,
        squash=args.squash,
        noise=args.noise.replace("-", "_"),
    )
    cfg = TrainConfig(
        objective=objective,
        epochs=args.epochs,
        lr=args.lr,
        lr_decay=args.lr_decay,
        decay_start=args.decay_start,
        clip=args.clip,
        batch_size=args.batch_size,
        bptt=args.bptt,
        seed=args.seed,
        eval_every=args.eval_every,
    )
    model = model_mod.LanguageModel.create(
        vocab.size, args.dim, rng=np.random.default_rng(args.seed), dropout=args.dropout
    )
    log = train(model, vocab, train_stream, valid_stream, cfg)
    log.write_csv(out_dir / "train_log.csv")
    model_mod.save(model, vocab, out_dir / "model.ckpt")
    last = log.records[-1]
    print(
        f"trained {args.method} for {last.epoch} epochs: "
        f"loss={last.loss:.4f} ppl={last.ppl:.2f} mu_z={last.mu_z:.4f} sigma_z={last.sigma_z:.4f}"
    )
    return 0


def _cmd_diagnose(args, out_dir: Path) -> int:
    _require(args, "checkpoint", "data")
    model, vocab = model_mod.load(args.checkpoint)
    stream = _load_stream(args.data, vocab, args.batch_size, args.bptt, args.lowercase)
    report = diag_mod.diagnose(
        model,
        stream,
        correlation=args.histogram,
        bins=(args.bins, args.bins),
        max_contexts=args.max_contexts,
    )
    report.write_csv(out_dir / "diagnostics.csv")
    if report.histogram is not None:
        report.histogram.write_csv(out_dir / "histogram.csv")
    print(
        f"mu_z={report.mu_z:.6f} sigma_z={report.sigma_z:.6f} "
        f"perp={report.perp:.4f} u_perp={report.u_perp:.4f} n={report.n_contexts}"
    )
    return 0


def _cmd_shift(args, out_dir: Path) -> int:
    _require(args, "checkpoint", "data")
    model, vocab = model_mod.load(args.checkpoint)
    stream = _load_stream(args.data, vocab, args.batch_size, args.bptt, args.lowercase)
    shifted = diag_mod.shift(model, stream)
    model_mod.save(shifted, vocab, out_dir / "model.ckpt")
    print(f"shift={shifted.shift!r}")
    return 0


def _cmd_complete(args, out_dir: Path) -> int:
    _require(args, "checkpoint", "task")
    model, vocab = model_mod.load(args.checkpoint)
    items = corpus_mod.load_completions(args.task, vocab, lowercase=args.lowercase)
    if args.mode == "both":
        report = diag_mod.completion_report(model, items)
        diag_mod.write_completions_csv(report.normalized, out_dir / "completions.csv")
        acc_n = report.normalized.accuracy
        acc_u = report.unnormalized.accuracy
        print(f"accuracy_normalized={acc_n}")
        print(f"accuracy_unnormalized={acc_u}")
        print(f"delta_acc={report.delta_acc}")
        if report.normalized.n_unanswered:
            print(f"warning: {report.normalized.n_unanswered} items without answers "
                  "excluded from accuracy", file=sys.stderr)
    else:
        result = diag_mod.complete(model, items, args.mode)
        diag_mod.write_completions_csv(result, out_dir / "completions.csv")
        print(f"accuracy_{args.mode}={result.accuracy}")
        if result.n_unanswered:
            print(f"warning: {result.n_unanswered} items without answers "
                  "excluded from accuracy", file=sys.stderr)
    return 0


def _cmd_verify(args, out_dir: Path) -> int:
    rows = theory_mod.run_theorem_audit(args.instances, args.seed)
    theory_mod.write_audit_csv(rows, out_dir / "audit.csv")
    min_slack = min(r.slack for r in rows)
    identity_err = theory_mod.run_identity_audit(args.identity_instances, args.seed)
    optimality = theory_mod.run_optimality_audit(args.optimality_instances, args.seed)
    print(f"theorem audit: {len(rows)} instances, min slack {min_slack:.3e}")
    print(f"identity audit: {args.identity_instances} instances, "
          f"max |gap - kl| {identity_err:.3e}")
    print(f"optimality audit: {args.optimality_instances} instances, "
          f"max violation {optimality:.3e}")
    failures = []
    if min_slack < SLACK_TOLERANCE:
        failures.append(f"bound violated: min slack {min_slack!r}")
    if identity_err > IDENTITY_TOLERANCE:
        failures.append(f"identity failed: max error {identity_err!r}")
    if optimality > OPTIMALITY_TOLERANCE:
        failures.append(f"optimality failed: max violation {optimality!r}")
    if failures:
        for failure in failures:
            print(f"ERROR 2: {failure}", file=sys.stderr)
        return 2
    print("verify: PASS")
    return 0


_COMMANDS = {
    "train": _cmd_train,
    "diagnose": _cmd_diagnose,
    "shift": _cmd_shift,
    "complete": _cmd_complete,
    "verify": _cmd_verify,
}


def main(argv: list[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
        replayed = False
        if args.from_manifest:
            _check_manifest_combination(argv)
            argv = _manifest_argv(args.from_manifest, args.out)
            args = parser.parse_args(argv)
            replayed = True
        if args.command == "train":
            if args.lr_decay is None:
                args.lr_decay = 2.0 if args.lr_preset == "mscc" else 1.2
            if args.decay_start is None:
                args.decay_start = 1 if args.lr_preset == "mscc" else 6
            if not replayed:  # manifest values are records, not user flags
                _warn_irrelevant_flags(args, argv)
            # resolve the squash default so the manifest records it
            if args.squash is None:
                args.squash = Method(args.method) is Method.AND
        out_dir = Path(args.out)
        out_dir.mkdir(parents=True, exist_ok=True)
        _write_manifest(args, out_dir)
        return _COMMANDS[args.command](args, out_dir)
    except UsageError as exc:
        print(f"ERROR 1: {exc}", file=sys.stderr)
        parser.print_usage(sys.stderr)
        return 1
    except SystemExit as exc:  # argparse --help
        return int(exc.code or 0)
    except (OSError, ValueError, RuntimeError) as exc:
        print(f"ERROR 2: {exc}", file=sys.stderr)
        return 2


def app() -> None:
    raise SystemExit(main())
