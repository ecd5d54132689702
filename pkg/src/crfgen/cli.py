"""Command-line entry point: make-corpus, train, generate, eval, selftest.

Every subcommand accepts ``--config FILE``, a YAML mapping of option names
(the long flag with dashes turned into underscores) to values.  Explicit
flags override the file.  Each run writes ``<command>.config.yaml`` and
``VERSION`` next to its outputs; feeding that file back through
``--config`` repeats the run exactly.

Exit codes: 0 success, 1 usage or input error, 2 numeric failure.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

import numpy as np
import yaml

from . import __version__
from .compute import NumericError, substream
from .corpus import (SynthSpec, Vocab, build_vocab, decode, encode, encode_corpus,
                     generate_synthetic, random_synth_spec, read_corpus, unk_rate,
                     write_corpus)
from .evaluation import fit_kn, format_table, report, write_report
from .training import Model, TrainConfig, generate, train

log = logging.getLogger("crfgen")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _write_run_meta(out_dir: Path, command: str, args: argparse.Namespace) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    resolved = {k: v for k, v in vars(args).items() if k not in ("config", "func", "command")}
    resolved = {"command": command, "version": __version__, **resolved}
    (out_dir / f"{command}.config.yaml").write_text(yaml.safe_dump(resolved, sort_keys=True))
    (out_dir / "VERSION").write_text(f"crfgen {__version__}\n")


# -- make-corpus ---------------------------------------------------------------

def _synth_spec(args) -> SynthSpec:
    if args.synth_spec:
        d = yaml.safe_load(Path(args.synth_spec).read_text())
        if not isinstance(d, dict):
            raise ValueError(f"{args.synth_spec}: expected a mapping")
        return SynthSpec(np.array(d["transition"]), np.array(d["emission"]),
                         max_len=int(d.get("max_len", args.max_len)),
                         seed=int(d.get("seed", args.seed)),
                         initial=None if d.get("initial") is None else np.array(d["initial"]))
    return random_synth_spec(args.states, args.words, args.max_len, args.seed,
                             eos_prob=args.eos_prob)


def cmd_make_corpus(args) -> int:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    if args.input:
        sentences = read_corpus(args.input)
    else:
        spec = _synth_spec(args)
        sentences = [s for s in generate_synthetic(spec, args.n) if s]
        (out / "synth.yaml").write_text(yaml.safe_dump({
            "transition": spec.transition.tolist(), "emission": spec.emission.tolist(),
            "initial": spec.initial.tolist(), "max_len": spec.max_len, "seed": spec.seed}))
    sentences = [s for s in sentences if len(s) <= args.max_len]
    if not sentences:
        raise ValueError("no sentences survive the length filter")
    perm = substream(args.seed, "split").permutation(len(sentences))
    n_held = int(round(args.heldout * len(sentences)))
    held = [sentences[i] for i in perm[:n_held]]
    tr = [sentences[i] for i in perm[n_held:]]
    vocab = build_vocab(tr, args.vocab_size)
    unk = lambda ss: [decode(encode(s, vocab, args.max_len), vocab) for s in ss]  # noqa: E731
    write_corpus(out / "train.txt", unk(tr))
    write_corpus(out / "heldout.txt", unk(held))
    vocab.save(out / "vocab.txt")
    rate = unk_rate(encode_corpus(tr, vocab, args.max_len))
    print(f"train {len(tr)}  heldout {len(held)}  vocab {len(vocab)}  unk-rate {100 * rate:.2f}%")
    _write_run_meta(out, "make-corpus", args)
    return 0


# -- train ---------------------------------------------------------------------

TRAIN_FIELDS = ("latent_dim", "embed_dim", "hidden_dim", "enc_dim", "enc_embed_dim", "lr",
                "batch_size", "epochs", "kl_warmup", "unary_only", "interaction", "seed",
                "max_len", "vocab_size", "init_scale", "kl_estimator")


def _corpus_paths(args):
    if args.corpus:
        d = Path(args.corpus)
        return d / "train.txt", d / "vocab.txt"
    if not args.train_file:
        raise UsageError("train needs --corpus DIR or --train-file FILE")
    return Path(args.train_file), Path(args.vocab) if args.vocab else None


def cmd_train(args) -> int:
    train_path, vocab_path = _corpus_paths(args)
    sents = read_corpus(train_path)
    vocab = Vocab.load(vocab_path) if vocab_path else build_vocab(sents, args.vocab_size)
    config = TrainConfig(**{k: getattr(args, k) for k in TRAIN_FIELDS})
    seqs = encode_corpus(sents, vocab, config.max_len)
    if not seqs:
        raise ValueError(f"{train_path}: no sentences within --max-len {config.max_len}")
    out = Path(args.out)
    _write_run_meta(out, "train", args)
    model, tlog = train(config, seqs, len(vocab), out_dir=out, vocab=vocab)
    r = tlog.rows[-1] if tlog.rows else None
    if r:
        print(f"epoch {r[0]}  elbo {r[1]:.4f}  recon {r[2]:.4f}  kl {r[3]:.4f}")
    else:
        model.save(out / "model.ckpt")
    return 0


# -- generate ------------------------------------------------------------------

def cmd_generate(args) -> int:
    model = Model.load(args.checkpoint)
    if model.vocab is None:
        raise ValueError(f"{args.checkpoint}: checkpoint carries no vocabulary")
    fixed = None
    if args.length_mode == "fixed":
        if not args.length or args.length < 1:
            raise UsageError("--length-mode fixed needs --length T >= 1")
        fixed = args.length
    ids = generate(model, args.n, args.seed, fixed_length=fixed,
                   unary_only=True if args.unary_only else None)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    write_corpus(out, ([model.vocab.words[i] for i in s] for s in ids))
    _write_run_meta(out.parent, "generate", args)
    return 0


# -- eval ------------------------------------------------------------------------

def _parse_samples(specs):
    out = []
    for spec in specs or ():
        label, sep, path = spec.partition("=")
        if not sep:
            label, path = Path(spec).stem, spec
        out.append((label, path))
    return out


def cmd_eval(args) -> int:
    train_sents = read_corpus(args.train_file)
    vocab = Vocab.load(args.vocab).words[1:] if args.vocab else None
    lms = {n: fit_kn(train_sents, n, args.discount, vocab) for n in args.orders}
    rows = [(label, read_corpus(path, keep_empty=True)) for label, path in _parse_samples(args.samples)]
    if args.heldout:
        rows.append(("ORACLE", read_corpus(args.heldout)))
    if not rows:
        raise UsageError("eval needs --samples and/or --heldout")
    table = report(rows, lms)
    out = Path(args.out)
    write_report(table, out)
    for n, lm in lms.items():
        lm.save(out / f"kn{n}.counts")
    _write_run_meta(out, "eval", args)
    print(format_table(table), end="")
    return 0


# -- selftest ----------------------------------------------------------------------

def cmd_selftest(args) -> int:
    from .selftest import run_all

    results = run_all(seed=args.seed)
    for name, ok, detail in results:
        print(f"{'PASS' if ok else 'FAIL'}  {name}  {detail}")
    return 0 if all(ok for _, ok, _ in results) else 2


# -- wiring ----------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="crfgen", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=f"crfgen {__version__}")
    sub = p.add_subparsers(dest="command", parser_class=_Parser)

    def command(name, func, help_):
        sp = sub.add_parser(name, help=help_)
        sp.add_argument("--config", help="YAML file of option defaults")
        sp.set_defaults(func=func)
        return sp

    mc = command("make-corpus", cmd_make_corpus, "synthesise or ingest a corpus")
    mc.add_argument("--out", required=True)
    mc.add_argument("--input", help="plain-text corpus to ingest instead of synthesising")
    mc.add_argument("--synth-spec", help="YAML HMM (transition, emission[, initial])")
    mc.add_argument("--states", type=int, default=5)
    mc.add_argument("--words", type=int, default=50)
    mc.add_argument("--eos-prob", type=float, default=0.12)
    mc.add_argument("--n", type=int, default=20000)
    mc.add_argument("--heldout", type=float, default=0.1)
    mc.add_argument("--vocab-size", type=int, default=15003)
    mc.add_argument("--max-len", type=int, default=15)
    mc.add_argument("--seed", type=int, default=0)

    d = TrainConfig()
    tr = command("train", cmd_train, "fit the model by maximising the ELBO")
    tr.add_argument("--out", required=True)
    tr.add_argument("--corpus", help="directory written by make-corpus")
    tr.add_argument("--train-file")
    tr.add_argument("--vocab")
    for name in TRAIN_FIELDS:
        default = getattr(d, name)
        flag = "--" + name.replace("_", "-")
        if isinstance(default, bool):
            tr.add_argument(flag, action=argparse.BooleanOptionalAction, default=default)
        else:
            tr.add_argument(flag, type=type(default), default=default)

    ge = command("generate", cmd_generate, "sample sentences from a checkpoint")
    ge.add_argument("--checkpoint", required=True)
    ge.add_argument("--out", required=True)
    ge.add_argument("--n", type=int, default=100000)
    ge.add_argument("--seed", type=int, default=0)
    ge.add_argument("--unary-only", action="store_true",
                    help="replace pairwise factors by ones when sampling")
    ge.add_argument("--length-mode", choices=("histogram", "fixed"), default="histogram")
    ge.add_argument("--length", type=int)

    ev = command("eval", cmd_eval, "score sample files with Kneser-Ney judges")
    ev.add_argument("--train-file", required=True)
    ev.add_argument("--samples", nargs="*", default=[], help="LABEL=FILE entries")
    ev.add_argument("--heldout", help="held-out text reported as the ORACLE row")
    ev.add_argument("--vocab")
    ev.add_argument("--orders", type=int, nargs="+", default=[2, 3])
    ev.add_argument("--discount", type=float, default=0.75)
    ev.add_argument("--out", required=True)

    st = command("selftest", cmd_selftest, "run enumeration and gradient oracles")
    st.add_argument("--seed", type=int, default=0)
    return p


def _parse(argv):
    parser = build_parser()
    pre = _Parser(add_help=False)
    pre.add_argument("command", nargs="?")
    pre.add_argument("--config")
    known, _ = pre.parse_known_args(argv)
    if known.config and known.command in _subparsers(parser):
        try:
            cfg = yaml.safe_load(Path(known.config).read_text()) or {}
        except FileNotFoundError:
            raise UsageError(f"--config: no such file {known.config}") from None
        if not isinstance(cfg, dict):
            raise UsageError(f"--config {known.config}: expected a mapping")
        cfg.pop("version", None)
        if cfg.pop("command", known.command) != known.command:
            raise UsageError(f"--config {known.config} belongs to another subcommand")
        sub = _subparsers(parser)[known.command]
        dests = {a.dest for a in sub._actions}
        unknown = set(cfg) - dests
        if unknown:
            raise UsageError(f"--config {known.config}: unknown options {sorted(unknown)}")
        sub.set_defaults(**cfg)
        for action in sub._actions:
            if action.dest in cfg:
                action.required = False
    args = parser.parse_args(argv)
    if args.command is None:
        raise UsageError("missing subcommand")
    return args


def _subparsers(parser) -> dict:
    for action in parser._actions:
        if isinstance(action, argparse._SubParsersAction):
            return action.choices
    return {}


def main(argv=None) -> int:
    logging.basicConfig(level=logging.INFO, format="%(message)s")
    try:
        args = _parse(sys.argv[1:] if argv is None else argv)
        return args.func(args)
    except UsageError as e:
        print(f"crfgen: error: {e}", file=sys.stderr)
        return 1
    except NumericError as e:
        print(f"crfgen: numeric failure: {e}", file=sys.stderr)
        return 2
    except FileNotFoundError as e:
        print(f"crfgen: error: no such file {e.filename}", file=sys.stderr)
        return 1
    except (ValueError, KeyError) as e:
        print(f"crfgen: error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
