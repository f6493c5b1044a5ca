"""Command-line entry point.

    artifact gen-data   --out DIR
    artifact train-lm   --text FILE --vocab FILE --out CKPT [--init CKPT]
    artifact train-asr  --train DATA --vocab FILE [--lm CKPT] --out CKPT
    artifact decode     --model CKPT --data DATA --out TSV [--replace-ilm CKPT] [--sf-lm CKPT] ...
    artifact score      HYP_TSV [--refs DATA] [--pair OTHER_TSV] [--out PREFIX]
    artifact experiment --out DIR

Every command takes ``--config FILE`` plus one ``--<key>`` flag per config
key; flags win over the file.  Failures print one line
``error: <kind>: <message>`` on stderr and exit nonzero.
"""

from __future__ import annotations

import argparse
import logging
import sys
import warnings
from pathlib import Path

from .checkpoint import CheckpointError, file_hash, load_checkpoint, load_lm, save_checkpoint
from .config import SCHEMA, ConfigError, RunConfig, load_config
from .evalkit import DatasetFormatError, SpecError, benchmark_domains, benchmark_vocab, gen_corpus, gen_text, \
    load_dataset, save_dataset
from .experiment import (MissingArtifactError, attention_config, benchmark_config, build_model, data_seeds,
                         decode_config, run_adaptation_experiment)
from .lm import IncompatibleLMError, lm_finetune, lm_train
from .reports import (ReportError, paired, provenance_lines, read_hyp_tsv, score_markdown, score_records, score_tsv,
                      write_hyp_tsv)
from .search import decode_corpus
from .train import train_asr
from .vocab import Vocabulary, read_text_corpus, write_text_corpus

EXIT_CODES = {"usage": 2, "config": 2, "file_not_found": 3, "checkpoint": 4, "vocab_mismatch": 5, "dataset": 6,
              "missing_artifact": 7, "report": 8, "runtime": 1}


class CliError(Exception):
    def __init__(self, kind: str, message: str):
        super().__init__(message)
        self.kind = kind


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise CliError("usage", message)


def _one_line(s: str) -> str:
    return " ".join(str(s).split())


def _hashes(**paths) -> dict[str, str]:
    return {k: file_hash(p) for k, p in paths.items() if p is not None}


def _need(path, what: str) -> Path:
    if path is None:
        raise CliError("missing_artifact", f"{what} is required")
    p = Path(path)
    if not p.exists():
        raise FileNotFoundError(f"{what} not found: {path}")
    return p


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------

def cmd_gen_data(args, cfg: RunConfig) -> None:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    bc = benchmark_config(cfg)
    src, tgt = benchmark_domains(bc)
    vocab = benchmark_vocab(bc)
    s = data_seeds(cfg.seed)
    vocab.save(out / "vocab.txt")
    save_dataset(out / "train.dce", gen_corpus(src, cfg.n_train, s["train"], prefix="src-train"))
    save_dataset(out / "dev_source.dce", gen_corpus(src, cfg.n_dev, s["dev_source"], prefix="src-dev"))
    save_dataset(out / "dev_target.dce", gen_corpus(tgt, cfg.n_dev, s["dev_target"], prefix="tgt-dev"))
    save_dataset(out / "test_source.dce", gen_corpus(src, cfg.n_test, s["test_source"], prefix="src-test"))
    save_dataset(out / "test_target.dce", gen_corpus(tgt, cfg.n_test, s["test_target"], prefix="tgt-test"))
    write_text_corpus(out / "text_source.txt", gen_text(src, cfg.n_text, s["text_source"]), vocab)
    write_text_corpus(out / "text_target.txt", gen_text(tgt, cfg.n_text, s["text_target"]), vocab)
    (out / "config.txt").write_text(cfg.dump(), encoding="utf-8")
    print(f"wrote dataset to {out}")


def cmd_train_lm(args, cfg: RunConfig) -> None:
    text = _need(args.text, "text corpus")
    if cfg.lm_mode == "finetune":
        base = load_lm(_need(args.init, "--init LM checkpoint"))
        corpus = read_text_corpus(text, base.vocab)
        lm = lm_finetune(base, corpus, epochs=cfg.ft_epochs, lr=cfg.ft_lr, seed=cfg.seed, batch_size=cfg.lm_batch,
                         domain_tag=args.domain or "target")
    elif cfg.lm_mode == "source":
        vocab = Vocabulary.load(_need(args.vocab, "vocabulary"))
        corpus = read_text_corpus(text, vocab)
        lm = lm_train(corpus, vocab, attention_config(cfg), epochs=cfg.lm_epochs, lr=cfg.lm_lr, seed=cfg.seed,
                      batch_size=cfg.lm_batch, domain_tag=args.domain or "source")
    else:
        raise ConfigError(f"bad value for lm_mode: {cfg.lm_mode!r}")
    sha = save_checkpoint(args.out, lm)
    print(f"wrote {args.out} sha256={sha}")


def cmd_train_asr(args, cfg: RunConfig) -> None:
    vocab = Vocabulary.load(_need(args.vocab, "vocabulary"))
    utts = load_dataset(_need(args.train, "training dataset"))
    lm = None
    if cfg.variant == "decoupled":
        lm = load_lm(_need(args.lm, "--lm internal LM checkpoint"))
        if lm.vocab.digest() != vocab.digest():
            raise IncompatibleLMError("internal LM vocabulary differs from --vocab")
    model = build_model(cfg, vocab, lm, cfg.seed)
    losses = train_asr(model, utts, epochs=cfg.epochs, lr=cfg.lr, batch_size=cfg.batch_size, seed=cfg.seed,
                       warmup=cfg.warmup)
    sha = save_checkpoint(args.out, model)
    log = Path(args.loss_log or f"{args.out}.loss.tsv")
    log.write_text("epoch\tloss\n" + "".join(f"{i + 1}\t{v!r}\n" for i, v in enumerate(losses)), encoding="utf-8")
    print(f"wrote {args.out} sha256={sha}")


def cmd_decode(args, cfg: RunConfig) -> None:
    model = load_checkpoint(_need(args.model, "model checkpoint"))
    if not hasattr(model, "encoder"):
        raise CheckpointError(f"{args.model}: expected an ASR checkpoint")
    utts = load_dataset(_need(args.data, "dataset"))
    if args.replace_ilm is not None:
        new = load_lm(_need(args.replace_ilm, "--replace-ilm checkpoint"))
        if model.lm is None:
            raise CliError("usage", "--replace-ilm needs a decoupled model")
        if new.vocab.digest() != model.vocab.digest():
            raise IncompatibleLMError(f"{args.replace_ilm}: vocabulary hash differs from the model's")
        model = model.with_lm(new, swap_embedding=args.swap_embedding)
    over = {}
    if args.sf_lm is not None:
        sf = load_lm(_need(args.sf_lm, "--sf-lm checkpoint"))
        if sf.vocab.digest() != model.vocab.digest():
            raise IncompatibleLMError(f"{args.sf_lm}: vocabulary hash differs from the model's")
        over.update(sf_lm=sf, sf_weight=cfg.sf_weight)
    if args.beta is not None:
        over["beta"] = args.beta
    dc = decode_config(cfg, acoustic_only=args.acoustic_only, **over)
    records = decode_corpus(model, utts, dc, workers=cfg.workers)
    write_hyp_tsv(args.out, records, model.vocab)
    print(f"wrote {len(records)} hypotheses to {args.out}")


def cmd_score(args, cfg: RunConfig) -> None:
    hyp_path = _need(args.hyps, "hypothesis file")
    recs = read_hyp_tsv(hyp_path)
    if args.refs is not None:
        data = {u.id: u for u in load_dataset(_need(args.refs, "reference dataset"))}
        vocab = Vocabulary.load(_need(args.vocab, "vocabulary (needed with --refs)"))
        missing = [r.id for r in recs if r.id not in data]
        if missing or len(data) != len(recs):
            raise ReportError(f"hypothesis ids do not match the reference set (first missing: {missing[:1]})")
        for r in recs:
            r.ref = vocab.decode(data[r.id].tokens).split()
    rep = score_records(recs)
    other = pair = None
    hashes = _hashes(hyps=hyp_path, refs=args.refs)
    if args.pair is not None:
        other = score_records(read_hyp_tsv(_need(args.pair, "--pair hypothesis file")))
        pair = paired(rep, other)
        hashes["pair"] = file_hash(args.pair)
    prov = provenance_lines(cfg.dump(), cfg.seed, hashes)
    tsv = score_tsv(rep, prov, pair)
    md = score_markdown(rep, prov, Path(args.hyps).name, other, Path(args.pair).name if args.pair else "", pair)
    if args.out:
        Path(f"{args.out}.tsv").write_text(tsv, encoding="utf-8")
        Path(f"{args.out}.md").write_text(md, encoding="utf-8")
    sys.stdout.write(md)


def cmd_experiment(args, cfg: RunConfig) -> None:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    report = run_adaptation_experiment(cfg, out_dir=out / "checkpoints")
    (out / "report.tsv").write_text(report.to_tsv(), encoding="utf-8")
    (out / "report.md").write_text(report.to_markdown(), encoding="utf-8")
    for name, ok, detail in report.checks():
        print(f"{'PASS' if ok else 'FAIL'}\t{name}\t{detail}")
    print(f"wrote {out / 'report.md'} and {out / 'report.tsv'}")


COMMANDS = {"gen-data": cmd_gen_data, "train-lm": cmd_train_lm, "train-asr": cmd_train_asr, "decode": cmd_decode,
            "score": cmd_score, "experiment": cmd_experiment}


# ---------------------------------------------------------------------------
# parsing
# ---------------------------------------------------------------------------

def _add_config_flags(p: argparse.ArgumentParser, skip=()) -> None:
    g = p.add_argument_group("config keys (override --config)")
    for key, (default, help_) in SCHEMA.items():
        flag = "--" + key.replace("_", "-")
        if key in skip:
            continue
        g.add_argument(flag, dest=f"cfg_{key}", default=None, metavar="V", help=f"{help_} [{default}]")


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="artifact", description="Decoupled end-to-end ASR toolkit on a synthetic domain-shift benchmark")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def command(name, help_):
        sp = sub.add_parser(name, help=help_)
        sp.add_argument("--config", help="key = value config file")
        return sp

    sp = command("gen-data", "generate train/dev/test datasets and LM text corpora")
    sp.add_argument("--out", required=True)
    _add_config_flags(sp)

    sp = command("train-lm", "train a source LM or fine-tune one (--lm-mode finetune --init CKPT)")
    sp.add_argument("--text", required=True)
    sp.add_argument("--vocab")
    sp.add_argument("--init")
    sp.add_argument("--domain", help="domain tag stored in the checkpoint")
    sp.add_argument("--out", required=True)
    _add_config_flags(sp)

    sp = command("train-asr", "train an ASR model")
    sp.add_argument("--train", required=True)
    sp.add_argument("--vocab", required=True)
    sp.add_argument("--lm", help="internal LM checkpoint (decoupled variants)")
    sp.add_argument("--out", required=True)
    sp.add_argument("--loss-log")
    _add_config_flags(sp)

    sp = command("decode", "decode a dataset to a hypothesis TSV")
    sp.add_argument("--model", required=True)
    sp.add_argument("--data", required=True)
    sp.add_argument("--out", required=True)
    sp.add_argument("--replace-ilm", help="swap in this internal LM checkpoint")
    sp.add_argument("--swap-embedding", action="store_true", help="with --replace-ilm, also take its embedding table")
    sp.add_argument("--sf-lm", help="shallow-fusion LM checkpoint")
    sp.add_argument("--beta", type=float, help="internal LM weight at decode time")
    sp.add_argument("--acoustic-only", action="store_true", help="drop the internal LM logits")
    _add_config_flags(sp)

    sp = command("score", "score a hypothesis TSV")
    sp.add_argument("hyps")
    sp.add_argument("--refs", help="reference dataset overriding the TSV ref column")
    sp.add_argument("--vocab")
    sp.add_argument("--pair", help="second hypothesis TSV for the matched-pairs test")
    sp.add_argument("--out", help="write PREFIX.tsv and PREFIX.md")
    _add_config_flags(sp)

    sp = command("experiment", "run the full adaptation experiment")
    sp.add_argument("--out", required=True)
    _add_config_flags(sp)
    return p


def resolve_config(args) -> RunConfig:
    overrides = {k[4:]: v for k, v in vars(args).items() if k.startswith("cfg_") and v is not None}
    return load_config(args.config, overrides)


def _classify(e: BaseException) -> str:
    if isinstance(e, CliError):
        return e.kind
    if isinstance(e, FileNotFoundError):
        return "file_not_found"
    if isinstance(e, IncompatibleLMError):
        return "vocab_mismatch"
    if isinstance(e, CheckpointError):
        return "checkpoint"
    if isinstance(e, ConfigError):
        return "config"
    if isinstance(e, (DatasetFormatError, SpecError)):
        return "dataset"
    if isinstance(e, MissingArtifactError):
        return "missing_artifact"
    if isinstance(e, ReportError):
        return "report"
    return "runtime"


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(asctime)s %(name)s %(message)s", stream=sys.stderr)
        cfg = resolve_config(args)
        with warnings.catch_warnings():
            warnings.simplefilter("default")
            COMMANDS[args.command](args, cfg)
        return 0
    except SystemExit as e:  # --help
        return int(e.code or 0)
    except (Exception, KeyboardInterrupt) as e:
        kind = "interrupted" if isinstance(e, KeyboardInterrupt) else _classify(e)
        msg = e.args[0] if isinstance(e, FileNotFoundError) and e.args and isinstance(e.args[0], str) else str(e)
        if isinstance(e, FileNotFoundError) and e.filename and e.filename not in msg:
            msg = f"{e.strerror}: {e.filename}"
        print(f"error: {kind}: {_one_line(msg)}", file=sys.stderr)
        return EXIT_CODES.get(kind, 1)


if __name__ == "__main__":
    sys.exit(main())
