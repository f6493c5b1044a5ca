"""Hypothesis files, score reports and build provenance."""

from __future__ import annotations

import hashlib
from pathlib import Path
from typing import Sequence

from . import __version__
from .evalkit import PairedTest, ScoreReport, matched_pairs_test, score_corpus
from .search import DecodeRecord
from .vocab import Vocabulary

HYP_COLUMNS = ("id", "ref", "hyp", "s_att", "s_ctc", "s_lm", "s_total")


class ReportError(ValueError):
    pass


def build_id() -> str:
    """``artifact-<version>-g<hash>`` where the hash covers the package sources."""
    h = hashlib.sha256()
    pkg = Path(__file__).parent
    for p in sorted(pkg.glob("*.py")):
        h.update(p.name.encode())
        h.update(p.read_bytes())
    return f"artifact-{__version__}-g{h.hexdigest()[:10]}"


def _num(x: float) -> str:
    return repr(float(x))


def format_hyp_tsv(records: Sequence[DecodeRecord], vocab: Vocabulary) -> str:
    lines = ["\t".join(HYP_COLUMNS)]
    for r in sorted(records, key=lambda r: r.id):
        lines.append("\t".join([r.id, vocab.decode(r.ref), vocab.decode(r.hyp),
                                _num(r.s_att), _num(r.s_ctc), _num(r.s_lm), _num(r.s_total)]))
    return "\n".join(lines) + "\n"


def write_hyp_tsv(path, records: Sequence[DecodeRecord], vocab: Vocabulary) -> None:
    Path(path).write_text(format_hyp_tsv(records, vocab), encoding="utf-8")


def read_hyp_tsv(path, vocab: Vocabulary | None = None) -> list[DecodeRecord]:
    """Parse a hypothesis file; without ``vocab`` tokens stay word strings."""
    p = Path(path)
    if not p.exists():
        raise FileNotFoundError(f"hypothesis file not found: {path}")
    lines = p.read_text(encoding="utf-8").splitlines()
    if not lines or tuple(lines[0].split("\t")) != HYP_COLUMNS:
        raise ReportError(f"{path}: missing hypothesis header")
    out = []
    for n, line in enumerate(lines[1:], 2):
        f = line.split("\t")
        if len(f) != len(HYP_COLUMNS):
            raise ReportError(f"{path}:{n}: expected {len(HYP_COLUMNS)} columns")
        enc = vocab.encode if vocab is not None else str.split
        out.append(DecodeRecord(f[0], enc(f[1]), enc(f[2]), *map(float, f[3:])))
    return out


def provenance_lines(config_dump: str, seed, hashes: dict[str, str]) -> list[str]:
    lines = [f"# build_id\t{build_id()}", f"# seed\t{seed}"]
    lines += [f"# config\t{line}" for line in config_dump.splitlines()]
    lines += [f"# checkpoint\t{name}\t{h}" for name, h in sorted(hashes.items())]
    return lines


def score_tsv(report: ScoreReport, provenance: list[str], pair: PairedTest | None = None) -> str:
    S, D, I, N = report.totals()
    lines = list(provenance)
    lines.append("id\tsubs\tdels\tins\tref_len")
    for uid, (s, d, i, n) in zip(report.ids, report.counts):
        lines.append(f"{uid}\t{s}\t{d}\t{i}\t{n}")
    lines.append(f"TOTAL\t{S}\t{D}\t{I}\t{N}")
    lines.append(f"# wer\t{report.corpus_wer:.4f}")
    if pair is not None:
        lines.append(f"# matched_pairs\tz={pair.z:.6g}\tp={pair.p:.6g}\tdegenerate={str(pair.degenerate).lower()}")
    return "\n".join(lines) + "\n"


def score_markdown(report: ScoreReport, provenance: list[str], name: str,
                   other: ScoreReport | None = None, other_name: str = "", pair: PairedTest | None = None) -> str:
    out = [f"# Score report: {name}", "", "| system | WER % | sub | del | ins | ref words |", "|---|---|---|---|---|---|"]
    for label, rep in [(name, report)] + ([(other_name, other)] if other is not None else []):
        S, D, I, N = rep.totals()
        out.append(f"| {label} | {rep.corpus_wer:.2f} | {S} | {D} | {I} | {N} |")
    if pair is not None:
        flag = " (zero-variance differences)" if pair.degenerate else ""
        out += ["", f"Matched-pairs test: Z = {pair.z:.3f}, p = {pair.p:.4g}{flag}"]
    out += ["", "```"] + provenance + ["```"]
    return "\n".join(out) + "\n"


def score_records(records: Sequence[DecodeRecord]) -> ScoreReport:
    return score_corpus([(r.id, r.ref, r.hyp) for r in records])


def paired(report_a: ScoreReport, report_b: ScoreReport) -> PairedTest:
    if report_a.ids != report_b.ids:
        raise ReportError("paired reports cover different utterances")
    return matched_pairs_test(report_a.errors, report_b.errors)
