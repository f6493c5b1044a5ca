"""Domain-adaptation experiment: train, swap internal LMs, decode, score.

For every seed a source LM is trained on source text and fine-tuned on
target text; each model family is trained on source-domain audio and
decoded on an intra-domain (source) and a cross-domain (target) test set
under the internal-LM conditions

    acoustic        logits^AC only (beta = 0 / LM stream dropped)
    source          the source internal LM the model was trained with
    target          the fine-tuned target LM, acoustic embeddings kept
    target_swapemb  the target LM with its embedding table swapped in too

each with and without shallow fusion.  Baseline families (no internal LM)
have the single condition ``none``.
"""

from __future__ import annotations

import hashlib
import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .aed import AedHyper, AedModel
from .checkpoint import asr_tensors, encode_tensors, lm_tensors, save_checkpoint
from .config import RunConfig, build_config
from .evalkit import (BenchmarkConfig, Utterance, benchmark_domains, benchmark_vocab, gen_corpus, gen_text,
                      matched_pairs_test, score_corpus)
from .lm import LanguageModel, lm_finetune, lm_train
from .nn import NO_MASK, AttentionConfig, Mask
from .reports import build_id
from .search import DecodeConfig, decode_corpus
from .train import train_asr
from .transducer import TransducerHyper, TransducerModel
from .vocab import Vocabulary

logger = logging.getLogger(__name__)

FAMILIES = {
    "aed_decoupled": ("aed", "decoupled", "offline"),
    "aed_standard": ("aed", "standard", "offline"),
    "aed_preformer": ("aed", "preformer", "offline"),
    "transducer_decoupled": ("transducer", "decoupled", "offline"),
    "transducer_decoupled_chunk": ("transducer", "decoupled", "chunk"),
    "transducer_transformer": ("transducer", "transformer", "offline"),
    "transducer_transformer_chunk": ("transducer", "transformer", "chunk"),
    "transducer_stateless": ("transducer", "stateless", "offline"),
}
BASELINE_OF = {
    "aed_decoupled": "aed_standard",
    "transducer_decoupled": "transducer_transformer",
    "transducer_decoupled_chunk": "transducer_transformer_chunk",
}
CONDITIONS = ("acoustic", "source", "target", "target_swapemb")
TESTSETS = ("intra", "cross")
ROW_FIELDS = ("seed", "model", "condition", "fusion", "testset", "wer", "subs", "dels", "ins", "ref_len", "z", "p")


class MissingArtifactError(LookupError):
    pass


# ---------------------------------------------------------------------------
# config -> objects
# ---------------------------------------------------------------------------

def benchmark_config(cfg: RunConfig) -> BenchmarkConfig:
    return BenchmarkConfig(n_pairs=cfg.n_pairs, n_contexts=cfg.n_contexts, overlap=cfg.overlap, sigma=cfg.sigma,
                           dim=cfg.feat_dim, anchor_seed=cfg.anchor_seed, context_peak=cfg.context_peak,
                           source_focus=cfg.source_focus, target_focus=cfg.target_focus, stop_prob=cfg.stop_prob)


def attention_config(cfg: RunConfig) -> AttentionConfig:
    return AttentionConfig(d_model=cfg.d_model, heads=cfg.heads, d_ff=cfg.d_ff, n_layers=cfg.n_layers,
                           dropout=cfg.dropout)


def mask_from(cfg: RunConfig, kind: str | None = None) -> Mask:
    kind = cfg.mask if kind is None else kind
    if kind == "offline":
        return NO_MASK
    if kind == "chunk":
        return Mask("chunk", cfg.chunk_frames)
    raise ValueError(f"unknown mask {kind!r}")


def build_model(cfg: RunConfig, vocab: Vocabulary, lm: LanguageModel | None, seed: int,
                family: str | None = None):
    arch, variant, mask = FAMILIES[family] if family else (cfg.arch, cfg.variant, cfg.mask)
    acfg = attention_config(cfg)
    if arch == "aed":
        hyper = AedHyper(ctc_weight=cfg.ctc_weight, main_weight=cfg.main_weight, lm_weight=cfg.lm_weight,
                         decode_ctc_weight=cfg.decode_ctc_weight, label_smoothing=cfg.label_smoothing)
        return AedModel(vocab, cfg.feat_dim, acfg, variant, lm if variant == "decoupled" else None, hyper,
                        mask_from(cfg, mask), cross_ff=cfg.cross_ff, seed=seed)
    if arch == "transducer":
        hyper = TransducerHyper(ctc_weight=cfg.ctc_weight, main_weight=cfg.main_weight, blank_factor=cfg.blank_factor)
        return TransducerModel(vocab, cfg.feat_dim, acfg, variant, lm if variant == "decoupled" else None,
                               cfg.d_joint, mask_from(cfg, mask), hyper, seed=seed)
    raise ValueError(f"unknown architecture {arch!r}")


def decode_config(cfg: RunConfig, **over) -> DecodeConfig:
    base = dict(beam=cfg.beam, ctc_weight=cfg.decode_ctc_weight, max_len_ratio=cfg.max_len_ratio,
                max_symbols_per_frame=cfg.max_symbols_per_frame)
    base.update(over)
    return DecodeConfig(**base)


def data_seeds(seed: int) -> dict[str, int]:
    """Independent generator seeds for every corpus of one experiment seed."""
    base = 1000 * seed
    return {"train": base + 1, "dev_source": base + 2, "dev_target": base + 3, "test_source": base + 4,
            "test_target": base + 5, "text_source": base + 6, "text_target": base + 7}


@dataclass
class SeedData:
    train: list
    test_intra: list
    test_cross: list
    text_source: list
    text_target: list
    vocab: Vocabulary


def prepare_data(cfg: RunConfig, seed: int) -> SeedData:
    bc = benchmark_config(cfg)
    src, tgt = benchmark_domains(bc)
    s = data_seeds(seed)
    return SeedData(train=gen_corpus(src, cfg.n_train, s["train"], prefix="src-train"),
                    test_intra=gen_corpus(src, cfg.n_test, s["test_source"], prefix="src-test"),
                    test_cross=gen_corpus(tgt, cfg.n_test, s["test_target"], prefix="tgt-test"),
                    text_source=gen_text(src, cfg.n_text, s["text_source"]),
                    text_target=gen_text(tgt, cfg.n_text, s["text_target"]),
                    vocab=benchmark_vocab(bc))


def train_lms(cfg: RunConfig, data: SeedData, seed: int) -> tuple[LanguageModel, LanguageModel]:
    acfg = attention_config(cfg)
    lm_src = lm_train(data.text_source, data.vocab, acfg, epochs=cfg.lm_epochs, lr=cfg.lm_lr, seed=seed,
                      batch_size=cfg.lm_batch, domain_tag="source")
    lm_tgt = lm_finetune(lm_src, data.text_target, epochs=cfg.ft_epochs, lr=cfg.ft_lr, seed=seed,
                         batch_size=cfg.lm_batch, domain_tag="target", vocab=data.vocab)
    return lm_src, lm_tgt


def tensors_hash(t: dict) -> str:
    return hashlib.sha256(encode_tensors(t)).hexdigest()


# ---------------------------------------------------------------------------
# report
# ---------------------------------------------------------------------------

@dataclass
class ExperimentRow:
    seed: int
    model: str
    condition: str
    fusion: str
    testset: str
    wer: float
    subs: int
    dels: int
    ins: int
    ref_len: int
    z: float = math.nan
    p: float = math.nan
    errors: np.ndarray = field(default=None, repr=False)

    def key(self) -> tuple:
        return (self.seed, self.model, self.condition, self.fusion, self.testset)


def _fmt(x) -> str:
    if isinstance(x, float):
        return "-" if math.isnan(x) else f"{x:.6g}"
    return str(x)


@dataclass
class ExperimentReport:
    config: RunConfig
    rows: list
    hashes: dict
    build: str = field(default_factory=build_id)

    def row(self, seed, model, condition, fusion, testset) -> ExperimentRow:
        for r in self.rows:
            if r.key() == (seed, model, condition, fusion, testset):
                return r
        raise KeyError((seed, model, condition, fusion, testset))

    def grid(self) -> list[tuple]:
        return [r.key() for r in self.rows]

    def expected_grid(self) -> list[tuple]:
        return expected_grid(self.config)

    def _provenance(self) -> list[str]:
        lines = [f"# build_id\t{self.build}", f"# seeds\t{self.config.seeds}"]
        lines += [f"# config\t{line}" for line in self.config.dump().splitlines()]
        lines += [f"# checkpoint\t{k}\t{v}" for k, v in sorted(self.hashes.items())]
        return lines

    def to_tsv(self) -> str:
        lines = self._provenance() + ["\t".join(ROW_FIELDS)]
        for r in self.rows:
            lines.append("\t".join(_fmt(getattr(r, f)) if f in ("wer", "z", "p") else str(getattr(r, f))
                                   for f in ROW_FIELDS))
        return "\n".join(lines) + "\n"

    def checks(self) -> list[tuple[str, bool, str]]:
        return adaptation_checks(self)

    def to_markdown(self) -> str:
        cfg = self.config
        out = ["# Adaptation experiment", ""]
        out += ["Corpus WER (%) averaged over seeds " + cfg.seeds + "; p: matched-pairs test vs the source-LM "
                "condition, pooled over seeds by taking the largest per-seed p.", ""]
        out += ["| model | condition | fusion | intra WER | cross WER | cross p (max) |", "|---|---|---|---|---|---|"]
        seen = []
        for r in self.rows:
            k = (r.model, r.condition, r.fusion)
            if k not in seen:
                seen.append(k)
        for model, cond, fus in seen:
            sel = [r for r in self.rows if (r.model, r.condition, r.fusion) == (model, cond, fus)]
            intra = [r.wer for r in sel if r.testset == "intra"]
            cross = [r for r in sel if r.testset == "cross"]
            ps = [r.p for r in cross if not math.isnan(r.p)]
            pcol = f"{max(ps):.3g}" if ps else "-"
            out.append(f"| {model} | {cond} | {fus} | {np.mean(intra):.2f} | {np.mean([r.wer for r in cross]):.2f} | {pcol} |")
        out += ["", "## Per-seed results", "", "| seed | model | condition | fusion | test | WER | S | D | I | N | Z | p |",
                "|---|---|---|---|---|---|---|---|---|---|---|---|"]
        for r in self.rows:
            out.append(f"| {r.seed} | {r.model} | {r.condition} | {r.fusion} | {r.testset} | {r.wer:.2f} | {r.subs} | "
                       f"{r.dels} | {r.ins} | {r.ref_len} | {_fmt(r.z)} | {_fmt(r.p)} |")
        out += ["", "## Checks", ""]
        for name, ok, detail in self.checks():
            out.append(f"- {'PASS' if ok else 'FAIL'} {name}: {detail}")
        out += ["", "## Provenance", "", "```"] + self._provenance() + ["```"]
        return "\n".join(out) + "\n"


def expected_grid(cfg: RunConfig) -> list[tuple]:
    grid = []
    for seed in cfg.int_list("seeds"):
        for model in cfg.str_list("models"):
            conds = cfg.str_list("conditions") if FAMILIES[model][1] == "decoupled" else ["none"]
            for cond in conds:
                for fus in cfg.str_list("fusion"):
                    for ts in TESTSETS:
                        grid.append((seed, model, cond, fus, ts))
    return grid


def adaptation_checks(report: ExperimentReport, rel_gain: float = 0.10, p_max: float = 0.05,
                      intra_slack: float = 1.0, parity_slack: float = 1.5, min_seeds: int = 2):
    """Directional checks of the adaptation claim on the fusion-off rows."""
    cfg = report.config
    seeds = cfg.int_list("seeds")
    models = cfg.str_list("models")
    conds = cfg.str_list("conditions")
    out = []
    fus = "off" if "off" in cfg.str_list("fusion") else cfg.str_list("fusion")[0]

    def get(seed, model, cond, ts):
        return report.row(seed, model, cond, fus, ts)

    for model in [m for m in models if FAMILIES[m][1] == "decoupled"]:
        if "source" in conds and "target" in conds:
            ok, detail = True, []
            for s in seeds:
                src_x, tgt_x = get(s, model, "source", "cross"), get(s, model, "target", "cross")
                src_i, tgt_i = get(s, model, "source", "intra"), get(s, model, "target", "intra")
                gain = (src_x.wer - tgt_x.wer) / src_x.wer if src_x.wer > 0 else 0.0
                d_intra = tgt_i.wer - src_i.wer
                good = gain >= rel_gain and tgt_x.p <= p_max and d_intra <= intra_slack
                ok &= good
                detail.append(f"seed {s}: cross {src_x.wer:.2f}->{tgt_x.wer:.2f} ({100 * gain:.1f}% rel, p={tgt_x.p:.2g}), "
                              f"intra {d_intra:+.2f}")
            out.append((f"swap gain {model}", ok, "; ".join(detail)))
        base = BASELINE_OF.get(model)
        if base in models and "source" in conds:
            ok, detail = True, []
            for s in seeds:
                d = get(s, model, "source", "intra").wer - get(s, base, "none", "intra").wer
                ok &= d <= parity_slack
                detail.append(f"seed {s}: {d:+.2f}")
            out.append((f"intra parity {model} vs {base}", ok, "; ".join(detail)))
        if all(c in conds for c in ("acoustic", "source", "target")):
            hits, detail = 0, []
            for s in seeds:
                ac_i, src_i = get(s, model, "acoustic", "intra").wer, get(s, model, "source", "intra").wer
                x = {c: get(s, model, c, "cross").wer for c in ("acoustic", "source", "target")}
                good = ac_i > src_i and x["target"] < min(x["acoustic"], x["source"])
                hits += good
                detail.append(f"seed {s}: intra ac {ac_i:.2f} vs src {src_i:.2f}, cross ac/src/tgt "
                              f"{x['acoustic']:.2f}/{x['source']:.2f}/{x['target']:.2f}")
            need = min(min_seeds, len(seeds))
            out.append((f"ablation order {model}", hits >= need, f"{hits}/{len(seeds)} seeds; " + "; ".join(detail)))
    return out


# ---------------------------------------------------------------------------
# running
# ---------------------------------------------------------------------------

def condition_models(model, condition: str, lm_tgt: LanguageModel):
    """(model to decode with, acoustic_only flag) for one internal-LM condition."""
    if condition == "none":
        return model, False
    if model.lm is None:
        raise MissingArtifactError(f"condition {condition!r} needs a decoupled model")
    if condition == "acoustic":
        return model, True
    if condition == "source":
        return model, False
    if lm_tgt is None:
        raise MissingArtifactError("target LM missing")
    if condition == "target":
        return model.with_lm(lm_tgt), False
    if condition == "target_swapemb":
        return model.with_lm(lm_tgt, swap_embedding=True), False
    raise ValueError(f"unknown condition {condition!r}")


def evaluate_family(cfg: RunConfig, seed: int, family: str, model, data: SeedData, lm_src, lm_tgt) -> list:
    rows = []
    decoupled = FAMILIES[family][1] == "decoupled"
    conds = cfg.str_list("conditions") if decoupled else ["none"]
    if lm_src is None and "on" in cfg.str_list("fusion"):
        raise MissingArtifactError("source LM missing (needed for shallow fusion)")
    for cond in conds:
        dec_model, acoustic_only = condition_models(model, cond, lm_tgt)
        for fus in cfg.str_list("fusion"):
            for ts, utts in (("intra", data.test_intra), ("cross", data.test_cross)):
                if fus == "on":
                    sf_lm = lm_src if ts == "intra" else lm_tgt
                    if sf_lm is None:
                        raise MissingArtifactError(f"fusion LM for {ts} test set missing")
                    dc = decode_config(cfg, acoustic_only=acoustic_only, sf_lm=sf_lm, sf_weight=cfg.sf_weight)
                else:
                    dc = decode_config(cfg, acoustic_only=acoustic_only)
                t0 = time.perf_counter()
                recs = decode_corpus(dec_model, utts, dc, workers=cfg.workers)
                rep = score_corpus([(r.id, r.ref, r.hyp) for r in recs])
                S, D, I, N = rep.totals()
                rows.append(ExperimentRow(seed, family, cond, fus, ts, rep.corpus_wer, S, D, I, N, errors=rep.errors))
                logger.info("seed %d %s %s fusion=%s %s: WER %.2f (%.1fs)", seed, family, cond, fus, ts,
                            rep.corpus_wer, time.perf_counter() - t0)
    # matched pairs vs the source-LM condition
    for r in rows:
        if r.condition in ("source", "none"):
            continue
        ref = next(x for x in rows if (x.condition, x.fusion, x.testset) == ("source", r.fusion, r.testset))
        t = matched_pairs_test(ref.errors, r.errors)
        r.z, r.p = t.z, t.p
    return rows


def run_adaptation_experiment(cfg: RunConfig | None = None, out_dir=None) -> ExperimentReport:
    """Run the full grid of ``cfg``; checkpoints go to ``out_dir`` when given."""
    cfg = cfg or build_config()
    for m in cfg.str_list("models"):
        if m not in FAMILIES:
            raise ValueError(f"unknown model family {m!r}")
    for c in cfg.str_list("conditions"):
        if c not in CONDITIONS:
            raise ValueError(f"unknown condition {c!r}")
    for f in cfg.str_list("fusion"):
        if f not in ("off", "on"):
            raise ValueError(f"unknown fusion setting {f!r}")
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
    rows, hashes = [], {}
    for seed in cfg.int_list("seeds"):
        t0 = time.perf_counter()
        data = prepare_data(cfg, seed)
        lm_src, lm_tgt = train_lms(cfg, data, seed)
        for name, lm in (("lm_source", lm_src), ("lm_target", lm_tgt)):
            key = f"seed{seed}/{name}"
            hashes[key] = save_checkpoint(out / f"seed{seed}_{name}.dcpl", lm) if out else tensors_hash(lm_tensors(lm))
        logger.info("seed %d: data and LMs ready (%.1fs)", seed, time.perf_counter() - t0)
        for family in cfg.str_list("models"):
            t1 = time.perf_counter()
            model = build_model(cfg, data.vocab, lm_src, seed, family)
            train_asr(model, data.train, epochs=cfg.epochs, lr=cfg.lr, batch_size=cfg.batch_size, seed=seed,
                      warmup=cfg.warmup)
            key = f"seed{seed}/{family}"
            hashes[key] = (save_checkpoint(out / f"seed{seed}_{family}.dcpl", model) if out
                           else tensors_hash(asr_tensors(model)))
            logger.info("seed %d %s trained (%.1fs)", seed, family, time.perf_counter() - t1)
            rows += evaluate_family(cfg, seed, family, model, data, lm_src, lm_tgt)
    return ExperimentReport(cfg, rows, hashes)
