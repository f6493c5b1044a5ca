"""Flat ``key = value`` run configuration with typed defaults.

Every hyperparameter has a key.  Files may contain ``#`` comments and blank
lines; unknown keys are rejected; command-line overrides win over file
values.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path


class ConfigError(ValueError):
    pass


# key -> (default, help)
SCHEMA: dict[str, tuple] = {
    # benchmark
    "seed": (0, "global seed"),
    "seeds": ("0,1,2", "experiment seeds"),
    "n_pairs": (6, "confusable word pairs"),
    "n_contexts": (8, "context words (half shared, half domain-specific)"),
    "overlap": (0.85, "acoustic overlap of confusable pairs"),
    "sigma": (0.3, "frame noise standard deviation"),
    "feat_dim": (16, "frame dimension D"),
    "anchor_seed": (1234, "seed of the shared per-word anchor vectors"),
    "context_peak": (0.8, "probability of a context word's preferred pair member"),
    "source_focus": (0.97, "source-domain probability of its own context words"),
    "target_focus": (0.75, "target-domain probability of its own context words"),
    "stop_prob": (0.12, "per-token stop probability"),
    "n_train": (2000, "training utterances"),
    "n_dev": (200, "development utterances per domain"),
    "n_test": (200, "test utterances per domain"),
    "n_text": (10000, "LM text sentences per domain"),
    # architecture
    "d_model": (64, "model width"),
    "heads": (4, "attention heads"),
    "d_ff": (128, "feed-forward width"),
    "n_layers": (2, "layers per stack"),
    "dropout": (0.1, "dropout probability"),
    "d_joint": (64, "transducer joint width"),
    "chunk_frames": (8, "frames per chunk for streaming masks"),
    "arch": ("aed", "aed | transducer"),
    "variant": ("decoupled", "aed: standard | preformer | decoupled; transducer: stateless | transformer | decoupled"),
    "mask": ("offline", "offline | chunk"),
    "cross_ff": (True, "feed-forward sublayer in cross-layers"),
    # LM training
    "lm_mode": ("source", "source | finetune"),
    "lm_epochs": (3, "source LM epochs"),
    "lm_lr": (2e-3, "source LM learning rate"),
    "lm_batch": (64, "LM batch size"),
    "ft_epochs": (2, "fine-tuning epochs"),
    "ft_lr": (1e-3, "fine-tuning learning rate"),
    # ASR training
    "epochs": (10, "ASR epochs"),
    "lr": (2e-3, "ASR peak learning rate"),
    "batch_size": (32, "ASR batch size"),
    "warmup": (100, "warm-up steps"),
    "ctc_weight": (0.3, "CTC multitask weight (gamma / lambda)"),
    "main_weight": (0.5, "main-vs-auxiliary weight (eta / eta')"),
    "lm_weight": (0.5, "LM logit weight beta"),
    "label_smoothing": (0.1, "label smoothing for cross-entropy"),
    "blank_factor": (2.0, "blank logit factor in the decoupled transducer"),
    # decoding
    "beam": (10, "beam size"),
    "decode_ctc_weight": (0.3, "CTC weight mu in joint decoding"),
    "sf_weight": (0.2, "shallow-fusion weight in fusion conditions"),
    "max_len_ratio": (0.5, "maximum output length per input frame"),
    "max_symbols_per_frame": (10, "transducer emissions per frame cap"),
    # experiment
    "models": ("aed_decoupled,aed_standard,transducer_decoupled,transducer_decoupled_chunk,"
               "transducer_transformer,transducer_transformer_chunk", "model families"),
    "conditions": ("acoustic,source,target,target_swapemb", "internal-LM conditions"),
    "fusion": ("off,on", "shallow fusion settings"),
    "workers": (1, "decode worker processes"),
}


def _coerce(key: str, raw):
    default = SCHEMA[key][0]
    if isinstance(raw, str):
        raw = raw.strip()
    try:
        if isinstance(default, bool):
            if isinstance(raw, bool):
                return raw
            low = str(raw).lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
        return str(raw)
    except (TypeError, ValueError):
        raise ConfigError(f"bad value for {key}: {raw!r}") from None


@dataclass(frozen=True)
class RunConfig:
    values: tuple

    def __getitem__(self, key: str):
        return dict(self.values)[key]

    def __getattr__(self, key: str):
        d = dict(object.__getattribute__(self, "values"))
        if key in d:
            return d[key]
        raise AttributeError(key)

    def as_dict(self) -> dict:
        return dict(self.values)

    def replace(self, **overrides) -> "RunConfig":
        return build_config(self.as_dict(), overrides)

    def dump(self) -> str:
        return "".join(f"{k} = {_fmt(v)}\n" for k, v in self.values)

    def int_list(self, key: str) -> list[int]:
        return [int(x) for x in str(self[key]).split(",") if x.strip()]

    def str_list(self, key: str) -> list[str]:
        return [x.strip() for x in str(self[key]).split(",") if x.strip()]


def _fmt(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    return repr(v) if isinstance(v, float) else str(v)


def parse_config_text(text: str, source: str = "config") -> dict:
    out = {}
    for n, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{n}: expected 'key = value'")
        key, val = (s.strip() for s in line.split("=", 1))
        if key not in SCHEMA:
            raise ConfigError(f"{source}:{n}: unknown config key {key!r}")
        out[key] = _coerce(key, val)
    return out


def build_config(file_values: dict | None = None, overrides: dict | None = None) -> RunConfig:
    vals = {k: v[0] for k, v in SCHEMA.items()}
    for layer in (file_values or {}, overrides or {}):
        for k, v in layer.items():
            if v is None:
                continue
            if k not in SCHEMA:
                raise ConfigError(f"unknown config key {k!r}")
            vals[k] = _coerce(k, v)
    return RunConfig(tuple(sorted(vals.items())))


def load_config(path=None, overrides: dict | None = None) -> RunConfig:
    file_values = {}
    if path is not None:
        p = Path(path)
        if not p.exists():
            raise FileNotFoundError(f"config not found: {path}")
        file_values = parse_config_text(p.read_text(encoding="utf-8"), str(path))
    return build_config(file_values, overrides)
