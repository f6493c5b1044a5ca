"""Binary checkpoints for LMs and ASR models.

Layout (little-endian): magic ``DCPL``, u32 version, u32 tensor count; per
tensor a u16 name length + UTF-8 name, u8 dtype (0 = f32, 1 = f64), u8 rank,
rank x u32 dims and the raw payload; then a u32 CRC32 of everything between
the header and the checksum.  Metadata travels as f64 tensors of UTF-8 byte
values under ``meta/`` names.
"""

from __future__ import annotations

import hashlib
import json
import struct
import zlib
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .aed import AedHyper, AedModel
from .lm import LanguageModel, TokenEmbedding
from .nn import AttentionConfig, Mask
from .transducer import StatelessPrediction, TransducerHyper, TransducerModel
from .vocab import Vocabulary

MAGIC = b"DCPL"
VERSION = 1
_DTYPES = {np.dtype("<f4"): 0, np.dtype("<f8"): 1}
_CODES = {0: np.dtype("<f4"), 1: np.dtype("<f8")}


class CheckpointError(ValueError):
    """Unreadable, corrupt or incompatible checkpoint."""


def encode_tensors(tensors: dict[str, np.ndarray]) -> bytes:
    body = []
    for name, arr in tensors.items():
        arr = np.asarray(arr)
        dt = arr.dtype.newbyteorder("<")
        if dt not in _DTYPES:
            raise CheckpointError(f"{name}: unsupported dtype {arr.dtype}")
        raw = name.encode("utf-8")
        body.append(struct.pack("<H", len(raw)) + raw)
        body.append(struct.pack("<BB", _DTYPES[dt], arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape))
        body.append(np.ascontiguousarray(arr, dtype=dt).tobytes())
    payload = b"".join(body)
    head = MAGIC + struct.pack("<II", VERSION, len(tensors))
    return head + payload + struct.pack("<I", zlib.crc32(payload))


def decode_tensors(data: bytes, source: str = "checkpoint") -> dict[str, np.ndarray]:
    if len(data) < 16 or data[:4] != MAGIC:
        raise CheckpointError(f"{source}: not a checkpoint file")
    version, count = struct.unpack_from("<II", data, 4)
    if version != VERSION:
        raise CheckpointError(f"{source}: unsupported checkpoint version {version}")
    payload = data[12:-4]
    (crc,) = struct.unpack_from("<I", data, len(data) - 4)
    if zlib.crc32(payload) != crc:
        raise CheckpointError(f"{source}: CRC mismatch")
    out = {}
    off = 0
    try:
        for _ in range(count):
            (n,) = struct.unpack_from("<H", payload, off)
            name = payload[off + 2: off + 2 + n].decode("utf-8")
            off += 2 + n
            code, rank = struct.unpack_from("<BB", payload, off)
            dims = struct.unpack_from(f"<{rank}I", payload, off + 2)
            off += 2 + 4 * rank
            dt = _CODES[code]
            size = int(np.prod(dims, dtype=np.int64))
            out[name] = np.frombuffer(payload, dtype=dt, count=size, offset=off).reshape(dims).astype(dt.newbyteorder("="))
            off += size * dt.itemsize
    except (struct.error, KeyError, ValueError) as e:
        raise CheckpointError(f"{source}: malformed tensor table") from e
    if off != len(payload):
        raise CheckpointError(f"{source}: trailing bytes in payload")
    return out


def _meta_tensor(value) -> np.ndarray:
    return np.frombuffer(json.dumps(value, sort_keys=True).encode("utf-8"), dtype=np.uint8).astype(np.float64)


def _meta_value(arr: np.ndarray):
    return json.loads(bytes(np.asarray(arr, dtype=np.uint8)).decode("utf-8"))


def file_hash(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


# ---------------------------------------------------------------------------
# model <-> tensors
# ---------------------------------------------------------------------------

def _cfg_meta(cfg: AttentionConfig) -> dict:
    return {"d_model": cfg.d_model, "heads": cfg.heads, "d_ff": cfg.d_ff, "n_layers": cfg.n_layers,
            "dropout": cfg.dropout}


def _lm_meta(lm: LanguageModel) -> dict:
    return {"kind": "lm", "cfg": _cfg_meta(lm.cfg), "domain_tag": lm.domain_tag, "lineage": list(lm.lineage)}


def _params(model, prefix: str = "") -> dict[str, np.ndarray]:
    return {prefix + k: p.data for k, p in model.named_parameters()}


def lm_tensors(lm: LanguageModel) -> dict[str, np.ndarray]:
    t = {"meta/kind": _meta_tensor("lm"), "meta/lm": _meta_tensor(_lm_meta(lm)),
         "meta/vocab": _meta_tensor(list(lm.vocab.symbols)), "meta/vocab_sha": _meta_tensor(lm.vocab.digest())}
    t.update(_params(lm))
    return t


def asr_tensors(model) -> dict[str, np.ndarray]:
    if isinstance(model, AedModel):
        arch = {"arch": "aed", "variant": model.variant, "hyper": vars(model.hyper).copy(),
                "cross_ff": model._cross_ff}
    elif isinstance(model, TransducerModel):
        arch = {"arch": "transducer", "variant": model.pred_kind, "hyper": vars(model.hyper).copy(),
                "d_joint": model.joint.enc_proj.weight.shape[1]}
    else:
        raise CheckpointError(f"cannot checkpoint {type(model).__name__}")
    arch.update(cfg=_cfg_meta(model.cfg), input_dim=model.encoder.in_proj.weight.shape[0],
                mask={"kind": model.mask.kind, "chunk_frames": model.mask.chunk_frames})
    t = {"meta/kind": _meta_tensor("asr"), "meta/arch": _meta_tensor(arch),
         "meta/vocab": _meta_tensor(list(model.vocab.symbols)), "meta/vocab_sha": _meta_tensor(model.vocab.digest())}
    if model.lm is not None:
        t["meta/lm"] = _meta_tensor(_lm_meta(model.lm))
    t.update({k: v for k, v in _params(model).items()})
    return t


def _check_vocab(t: dict, source: str) -> Vocabulary:
    vocab = Vocabulary(tuple(_meta_value(t["meta/vocab"])))
    if vocab.digest() != _meta_value(t["meta/vocab_sha"]):
        raise CheckpointError(f"{source}: vocabulary hash mismatch")
    return vocab


def _assign(model, t: dict, source: str, skip_prefix: str | None = None) -> None:
    params = model.parameters()
    for name, p in params.items():
        if skip_prefix and name.startswith(skip_prefix):
            continue
        if name not in t:
            raise CheckpointError(f"{source}: missing tensor {name}")
        if t[name].shape != p.data.shape:
            raise CheckpointError(f"{source}: shape mismatch for {name}")
        p.data = t[name].copy()
    extra = [k for k in t if not k.startswith("meta/") and k not in params]
    if extra:
        raise CheckpointError(f"{source}: unexpected tensors {extra[:3]}")


def _build_lm(meta: dict, vocab: Vocabulary, dtype) -> LanguageModel:
    with ad.default_dtype(dtype):
        lm = LanguageModel(vocab, AttentionConfig(**meta["cfg"]), seed=0, domain_tag=meta["domain_tag"])
    lm.lineage = tuple(meta["lineage"])
    return lm


def lm_from_tensors(t: dict, source: str = "checkpoint") -> LanguageModel:
    if _meta_value(t.get("meta/kind", _meta_tensor(""))) != "lm":
        raise CheckpointError(f"{source}: not a language-model checkpoint")
    vocab = _check_vocab(t, source)
    lm = _build_lm(_meta_value(t["meta/lm"]), vocab, t["embed.weight"].dtype)
    _assign(lm, t, source)
    return lm


def asr_from_tensors(t: dict, source: str = "checkpoint"):
    if _meta_value(t.get("meta/kind", _meta_tensor(""))) != "asr":
        raise CheckpointError(f"{source}: not an ASR checkpoint")
    vocab = _check_vocab(t, source)
    arch = _meta_value(t["meta/arch"])
    dtype = t["encoder.in_proj.weight"].dtype
    cfg = AttentionConfig(**arch["cfg"])
    mask = Mask(**arch["mask"])
    lm = None
    if "meta/lm" in t:
        lm = _build_lm(_meta_value(t["meta/lm"]), vocab, dtype)
        _assign(lm, {k[3:]: v for k, v in t.items() if k.startswith("lm.")}, source)
        lm.freeze()
    with ad.default_dtype(dtype):
        if arch["arch"] == "aed":
            model = AedModel(vocab, arch["input_dim"], cfg, arch["variant"], lm, AedHyper(**arch["hyper"]), mask,
                             cross_ff=arch["cross_ff"])
            if lm is not None and not np.array_equal(t["embed.weight"], lm.embed.weight.data):
                # acoustic stack kept an embedding table other than its LM's
                model.embed = TokenEmbedding(vocab.V, cfg.d_model, np.random.default_rng(0))
                model.embed.weight.requires_grad = False
        elif arch["arch"] == "transducer":
            model = TransducerModel(vocab, arch["input_dim"], cfg, arch["variant"], lm, arch["d_joint"], mask,
                                    TransducerHyper(**arch["hyper"]))
            if lm is not None and not np.array_equal(t["prediction.weight"], lm.embed.weight.data):
                model.prediction = StatelessPrediction(vocab.V, cfg.d_model, None,
                                                       table=ad.tensor(t["prediction.weight"]))
        else:
            raise CheckpointError(f"{source}: unknown architecture {arch['arch']!r}")
    _assign(model, t, source, skip_prefix="lm.")
    model.eval()
    return model


# ---------------------------------------------------------------------------
# files
# ---------------------------------------------------------------------------

def save_checkpoint(path, model) -> str:
    """Write ``model`` (LM or ASR) to ``path``; returns the file's sha256."""
    t = lm_tensors(model) if isinstance(model, LanguageModel) else asr_tensors(model)
    data = encode_tensors(t)
    Path(path).write_bytes(data)
    return hashlib.sha256(data).hexdigest()


def load_checkpoint(path):
    p = Path(path)
    if not p.exists():
        raise FileNotFoundError(f"checkpoint not found: {path}")
    t = decode_tensors(p.read_bytes(), str(path))
    kind = _meta_value(t["meta/kind"]) if "meta/kind" in t else None
    if kind == "lm":
        return lm_from_tensors(t, str(path))
    if kind == "asr":
        return asr_from_tensors(t, str(path))
    raise CheckpointError(f"{path}: unknown checkpoint kind")


def load_lm(path) -> LanguageModel:
    obj = load_checkpoint(path)
    if not isinstance(obj, LanguageModel):
        raise CheckpointError(f"{path}: expected a language-model checkpoint")
    return obj
