"""Corpus loading, tokenizer construction, splits, checkpoints.

Corpora are UTF-8 JSON lines with "text" and "label" fields.  The
tokenizer is word-level: lowercased alphanumeric runs, ranked by
frequency with lexicographic tie-breaks, on top of four reserved ids
(CLS=0, PAD=1, UNK=2, MASK=3).  Checkpoints are a little-endian binary
format holding the config JSON and every parameter tensor as float32.
"""

from __future__ import annotations

import json
import re
import struct
from dataclasses import dataclass, field

import numpy as np

from maskfew.encoder import (CLS_ID, EncoderConfig, MASK_ID, ModelParams,
                             PAD_ID, TokenSequence, UNK_ID)
from maskfew.errors import ContractError, FormatError, ParseError, SchemaError
from maskfew.tensor import Tensor

_WORD_RE = re.compile(r"[0-9a-z_]+")

CKPT_MAGIC = b"MBFT"
CKPT_VERSION = 1


@dataclass
class Corpus:
    records: list  # list[{"text": str, "label": str}]
    label_map: dict  # label string -> class index
    split_tag: str = "train"

    def __post_init__(self):
        for i, rec in enumerate(self.records):
            if rec["label"] not in self.label_map:
                raise ContractError(f"record {i} has label {rec['label']!r} missing from label_map")
            if not rec["text"]:
                raise ContractError(f"record {i} has empty text")

    def __len__(self):
        return len(self.records)

    def labels_of(self) -> np.ndarray:
        return np.array([self.label_map[r["label"]] for r in self.records], dtype=np.int64)

    def texts(self) -> list:
        return [r["text"] for r in self.records]


def load_corpus(path, split_tag: str = "train") -> Corpus:
    """Parse a JSONL corpus; label indices follow lexicographic label order."""
    records = []
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as e:
                raise ParseError(f"{path}: malformed JSON on line {lineno}: {e.msg}") from e
            if not isinstance(obj, dict) or "text" not in obj or "label" not in obj:
                raise SchemaError(f"{path}: line {lineno} lacks a text/label field")
            records.append({"text": str(obj["text"]), "label": str(obj["label"])})
    labels = sorted({r["label"] for r in records})
    return Corpus(records, {lab: i for i, lab in enumerate(labels)}, split_tag)


@dataclass
class Tokenizer:
    vocab: dict  # token -> id, including the reserved ids
    lowercase: bool = True
    max_len: int = 64
    _id_to_token: dict = field(default=None, repr=False)  # type: ignore[assignment]

    RESERVED = {"[CLS]": CLS_ID, "[PAD]": PAD_ID, "[UNK]": UNK_ID, "[MASK]": MASK_ID}

    def __post_init__(self):
        if self._id_to_token is None:
            self._id_to_token = {i: t for t, i in self.vocab.items()}

    @property
    def vocab_size(self) -> int:
        return len(self.vocab)

    def tokenize(self, text: str) -> list:
        if self.lowercase:
            text = text.lower()
        return _WORD_RE.findall(text)

    def encode(self, text: str) -> TokenSequence:
        ids = [CLS_ID]
        for tok in self.tokenize(text)[: self.max_len - 1]:
            ids.append(self.vocab.get(tok, UNK_ID))
        return TokenSequence(np.array(ids, dtype=np.int64))

    def decode(self, ids) -> list:
        return [self._id_to_token.get(int(i), "[UNK]") for i in ids]


def build_tokenizer(corpus: Corpus, vocab_size: int, max_len: int = 64,
                    lowercase: bool = True) -> Tokenizer:
    """Top (vocab_size - 4) tokens by frequency; ties lexicographic."""
    if vocab_size <= len(Tokenizer.RESERVED):
        raise ContractError(f"vocab_size {vocab_size} leaves no room beyond reserved ids")
    counts = {}
    word_re = _WORD_RE
    for rec in corpus.records:
        text = rec["text"].lower() if lowercase else rec["text"]
        for tok in word_re.findall(text):
            counts[tok] = counts.get(tok, 0) + 1
    ranked = sorted(counts.items(), key=lambda kv: (-kv[1], kv[0]))
    vocab = dict(Tokenizer.RESERVED)
    for tok, _ in ranked[: vocab_size - len(Tokenizer.RESERVED)]:
        vocab[tok] = len(vocab)
    return Tokenizer(vocab, lowercase=lowercase, max_len=max_len)


def encode_text(tok: Tokenizer, text: str) -> TokenSequence:
    """CLS-prefixed encoding, truncated at max_len, all positions active."""
    return tok.encode(text)


def split_base_novel(corpus: Corpus, novel_labels: list) -> tuple:
    """Partition a corpus into disjoint base and novel corpora.

    Class indices live in the joint space: base labels first (sorted),
    then novel labels (sorted).
    """
    novel = list(dict.fromkeys(novel_labels))
    if not novel:
        raise ContractError("novel label list is empty")
    all_labels = set(corpus.label_map)
    unknown = [l for l in novel if l not in all_labels]
    if unknown:
        raise ContractError(f"novel labels absent from the corpus: {unknown}")
    base_labels = sorted(all_labels - set(novel))
    if not base_labels:
        raise ContractError("novel labels must be a strict subset of the corpus labels")
    novel_sorted = sorted(novel)
    base_map = {lab: i for i, lab in enumerate(base_labels)}
    novel_map = {lab: len(base_labels) + i for i, lab in enumerate(novel_sorted)}
    base_recs = [r for r in corpus.records if r["label"] in base_map]
    novel_recs = [r for r in corpus.records if r["label"] in novel_map]
    return (Corpus(base_recs, base_map, corpus.split_tag),
            Corpus(novel_recs, novel_map, corpus.split_tag))


# ---------------------------------------------------------------------------
# checkpoints


def save_checkpoint(params: ModelParams, cfgs: dict, path):
    """Binary layout: magic, version, config JSON, then named f32 tensors."""
    blob = dict(cfgs)
    blob["encoder"] = params.cfg.to_dict()
    config_bytes = json.dumps(blob, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(CKPT_MAGIC)
        fh.write(struct.pack("<I", CKPT_VERSION))
        fh.write(struct.pack("<I", len(config_bytes)))
        fh.write(config_bytes)
        fh.write(struct.pack("<I", len(params.tensors)))
        for name, t in params.named():
            nb = name.encode("utf-8")
            fh.write(struct.pack("<H", len(nb)))
            fh.write(nb)
            fh.write(struct.pack("<I", t.data.ndim))
            for extent in t.data.shape:
                fh.write(struct.pack("<I", extent))
            fh.write(np.ascontiguousarray(t.data, dtype="<f4").tobytes())


def _read_exact(fh, n: int, what: str) -> bytes:
    buf = fh.read(n)
    if len(buf) != n:
        raise FormatError(f"checkpoint truncated while reading {what}")
    return buf


def load_checkpoint(path) -> tuple:
    """Returns (ModelParams, config dict as saved)."""
    with open(path, "rb") as fh:
        if _read_exact(fh, 4, "magic") != CKPT_MAGIC:
            raise FormatError(f"{path}: bad magic; not a maskfew checkpoint")
        (version,) = struct.unpack("<I", _read_exact(fh, 4, "version"))
        if version != CKPT_VERSION:
            raise FormatError(f"{path}: unsupported checkpoint version {version}")
        (clen,) = struct.unpack("<I", _read_exact(fh, 4, "config length"))
        cfgs = json.loads(_read_exact(fh, clen, "config block").decode("utf-8"))
        enc_cfg = EncoderConfig(**cfgs["encoder"])
        (count,) = struct.unpack("<I", _read_exact(fh, 4, "tensor count"))
        tensors = {}
        for _ in range(count):
            (nlen,) = struct.unpack("<H", _read_exact(fh, 2, "name length"))
            name = _read_exact(fh, nlen, "tensor name").decode("utf-8")
            if name in tensors:
                raise FormatError(f"{path}: duplicate tensor name {name!r}")
            (rank,) = struct.unpack("<I", _read_exact(fh, 4, "rank"))
            shape = tuple(struct.unpack("<I", _read_exact(fh, 4, "extent"))[0]
                          for _ in range(rank))
            n = int(np.prod(shape, dtype=np.int64)) if shape else 1
            raw = _read_exact(fh, 4 * n, f"tensor {name}")
            data = np.frombuffer(raw, dtype="<f4").astype(np.float64).reshape(shape)
            tensors[name] = Tensor(data, requires_grad=True)
        trailing = fh.read(1)
        if trailing:
            raise FormatError(f"{path}: trailing bytes after the last tensor")
    return ModelParams(tensors, enc_cfg), cfgs


# ---------------------------------------------------------------------------
# synthetic corpus


_FILLER = ["the", "of", "and", "to", "a", "in", "it", "is", "on", "as",
           "was", "for", "with", "that", "this"]


def synth_corpus(n_base: int = 4, n_novel: int = 2, train_per_class: int = 50,
                 test_per_class: int = 30, words_per_class: int = 6,
                 min_len: int = 6, max_len: int = 14, signal_prob: float = 0.65,
                 seed: int = 0) -> tuple:
    """Vocabulary-signal separable corpus: each class owns signal words.

    Every class gets a disjoint signal-word pool; sentences mix signal
    words with shared filler at ``signal_prob``.

    Returns (train_records, test_records, novel_label_names).
    """
    rng = np.random.default_rng(seed)
    labels = [f"base{i}" for i in range(n_base)] + [f"novel{i}" for i in range(n_novel)]
    signal = {lab: [f"w{ci}x{j}" for j in range(words_per_class)]
              for ci, lab in enumerate(labels)}

    def make_split(per_class):
        records = []
        for lab in labels:
            for _ in range(per_class):
                length = int(rng.integers(min_len, max_len + 1))
                words = []
                for _ in range(length):
                    if rng.random() < signal_prob:
                        words.append(signal[lab][int(rng.integers(len(signal[lab])))])
                    else:
                        words.append(_FILLER[int(rng.integers(len(_FILLER)))])
                # guarantee at least one class-signal token
                if not any(w in signal[lab] for w in words):
                    words[0] = signal[lab][0]
                records.append({"text": " ".join(words), "label": lab})
        return records

    train = make_split(train_per_class)
    test = make_split(test_per_class)
    return train, test, [f"novel{i}" for i in range(n_novel)]


def write_jsonl(records: list, path):
    with open(path, "w", encoding="utf-8") as fh:
        for rec in records:
            fh.write(json.dumps(rec, sort_keys=True) + "\n")
