"""Calibration data: byte tokenizer, window sampling and activation capture."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import InputError
from .model import BlockCapture, Checkpoint, forward, forward_backward
from .numcore import archive_write

PAD, BOS, EOS = 0, 1, 2
N_SPECIAL = 3
VOCAB_SIZE = 256 + N_SPECIAL

DATA_DIR = Path(__file__).parent / "data"
TRAIN_CORPUS = DATA_DIR / "corpus_train.txt"
EVAL_CORPUS = DATA_DIR / "corpus_eval.txt"


def tokenize(text) -> np.ndarray:
    raw = text.encode("utf-8") if isinstance(text, str) else bytes(text)
    return np.frombuffer(raw, dtype=np.uint8).astype(np.int64) + N_SPECIAL


def detokenize(ids) -> bytes:
    ids = np.asarray(ids, dtype=np.int64)
    ids = ids[ids >= N_SPECIAL]
    return (ids - N_SPECIAL).astype(np.uint8).tobytes()


def load_corpus(path) -> np.ndarray:
    data = Path(path).read_bytes()
    if not data:
        raise InputError(f"corpus {path} is empty")
    return tokenize(data)


@dataclass(frozen=True)
class CalibSet:
    sequences: np.ndarray  # n_seqs x seq_len
    offsets: np.ndarray
    source: str = ""
    seed: int = 0

    @property
    def n_seqs(self) -> int:
        return self.sequences.shape[0]

    @property
    def seq_len(self) -> int:
        return self.sequences.shape[1]


def sample_calibration(corpus, n_seqs: int, seq_len: int, seed: int, source: str = "") -> CalibSet:
    """Draw ``n_seqs`` windows at uniform start offsets."""
    corpus = np.asarray(corpus, dtype=np.int64)
    if seq_len < 2:
        raise InputError("seq_len must be at least 2")
    if n_seqs < 1:
        raise InputError("n_seqs must be positive")
    if corpus.size < seq_len:
        raise InputError(f"corpus has {corpus.size} tokens, shorter than seq_len={seq_len}")
    rng = np.random.default_rng(seed)
    offsets = rng.integers(0, corpus.size - seq_len + 1, size=n_seqs)
    seqs = np.stack([corpus[o : o + seq_len] for o in offsets])
    return CalibSet(seqs, offsets, str(source), seed)


def _trim(cap: BlockCapture) -> dict:
    # The final position of a sequence carries no loss term.
    return {
        "ffn_input": cap.ffn_input[:, :-1],
        "hidden": cap.hidden[:, :-1],
        "block_in": cap.block_in[:, :-1],
        "block_out": cap.block_out[:, :-1],
        "attn_out": cap.attn_out[:, :-1],
    }


_FWD_FIELDS = ("ffn_input", "hidden", "block_in", "block_out", "attn_out")


def _concat(per_seq: list[list[dict]], n_layers: int) -> list[dict]:
    out = []
    for l in range(n_layers):
        out.append({k: np.concatenate([seq[l][k] for seq in per_seq], axis=1) for k in per_seq[0][l]})
    return out


def capture_all(ckpt: Checkpoint, calib: CalibSet) -> list[BlockCapture]:
    """Forward and backward every calibration sequence and stack the
    per-block records column-wise in sequence order."""
    per_seq = []
    for seq in calib.sequences:
        _, caps, grads = forward_backward(ckpt, seq)
        per_seq.append([dict(_trim(c), grad=g) for c, g in zip(caps, grads)])
    merged = _concat(per_seq, ckpt.config.n_layers)
    return [BlockCapture(layer=l, **fields) for l, fields in enumerate(merged)]


def forward_captures(ckpt: Checkpoint, calib: CalibSet, start_layer: int = 0) -> list[dict]:
    per_seq = []
    for seq in calib.sequences:
        _, caps = forward(ckpt, seq, capture=True)
        per_seq.append([_trim(c) for c in caps[start_layer:]])
    return _concat(per_seq, ckpt.config.n_layers - start_layer)


def refresh_forward(ckpt: Checkpoint, calib: CalibSet, captures: list[BlockCapture], start_layer: int = 0) -> list[BlockCapture]:
    """Recompute forward fields for blocks ``>= start_layer`` through the
    (partially pruned) checkpoint. Gradient snapshots are carried over."""
    fresh = forward_captures(ckpt, calib, start_layer)
    out = list(captures)
    for i, fields in enumerate(fresh):
        l = start_layer + i
        out[l] = dataclasses.replace(captures[l], **fields)
    return out


def save_captures(path, captures: list[BlockCapture]) -> None:
    tensors = []
    for cap in captures:
        for name in _FWD_FIELDS + ("grad",):
            value = getattr(cap, name)
            if value is not None:
                tensors.append((f"layers.{cap.layer}.{name}", value))
    archive_write(path, tensors)
