"""Byte-level corpus handling.

Text is tokenized at the byte level: ids 0..255 are raw byte values and
id 256 is a BOS marker, so the vocabulary size is 257.  A corpus is cut
into non-overlapping windows of the training sequence length; each
window's input is the BOS token followed by all but the last byte, and
its target is the window itself (next-byte prediction at every
position, including the first).
"""

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, ValidationError

BOS_ID = 256
VOCAB_SIZE = 257


def encode(text):
    """Text (str or bytes) to an int64 id array. No BOS is added here."""
    if isinstance(text, str):
        text = text.encode("utf-8")
    if not isinstance(text, (bytes, bytearray)):
        raise ValidationError(f"encode expects str or bytes, got {type(text).__name__}")
    return np.frombuffer(bytes(text), dtype=np.uint8).astype(np.int64)


def decode(ids):
    """Id array back to text. BOS tokens are dropped, not rendered."""
    ids = np.asarray(ids)
    if ids.size == 0:
        return ""
    if ids.min() < 0 or ids.max() >= VOCAB_SIZE:
        raise ValidationError("token ids out of range for byte vocabulary")
    kept = ids[ids != BOS_ID]
    return bytes(kept.astype(np.uint8).tolist()).decode("utf-8", errors="replace")


def load_corpus(path):
    with open(path, "rb") as f:
        raw = f.read()
    if not raw:
        raise ValidationError(f"corpus file is empty: {path}")
    return encode(raw)


def split_corpus(ids, val_fraction=0.1):
    """Split a token stream into (train, val) with the tail held out."""
    ids = np.asarray(ids)
    if not 0.0 <= val_fraction < 1.0:
        raise ConfigError(f"val_fraction must be in [0, 1), got {val_fraction}")
    n_val = int(round(len(ids) * val_fraction))
    if len(ids) - n_val < 1:
        raise ValidationError("corpus too small for the requested split")
    if n_val == 0:
        return ids.copy(), ids[:0].copy()
    return ids[:-n_val].copy(), ids[-n_val:].copy()


@dataclass
class WindowSet:
    """Non-overlapping next-byte prediction windows over a token stream."""

    inputs: np.ndarray   # [n, seq_len], starts with BOS
    targets: np.ndarray  # [n, seq_len]

    def __len__(self):
        return self.inputs.shape[0]


def make_windows(ids, seq_len):
    ids = np.asarray(ids)
    if seq_len < 1:
        raise ConfigError(f"seq_len must be positive, got {seq_len}")
    n = len(ids) // seq_len
    if n == 0:
        raise ValidationError(
            f"stream of {len(ids)} tokens yields no windows of length {seq_len}")
    chunks = ids[:n * seq_len].reshape(n, seq_len)
    inputs = np.empty_like(chunks)
    inputs[:, 0] = BOS_ID
    inputs[:, 1:] = chunks[:, :-1]
    return WindowSet(inputs=inputs, targets=chunks.copy())


def batch_at(windows, step, batch_size):
    """Deterministic batch for a given step: rows (step*B + j) mod N.

    Sequential modular sweep rather than shuffling keeps runs bit-exact
    across platforms without carrying sampler state in checkpoints.
    """
    n = len(windows)
    if n == 0:
        raise ValidationError("empty window set")
    if batch_size < 1:
        raise ConfigError(f"batch_size must be positive, got {batch_size}")
    idx = (step * batch_size + np.arange(batch_size)) % n
    return windows.inputs[idx], windows.targets[idx]
