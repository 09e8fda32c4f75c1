"""Deterministic bag-of-tokens text embedding and command-script parsing."""

from __future__ import annotations

import re
from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from ._validation import InputError

EMBED_DIM = 512
TABLE_ROWS = 4096
TABLE_SEED = 20240613

FNV_OFFSET = 0xCBF29CE484222325
FNV_PRIME = 0x100000001B3
_MASK64 = 0xFFFFFFFFFFFFFFFF

_PUNCT = re.compile(r"[^\w\s]")


class ScriptError(InputError):
    """Malformed command script; ``line`` is 1-based."""

    def __init__(self, message, line=None):
        super().__init__(f"line {line}: {message}" if line is not None else message)
        self.line = line


def fnv1a_64(data: bytes) -> int:
    h = FNV_OFFSET
    for byte in data:
        h ^= byte
        h = (h * FNV_PRIME) & _MASK64
    return h


def tokenize(text):
    """Lowercase, drop punctuation, split on whitespace."""
    if not isinstance(text, str):
        raise InputError("text must be a string")
    return _PUNCT.sub(" ", text.lower()).split()


class TextEncoder:
    """Maps text to a unit vector by summing hashed rows of a seeded random table.

    The table is generated once from ``seed`` and never mutated, so instances are
    safe to share across threads.
    """

    def __init__(self, dim=EMBED_DIM, rows=TABLE_ROWS, seed=TABLE_SEED):
        if dim < 1 or rows < 1:
            raise InputError("dim and rows must be positive")
        self.dim = int(dim)
        self.rows = int(rows)
        self.seed = int(seed)
        table = np.random.default_rng(self.seed).standard_normal((self.rows, self.dim))
        table.setflags(write=False)
        self._table = table
        self._cache = {}

    def token_index(self, token):
        return fnv1a_64(token.encode("utf-8")) % self.rows

    def embed(self, text):
        tokens = tokenize(text)
        if not tokens:
            raise InputError("cannot embed empty text")
        key = " ".join(sorted(tokens))
        cached = self._cache.get(key)
        if cached is not None:
            return cached.copy()
        # sorted token order makes the float summation order-independent
        v = np.zeros(self.dim)
        for tok in sorted(tokens):
            v += self._table[self.token_index(tok)]
        norm = np.linalg.norm(v)
        if not norm > 0:
            raise InputError(f"degenerate embedding for {text!r}")
        v = v / norm
        self._cache[key] = v
        return v.copy()


@lru_cache(maxsize=1)
def default_encoder():
    return TextEncoder()


def embed_text(text):
    return default_encoder().embed(text)


def similarity(a, b):
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    if a.shape != b.shape or a.ndim != 1:
        raise InputError("embeddings must be 1-D vectors of equal length")
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if not (na > 0 and nb > 0):
        raise InputError("zero-norm embedding")
    return float(np.clip(a @ b / (na * nb), -1.0, 1.0))


@dataclass(frozen=True)
class Command:
    text: str
    duration: float


def parse_script(text):
    """Parse ``<command>: <seconds>`` lines; blank lines and ``#`` comments are skipped.

    The split is on the last colon so commands may contain colons themselves.
    Quotes around the whole line or around the command are stripped.
    """
    out = []
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if len(line) > 1 and line[0] == line[-1] and line[0] in "\"'":
            line = line[1:-1].strip()
        if ":" not in line:
            raise ScriptError(f"expected '<command>: <seconds>', got {raw.strip()!r}", lineno)
        cmd, _, dur = line.rpartition(":")
        cmd = cmd.strip().strip("\"'").strip()
        if not cmd:
            raise ScriptError("empty command", lineno)
        try:
            seconds = float(dur.strip())
        except ValueError as exc:
            raise ScriptError(f"duration {dur.strip()!r} is not a number", lineno) from exc
        if not np.isfinite(seconds) or seconds <= 0:
            raise ScriptError(f"duration must be positive and finite, got {seconds}", lineno)
        out.append(Command(cmd, seconds))
    return out


def read_script(path):
    with open(path, encoding="utf-8") as fh:
        return parse_script(fh.read())
