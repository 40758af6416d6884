"""Text -> m-dimensional event/context representations.

A provider maps texts to fixed d-vectors (constants for the optimiser); a
single trainable projection, shared by events and contexts, scales them to
the model width m.
"""
from __future__ import annotations

import hashlib
import json
import re
import socket
import urllib.error
import urllib.request
from dataclasses import dataclass
from pathlib import Path
from typing import Protocol, Sequence

import numpy as np

from . import numerics as nx
from .numerics import ParameterStore, Tensor

_TOKEN_RE = re.compile(r"\w+", re.UNICODE)


def tokenize(text: str) -> list[str]:
    """Lowercase and split on whitespace/punctuation."""
    return _TOKEN_RE.findall(text.lower())


def _hash64(token: str) -> int:
    return int.from_bytes(hashlib.blake2b(token.encode("utf-8"), digest_size=8).digest(), "little")


def hashing_embed(text: str, d: int) -> np.ndarray:
    """Signed feature-hashing bag of tokens, L2-normalised."""
    if d < 8:
        raise ValueError(f"hashing dimension must be >= 8, got {d}")
    toks = tokenize(text)
    if not toks:
        raise ValueError("empty text")
    vec = np.zeros(d)
    for tok in toks:
        h = _hash64(tok)
        sign = -1.0 if (h >> 63) & 1 else 1.0
        vec[h % d] += sign
    norm = np.linalg.norm(vec)
    # all tokens may cancel out in the same bucket
    return vec / norm if norm > 0 else vec


class EmbeddingError(RuntimeError):
    pass


class MissingTextError(EmbeddingError, KeyError):
    def __init__(self, text):
        self.text = text
        super().__init__(f"no embedding for text {text!r}")

    def __str__(self):
        return self.args[0]


class EmbeddingTimeout(EmbeddingError):
    pass


class EmbeddingHTTPError(EmbeddingError):
    def __init__(self, status, body=""):
        self.status = status
        super().__init__(f"embedding service returned HTTP {status}: {body[:200]}")


class CountMismatchError(EmbeddingError):
    pass


class DimMismatchError(EmbeddingError):
    pass


class EmbeddingProvider(Protocol):
    name: str
    dim: int

    def embed(self, texts: Sequence[str]) -> np.ndarray: ...


class HashingProvider:
    """Self-contained default provider; see :func:`hashing_embed`."""

    name = "hashing"

    def __init__(self, dim: int = 256):
        if dim < 8:
            raise ValueError(f"hashing dimension must be >= 8, got {dim}")
        self.dim = dim
        self._cache: dict[str, np.ndarray] = {}

    def embed(self, texts: Sequence[str]) -> np.ndarray:
        out = np.empty((len(texts), self.dim))
        for i, t in enumerate(texts):
            v = self._cache.get(t)
            if v is None:
                v = self._cache[t] = hashing_embed(t, self.dim)
            out[i] = v
        return out


class FileProvider:
    """Exact lookup in a JSONL file of ``{"text": ..., "vec": [...]}`` records."""

    name = "file"

    def __init__(self, path):
        self.path = Path(path)
        self._table: dict[str, np.ndarray] = {}
        self.dim = None
        try:
            fh = self.path.open(encoding="utf-8")
        except OSError as exc:
            raise EmbeddingError(f"cannot read embedding file {self.path}: {exc}") from exc
        with fh:
            for lineno, line in enumerate(fh, 1):
                if not line.strip():
                    continue
                try:
                    rec = json.loads(line)
                    text, vec = rec["text"], np.asarray(rec["vec"], dtype=np.float64)
                except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
                    raise EmbeddingError(f"{self.path}:{lineno}: bad record ({exc})") from exc
                if vec.ndim != 1:
                    raise EmbeddingError(f"{self.path}:{lineno}: vec must be a flat list")
                if self.dim is None:
                    self.dim = vec.size
                elif vec.size != self.dim:
                    raise DimMismatchError(
                        f"{self.path}:{lineno}: dimension {vec.size} != {self.dim} of first record")
                self._table[text] = vec
        if self.dim is None:
            raise EmbeddingError(f"{self.path}: no records")

    def embed(self, texts: Sequence[str]) -> np.ndarray:
        out = np.empty((len(texts), self.dim))
        for i, t in enumerate(texts):
            try:
                out[i] = self._table[t]
            except KeyError:
                raise MissingTextError(t) from None
        return out


class HttpProvider:
    """Client for ``POST {endpoint}/embed`` with body ``{"texts": [...]}``.

    Sends one request per :meth:`embed` call. ``dim`` is learned from the
    first response unless given.
    """

    name = "http"

    def __init__(self, endpoint: str, timeout: float = 10.0, dim: int | None = None):
        self.endpoint = endpoint.rstrip("/")
        self.timeout = timeout
        self.dim = dim

    def embed(self, texts: Sequence[str]) -> np.ndarray:
        texts = list(texts)
        body = json.dumps({"texts": texts}).encode("utf-8")
        req = urllib.request.Request(self.endpoint + "/embed", data=body, method="POST",
                                     headers={"Content-Type": "application/json"})
        try:
            with urllib.request.urlopen(req, timeout=self.timeout) as resp:
                payload = json.loads(resp.read().decode("utf-8"))
        except urllib.error.HTTPError as exc:
            raise EmbeddingHTTPError(exc.code, exc.read().decode("utf-8", "replace")) from exc
        except (socket.timeout, TimeoutError) as exc:
            raise EmbeddingTimeout(f"{self.endpoint} timed out after {self.timeout}s") from exc
        except urllib.error.URLError as exc:
            if isinstance(exc.reason, (socket.timeout, TimeoutError)):
                raise EmbeddingTimeout(f"{self.endpoint} timed out after {self.timeout}s") from exc
            raise EmbeddingError(f"{self.endpoint} unreachable: {exc.reason}") from exc

        vectors = payload.get("vectors")
        dim = payload.get("dim")
        if not isinstance(vectors, list) or len(vectors) != len(texts):
            got = len(vectors) if isinstance(vectors, list) else None
            raise CountMismatchError(f"asked for {len(texts)} vectors, got {got}")
        arr = np.asarray(vectors, dtype=np.float64)
        if arr.ndim != 2 or arr.shape[1] != dim:
            raise DimMismatchError(f"declared dim {dim}, vectors have shape {arr.shape}")
        if self.dim is None:
            self.dim = dim
        elif dim != self.dim:
            raise DimMismatchError(f"expected dim {self.dim}, service reported {dim}")
        return arr


def make_provider(kind: str, **params) -> EmbeddingProvider:
    if kind == "hashing":
        return HashingProvider(**params)
    if kind == "file":
        return FileProvider(**params)
    if kind == "http":
        return HttpProvider(**params)
    raise ValueError(f"unknown provider {kind!r}")


@dataclass
class RawChain:
    id: str
    events: list
    contexts: list

    def __post_init__(self):
        if not 3 <= len(self.events) <= 5:
            raise ValueError(f"chain {self.id}: needs 3-5 events, got {len(self.events)}")
        if len(self.contexts) != len(self.events) - 1:
            raise ValueError(f"chain {self.id}: {len(self.events)} events need "
                             f"{len(self.events) - 1} contexts, got {len(self.contexts)}")
        for t in [*self.events, *self.contexts]:
            if not isinstance(t, str) or not t.strip():
                raise ValueError(f"chain {self.id}: empty text")

    @property
    def length(self) -> int:
        return len(self.events)


@dataclass
class EmbeddedChain:
    event_vecs: list   # h_1..h_n
    context_vecs: list  # h^C_1..h^C_{n-1}


class Projection:
    """Trainable d -> m map shared by events and contexts."""

    W = "proj.W"
    b = "proj.b"

    @staticmethod
    def init(store: ParameterStore, d: int, m: int, rng: np.random.Generator) -> None:
        store.init_linear("proj", d, m, rng)

    @staticmethod
    def apply(x, store: ParameterStore) -> Tensor:
        return nx.affine(nx.as_tensor(x), store[Projection.W], store[Projection.b])


def embed_chain(provider: EmbeddingProvider, store: ParameterStore, chain: RawChain) -> EmbeddedChain:
    try:
        ev = provider.embed(chain.events)
        cx = provider.embed(chain.contexts)
    except EmbeddingError as exc:
        exc.chain_id = chain.id
        exc.args = (f"chain {chain.id}: {exc}",) + exc.args[1:]
        raise
    return EmbeddedChain([Projection.apply(v, store) for v in ev],
                         [Projection.apply(v, store) for v in cx])
