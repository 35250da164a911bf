"""Model backends: availability masking, context caching, and two concrete
autoregressive models over the token grid.

Two backends are provided:

* :class:`ToyTransformer` — a small seeded transformer with absolute position
  embeddings indexed by raster index.  Cache entries (per-layer key/value
  vectors) are computed under the availability mask *at commit time* and are
  frozen thereafter; they are never recomputed when raster predecessors that
  were missing at commit time arrive later.  This freezing is the single
  place where out-of-order decoding diverges from a full-context recompute.
* :class:`LocalOracle` — an analytic model whose conditionals depend on a
  fixed spatial neighborhood only, so window-based decoding is exact and
  equivalence tests can assert bitwise equality.
"""

from __future__ import annotations

import abc
import bisect
import json
import math
from dataclasses import dataclass

import numpy as np

from .grid import DecodeState, GridShape, Position, raster_index
from .scheduler import row_start_input

_BOS = -1  # sentinel input token for the slot before raster index 0


class CacheIntegrityError(RuntimeError):
    """Raised when cache contents diverge from the decode state."""


class AttentionUnsupportedError(RuntimeError):
    """Raised when a backend cannot expose attention scores."""


@dataclass(frozen=True)
class ConditioningContext:
    """Conditional (caller prefix) or unconditional (null prefix) context."""

    mode: str  # "conditional" | "unconditional"
    prefix_tokens: tuple[int, ...]

    def __post_init__(self) -> None:
        if self.mode not in ("conditional", "unconditional"):
            raise ValueError(f"unknown conditioning mode {self.mode!r}")


def availability_mask(state: DecodeState, query: Position) -> set[int]:
    """Raster indices the query may attend to.

    Attend to prefix tokens plus decoded (or pre-inserted) tokens whose
    raster index strictly precedes the query's.  Decoded tokens from rows
    below the query are excluded to keep the train-time causal shape.
    """
    shape = state.shape
    t = raster_index(shape, query)
    mask = set(range(min(shape.prefix_len, t)))
    for pos in state.values:
        u = raster_index(shape, pos)
        if u < t:
            mask.add(u)
    return mask


class ModelBackend(abc.ABC):
    """Batched next-token predictor over a partially decoded grid.

    ``forward`` is the stateless reference: logits for each query from the
    current decode state alone.  ``forward_cached``/``commit`` form the
    incremental path the engine drives; for backends without internal state
    the two coincide.
    """

    vocab_size: int

    @abc.abstractmethod
    def forward(self, state: DecodeState, queries: list[Position],
                condition: ConditioningContext) -> list[np.ndarray]:
        ...

    @abc.abstractmethod
    def new_cache(self, shape: GridShape, condition: ConditioningContext):
        ...

    @abc.abstractmethod
    def forward_cached(self, cache, state: DecodeState, queries: list[Position],
                       condition: ConditioningContext) -> list[np.ndarray]:
        ...

    @abc.abstractmethod
    def commit(self, cache, pos: Position, token: int) -> None:
        ...

    def null_prefix(self, length: int) -> tuple[int, ...]:
        """Prefix used for the unconditional guidance context."""
        return (self.vocab_size,) * length


class ContextCache:
    """Frozen per-position key/value entries for :class:`ToyTransformer`."""

    def __init__(self, shape: GridShape, condition: ConditioningContext,
                 layers: int, heads: int, head_dim: int) -> None:
        n = shape.raster_len
        self.shape = shape
        self.condition = condition
        self.keys = np.zeros((n, layers, heads, head_dim), dtype=np.float64)
        self.vals = np.zeros((n, layers, heads, head_dim), dtype=np.float64)
        self.present = np.zeros(n, dtype=bool)
        self.tokens = np.full(n, -1, dtype=np.int64)
        self.committed: list[int] = []  # sorted raster indices
        self.commit_order: list[int] = []

    def context_before(self, raster: int) -> np.ndarray:
        """Sorted committed raster indices strictly below ``raster``."""
        hi = bisect.bisect_left(self.committed, raster)
        return np.asarray(self.committed[:hi], dtype=np.int64)

    def insert(self, raster: int, token: int,
               k: np.ndarray, v: np.ndarray) -> None:
        if self.present[raster]:
            raise CacheIntegrityError(f"double commit at raster index {raster}")
        self.keys[raster] = k
        self.vals[raster] = v
        self.tokens[raster] = token
        self.present[raster] = True
        bisect.insort(self.committed, raster)
        self.commit_order.append(raster)


def _layer_norm(x: np.ndarray) -> np.ndarray:
    mu = x.mean(axis=-1, keepdims=True)
    var = x.var(axis=-1, keepdims=True)
    return (x - mu) / np.sqrt(var + 1e-6)


def _gelu(x: np.ndarray) -> np.ndarray:
    return 0.5 * x * (1.0 + np.tanh(math.sqrt(2.0 / math.pi) * (x + 0.044715 * x ** 3)))


class ToyTransformer(ModelBackend):
    """Seeded random-parameter transformer over raster-indexed tokens.

    Parameters are reproducible from a 64-bit seed.  All math runs in
    float64; within one process outputs are bitwise reproducible, across
    platforms they agree to ~1e-6 because BLAS may reassociate the matmul
    reductions.  Token id ``vocab_size`` is the reserved null-prefix token
    for unconditional guidance contexts.
    """

    def __init__(self, vocab_size: int = 256, max_positions: int = 4096,
                 layers: int = 2, width: int = 64, heads: int = 4,
                 seed: int = 0) -> None:
        if width % heads != 0:
            raise ValueError("width must be divisible by head count")
        self.vocab_size = vocab_size
        self.max_positions = max_positions
        self.layers = layers
        self.width = width
        self.heads = heads
        self.head_dim = width // heads
        self.seed = seed

        rng = np.random.default_rng(seed)
        std = 0.1
        d = width
        self.tok_emb = rng.normal(0.0, std, size=(vocab_size + 1, d))
        self.pos_emb = rng.normal(0.0, std, size=(max_positions, d))
        self.bos_emb = rng.normal(0.0, std, size=d)
        self.blocks = []
        for _ in range(layers):
            self.blocks.append({
                "wq": rng.normal(0.0, std, size=(d, d)),
                "wk": rng.normal(0.0, std, size=(d, d)),
                "wv": rng.normal(0.0, std, size=(d, d)),
                "wo": rng.normal(0.0, std, size=(d, d)),
                "w1": rng.normal(0.0, std, size=(d, 4 * d)),
                "b1": np.zeros(4 * d),
                "w2": rng.normal(0.0, std, size=(4 * d, d)),
                "b2": np.zeros(d),
            })
        self.w_out = rng.normal(0.0, std, size=(d, vocab_size))

    # ---- parameter provenance -------------------------------------------

    def provenance(self) -> dict:
        return {
            "backend": "toy",
            "seed": self.seed,
            "layers": self.layers,
            "width": self.width,
            "heads": self.heads,
            "vocab": self.vocab_size,
        }

    def save_sidecar(self, path: str) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(self.provenance(), fh, sort_keys=True, indent=2)
            fh.write("\n")

    # ---- embedding ------------------------------------------------------

    def _embed(self, token: int, raster: int) -> np.ndarray:
        if token == _BOS:
            return self.bos_emb.copy()
        if not 0 <= token <= self.vocab_size:
            raise ValueError(f"token {token} outside embedding table")
        if raster >= self.max_positions:
            raise ValueError(f"raster index {raster} exceeds position table")
        return self.tok_emb[token] + self.pos_emb[raster]

    # ---- dense reference path -------------------------------------------

    def _dense_pass(self, tokens: list[int], rasters: list[int],
                    want_kv: bool = False, want_attn: bool = False):
        """Full pass over a raster-sorted token sequence with a causal mask.

        Returns (hidden-state logits (n, V), per-layer K/V (n, L, H, dh) or
        None, final-layer attention (H, n, n) or None).
        """
        n = len(tokens)
        X = np.stack([self._embed(tok, u) for tok, u in zip(tokens, rasters)])
        kv_k = np.zeros((n, self.layers, self.heads, self.head_dim)) if want_kv else None
        kv_v = np.zeros_like(kv_k) if want_kv else None
        attn_last = None
        neg = np.triu(np.full((n, n), -np.inf), k=1)
        for li, blk in enumerate(self.blocks):
            h = _layer_norm(X)
            Q = (h @ blk["wq"]).reshape(n, self.heads, self.head_dim)
            K = (h @ blk["wk"]).reshape(n, self.heads, self.head_dim)
            V = (h @ blk["wv"]).reshape(n, self.heads, self.head_dim)
            if want_kv:
                kv_k[:, li] = K
                kv_v[:, li] = V
            scores = np.einsum("qhd,khd->hqk", Q, K) / math.sqrt(self.head_dim)
            scores = scores + neg[None, :, :]
            scores = scores - scores.max(axis=-1, keepdims=True)
            A = np.exp(scores)
            A = A / A.sum(axis=-1, keepdims=True)
            if li == self.layers - 1:
                attn_last = A
            O = np.einsum("hqk,khd->qhd", A, V).reshape(n, self.width)
            X = X + O @ blk["wo"]
            X = X + _gelu(_layer_norm(X) @ blk["w1"] + blk["b1"]) @ blk["w2"] + blk["b2"]
        logits = _layer_norm(X) @ self.w_out
        return logits, (kv_k, kv_v) if want_kv else None, attn_last

    def forward(self, state: DecodeState, queries: list[Position],
                condition: ConditioningContext) -> list[np.ndarray]:
        """From-scratch forward: every context position is recomputed under
        the *current* decode state.  Differs from the cached path on states
        where tokens were committed before all their raster predecessors."""
        out = []
        for q in queries:
            tokens, rasters = self._context_sequence(state, q, condition)
            logits, _, _ = self._dense_pass(tokens, rasters)
            out.append(logits[-1])
        return out

    def _context_sequence(self, state: DecodeState, query: Position,
                          condition: ConditioningContext):
        shape = state.shape
        t = raster_index(shape, query)
        entries: list[tuple[int, int]] = []
        for u, tok in enumerate(condition.prefix_tokens):
            if u < t:
                entries.append((u, tok))
        for pos, tok in state.values.items():
            u = raster_index(shape, pos)
            if u < t:
                entries.append((u, tok))
        entries.sort()
        if t == 0:
            return [_BOS], [0]
        if not entries or entries[-1][0] != t - 1:
            # Missing row-terminal input; synthesize a stand-in token.
            entries.append((t - 1, row_start_input(state, shape, query.row)))
        rasters = [u for u, _ in entries]
        tokens = [tok for _, tok in entries]
        return tokens, rasters

    # ---- incremental (cached) path --------------------------------------

    def new_cache(self, shape: GridShape,
                  condition: ConditioningContext) -> ContextCache:
        if shape.raster_len > self.max_positions:
            raise ValueError("grid longer than the backend's position table")
        cache = ContextCache(shape, condition, self.layers, self.heads,
                             self.head_dim)
        for u, tok in enumerate(condition.prefix_tokens):
            self._commit_raster(cache, u, tok)
        return cache

    def _incremental_pass(self, cache: ContextCache, token: int, slot: int,
                          ctx: np.ndarray):
        """Run one input slot through the stack against frozen K/V entries.

        ``ctx`` holds committed raster indices strictly before ``slot``; the
        slot's own fresh key/value is appended so self-attention is included.
        """
        x = self._embed(token, max(slot, 0)) if token != _BOS else self.bos_emb.copy()
        k_self = np.zeros((self.layers, self.heads, self.head_dim))
        v_self = np.zeros_like(k_self)
        attn_last = None
        for li, blk in enumerate(self.blocks):
            h = _layer_norm(x)
            q = (h @ blk["wq"]).reshape(self.heads, self.head_dim)
            k = (h @ blk["wk"]).reshape(self.heads, self.head_dim)
            v = (h @ blk["wv"]).reshape(self.heads, self.head_dim)
            k_self[li] = k
            v_self[li] = v
            K = np.concatenate([cache.keys[ctx, li], k[None]], axis=0)
            V = np.concatenate([cache.vals[ctx, li], v[None]], axis=0)
            scores = np.einsum("hd,khd->hk", q, K) / math.sqrt(self.head_dim)
            scores = scores - scores.max(axis=-1, keepdims=True)
            A = np.exp(scores)
            A = A / A.sum(axis=-1, keepdims=True)
            if li == self.layers - 1:
                attn_last = A
            o = np.einsum("hk,khd->hd", A, V).reshape(self.width)
            x = x + o @ blk["wo"]
            x = x + _gelu(_layer_norm(x) @ blk["w1"] + blk["b1"]) @ blk["w2"] + blk["b2"]
        logits = _layer_norm(x) @ self.w_out
        return logits, k_self, v_self, attn_last

    def _check_cache_state(self, cache: ContextCache, state: DecodeState) -> None:
        shape = state.shape
        expected = set(range(shape.prefix_len))
        for pos in state.values:
            expected.add(raster_index(shape, pos))
        if expected != set(cache.committed):
            missing = expected - set(cache.committed)
            extra = set(cache.committed) - expected
            raise CacheIntegrityError(
                f"cache/state divergence: missing={sorted(missing)} "
                f"extra={sorted(extra)}")

    def _query_inputs(self, cache: ContextCache, state: DecodeState,
                      query: Position):
        shape = state.shape
        t = raster_index(shape, query)
        if cache.present[t]:
            raise CacheIntegrityError(f"query {query} is already committed")
        slot = t - 1
        if slot < 0:
            return _BOS, slot, np.empty(0, dtype=np.int64)
        ctx = cache.context_before(slot)
        if cache.present[slot]:
            return int(cache.tokens[slot]), slot, ctx
        # Row-start query without the previous row's terminal token.
        return row_start_input(state, shape, query.row), slot, ctx

    def forward_cached(self, cache: ContextCache, state: DecodeState,
                       queries: list[Position],
                       condition: ConditioningContext) -> list[np.ndarray]:
        self._check_cache_state(cache, state)
        out = []
        for q in queries:
            token, slot, ctx = self._query_inputs(cache, state, q)
            logits, _, _, _ = self._incremental_pass(cache, token, slot, ctx)
            out.append(logits)
        return out

    def query_attention(self, cache: ContextCache, state: DecodeState,
                        query: Position, condition: ConditioningContext):
        """Logits plus final-layer head-averaged attention mass by raster index."""
        self._check_cache_state(cache, state)
        token, slot, ctx = self._query_inputs(cache, state, query)
        logits, _, _, attn = self._incremental_pass(cache, token, slot, ctx)
        mass = np.zeros(state.shape.raster_len)
        mean_attn = attn.mean(axis=0)
        if ctx.size:
            mass[ctx] = mean_attn[:-1]
        if slot >= 0:
            mass[slot] += mean_attn[-1]
        return logits, mass

    def _commit_raster(self, cache: ContextCache, raster: int, token: int) -> None:
        ctx = cache.context_before(raster)
        _, k_self, v_self, _ = self._incremental_pass(cache, token, raster, ctx)
        cache.insert(raster, token, k_self, v_self)

    def commit(self, cache: ContextCache, pos: Position, token: int) -> None:
        """Freeze key/value entries for ``pos`` under the commit-time mask."""
        self._commit_raster(cache, raster_index(cache.shape, pos), token)


class _NullCache:
    """Commit tracking for backends with no internal state."""

    def __init__(self, shape: GridShape) -> None:
        self.shape = shape
        self.committed: set[int] = set()


class LocalOracle(ModelBackend):
    """Analytic backend with exact spatial locality.

    The conditional for (i, j) depends only on the neighborhood
    (i, j-1), (i-1, j), ..., (i-1, j+r-1).  Neighbors outside the grid, and
    neighbors not yet decoded, are replaced by a boundary symbol, so the
    conditional is a pure function of the visible neighborhood.  Each
    conditional is a deterministic hash of (seed, position, neighborhood).
    """

    BOUNDARY = -1

    def __init__(self, vocab_size: int = 64, radius: int = 1, seed: int = 0) -> None:
        if radius < 1:
            raise ValueError("locality radius must be at least 1")
        self.vocab_size = vocab_size
        self.radius = radius
        self.seed = seed

    def neighborhood(self, state: DecodeState, pos: Position) -> tuple[int, ...]:
        shape = state.shape
        coords = [(pos.row, pos.col - 1)]
        coords += [(pos.row - 1, pos.col + m) for m in range(self.radius)]
        vals = []
        for r, c in coords:
            if 0 <= r < shape.rows and 0 <= c < shape.cols:
                vals.append(state.values.get(Position(r, c), self.BOUNDARY))
            else:
                vals.append(self.BOUNDARY)
        return tuple(vals)

    def conditional(self, state: DecodeState, pos: Position) -> np.ndarray:
        vals = self.neighborhood(state, pos)
        entropy = [self.seed, pos.row, pos.col] + [v + 1 for v in vals]
        rng = np.random.default_rng(entropy)
        g = rng.random(self.vocab_size) + 0.05
        return g / g.sum()

    def forward(self, state: DecodeState, queries: list[Position],
                condition: ConditioningContext) -> list[np.ndarray]:
        return [np.log(self.conditional(state, q)) for q in queries]

    def new_cache(self, shape: GridShape,
                  condition: ConditioningContext) -> _NullCache:
        return _NullCache(shape)

    def forward_cached(self, cache: _NullCache, state: DecodeState,
                       queries: list[Position],
                       condition: ConditioningContext) -> list[np.ndarray]:
        return self.forward(state, queries, condition)

    def commit(self, cache: _NullCache, pos: Position, token: int) -> None:
        u = raster_index(cache.shape, pos)
        if u in cache.committed:
            raise CacheIntegrityError(f"double commit at raster index {u}")
        cache.committed.add(u)

    def provenance(self) -> dict:
        return {
            "backend": "oracle",
            "seed": self.seed,
            "radius": self.radius,
            "vocab": self.vocab_size,
        }
