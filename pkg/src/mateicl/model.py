"""GPT-2-style decoder with learned absolute positions and a bias hook.

Blocks are pre-norm residual (attention then 4x GELU MLP), the unembedding
is tied to the token embedding unless the weight file carries a separate
"unembed" tensor.  Weights are float32 on disk and in memory; the forward
pass computes in float64.

Weight file format MTW1 (little-endian):
    bytes 0-3   magic "MTW1"
    u32         version (1)
    u32         tensor count
    per tensor: u16 name length, UTF-8 name, u8 dtype (0 = f32),
                u8 rank, rank x u64 dims, row-major f32 payload
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from .attention import (
    TASK_SEGMENT,
    AttentionTrace,
    BiasMode,
    HeadTrace,
    KVCache,
    PCW,
    attend,
    bias_rows,
    bias_value,
)
from .errors import CapacityError, DomainError, FormatError, ShapeError, WeightValidationError
from .numerics import Rng, gelu, layer_norm

_MAGIC = b"MTW1"
_VERSION = 1
_DTYPE_F32 = 0


@dataclass(frozen=True)
class ModelConfig:
    vocab_size: int
    d_model: int
    n_heads: int
    n_layers: int
    max_positions: int
    ln_eps: float = 1e-5

    def __post_init__(self):
        if self.d_model % self.n_heads != 0:
            raise ShapeError(f"d_model {self.d_model} not divisible by n_heads {self.n_heads}")
        if self.max_positions < 1 or self.vocab_size < 2:
            raise DomainError("need max_positions >= 1 and vocab_size >= 2")

    @property
    def d_head(self) -> int:
        return self.d_model // self.n_heads

    @property
    def d_mlp(self) -> int:
        return 4 * self.d_model


def _tensor_specs(config: ModelConfig) -> dict[str, tuple[int, ...]]:
    d, V, N = config.d_model, config.vocab_size, config.max_positions
    specs = {"tok_emb": (V, d), "pos_emb": (N, d), "lnf.g": (d,), "lnf.b": (d,)}
    for i in range(config.n_layers):
        specs.update(
            {
                f"h{i}.ln1.g": (d,),
                f"h{i}.ln1.b": (d,),
                f"h{i}.attn.wq": (d, d),
                f"h{i}.attn.bq": (d,),
                f"h{i}.attn.wk": (d, d),
                f"h{i}.attn.bk": (d,),
                f"h{i}.attn.wv": (d, d),
                f"h{i}.attn.bv": (d,),
                f"h{i}.attn.wo": (d, d),
                f"h{i}.attn.bo": (d,),
                f"h{i}.ln2.g": (d,),
                f"h{i}.ln2.b": (d,),
                f"h{i}.mlp.wi": (d, config.d_mlp),
                f"h{i}.mlp.bi": (config.d_mlp,),
                f"h{i}.mlp.wo": (config.d_mlp, d),
                f"h{i}.mlp.bo": (d,),
            }
        )
    return specs


class WeightStore:
    """Immutable float32 tensors for one model, keyed by MTW1 names."""

    def __init__(self, config: ModelConfig, tensors: dict[str, np.ndarray]):
        specs = _tensor_specs(config)
        missing = sorted(set(specs) - set(tensors))
        extra = sorted(set(tensors) - set(specs) - {"unembed"})
        if missing:
            raise WeightValidationError(f"missing tensors: {', '.join(missing)}")
        if extra:
            raise WeightValidationError(f"unexpected tensors: {', '.join(extra)}")
        if "unembed" in tensors:
            specs["unembed"] = (config.vocab_size, config.d_model)
        frozen = {}
        for name, shape in specs.items():
            arr = np.ascontiguousarray(tensors[name], dtype=np.float32)
            if arr.shape != shape:
                raise WeightValidationError(
                    f"tensor {name!r} has shape {arr.shape}, expected {shape}"
                )
            arr.flags.writeable = False
            frozen[name] = arr
        self.config = config
        self._tensors = frozen

    def __getitem__(self, name: str) -> np.ndarray:
        return self._tensors[name]

    def names(self) -> list[str]:
        return sorted(self._tensors)

    @property
    def unembed(self) -> np.ndarray:
        return self._tensors.get("unembed", self._tensors["tok_emb"])


def save_weights(store: WeightStore, path) -> None:
    with open(path, "wb") as fh:
        names = store.names()
        fh.write(_MAGIC)
        fh.write(struct.pack("<II", _VERSION, len(names)))
        for name in names:
            arr = store[name]
            raw = name.encode("utf-8")
            fh.write(struct.pack("<H", len(raw)))
            fh.write(raw)
            fh.write(struct.pack("<BB", _DTYPE_F32, arr.ndim))
            fh.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
            fh.write(arr.astype("<f4", copy=False).tobytes(order="C"))


def load_weights(path, config: ModelConfig) -> WeightStore:
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:4] != _MAGIC:
        raise FormatError(f"{path}: bad magic {blob[:4]!r}, expected {_MAGIC!r}")
    if len(blob) < 12:
        raise FormatError(f"{path}: truncated header")
    version, count = struct.unpack_from("<II", blob, 4)
    if version != _VERSION:
        raise FormatError(f"{path}: unsupported version {version}")
    off = 12
    tensors: dict[str, np.ndarray] = {}
    for _ in range(count):
        try:
            (name_len,) = struct.unpack_from("<H", blob, off)
            off += 2
            name = blob[off : off + name_len].decode("utf-8")
            off += name_len
            dtype_code, rank = struct.unpack_from("<BB", blob, off)
            off += 2
            dims = struct.unpack_from(f"<{rank}Q", blob, off)
            off += 8 * rank
        except struct.error as exc:
            raise FormatError(f"{path}: truncated tensor header") from exc
        if dtype_code != _DTYPE_F32:
            raise FormatError(f"{path}: tensor {name!r} has unsupported dtype {dtype_code}")
        n_bytes = 4 * int(np.prod(dims, dtype=np.int64)) if rank else 4
        if rank == 0:
            dims, n_bytes = (1,), 4
        if off + n_bytes > len(blob):
            raise FormatError(f"{path}: tensor {name!r} payload is truncated")
        tensors[name] = np.frombuffer(blob[off : off + n_bytes], dtype="<f4").reshape(dims)
        off += n_bytes
    if off != len(blob):
        raise FormatError(f"{path}: {len(blob) - off} trailing bytes after last tensor")
    return WeightStore(config, tensors)


def random_model(config: ModelConfig, seed: int, scale: float) -> WeightStore:
    """All tensors i.i.d. normal(0, scale); deterministic per seed."""
    if scale <= 0:
        raise DomainError("scale must be positive")
    rng = Rng(seed)
    tensors = {}
    for name, shape in sorted(_tensor_specs(config).items()):
        n = int(np.prod(shape))
        tensors[name] = rng.normal(n, scale).astype(np.float32).reshape(shape)
    return WeightStore(config, tensors)


def build_matching_model(
    n_patterns: int, n_labels: int, temperature: float = 16.0
) -> tuple[ModelConfig, WeightStore, dict[str, int]]:
    """Hand-built one-layer retrieval model used as a behavioral oracle.

    Vocabulary: pattern tokens "A".."Z"[:n_patterns], label tokens
    "a".."z"[:n_labels], and one composite demonstration token "P:l" per
    (pattern, label) pair.

    The embedding space has three antipodal block pairs: a query-pattern
    pair (only pattern tokens populate it), a key-pattern pair (only
    composites), and a label pair (composites and label tokens).  Antipodal
    means each component is e_i stacked on -e_i, so every embedding row has
    exactly zero mean and pre-norm LayerNorm reduces to a per-token scalar.
    The query projection reads the query-pattern blocks scaled by
    temperature, the key projection reads the key-pattern blocks (so a
    query token's own key is exactly zero and cannot outcompete a match),
    the value projection reads the label blocks, the MLP contributes zero,
    and the tied unembedding turns attended label mass into label-token
    logits.  With sharp temperature a query retrieves the label of its
    matching demonstrations.
    """
    if not 1 <= n_patterns <= 26 or not 1 <= n_labels <= 26:
        raise DomainError("supports 1..26 patterns and labels")
    if temperature < 10:
        raise DomainError("temperature must be >= 10 for sharp attention")
    d = 4 * n_patterns + 2 * n_labels
    q_pos, q_neg = 0, n_patterns  # query-pattern blocks
    k_pos, k_neg = 2 * n_patterns, 3 * n_patterns  # key-pattern blocks
    l_pos, l_neg = 4 * n_patterns, 4 * n_patterns + n_labels  # label blocks
    vocab_size = n_patterns + n_labels + n_patterns * n_labels
    config = ModelConfig(
        vocab_size=vocab_size, d_model=d, n_heads=1, n_layers=1, max_positions=64
    )
    vocab: dict[str, int] = {}
    wte = np.zeros((vocab_size, d), dtype=np.float32)
    for p in range(n_patterns):
        vocab[chr(ord("A") + p)] = p
        wte[p, q_pos + p] = 1.0
        wte[p, q_neg + p] = -1.0
    for l in range(n_labels):
        vocab[chr(ord("a") + l)] = n_patterns + l
        wte[n_patterns + l, l_pos + l] = 1.0
        wte[n_patterns + l, l_neg + l] = -1.0
    for p in range(n_patterns):
        for l in range(n_labels):
            tid = n_patterns + n_labels + p * n_labels + l
            vocab[f"{chr(ord('A') + p)}:{chr(ord('a') + l)}"] = tid
            wte[tid, k_pos + p] = 1.0
            wte[tid, k_neg + p] = -1.0
            wte[tid, l_pos + l] = 1.0
            wte[tid, l_neg + l] = -1.0

    # wq maps query-pattern blocks and wk maps key-pattern blocks onto the
    # same output coordinates, so q . k matches query tokens to composites
    pattern_q = np.zeros((d, d), dtype=np.float32)
    pattern_k = np.zeros((d, d), dtype=np.float32)
    for p in range(n_patterns):
        pattern_q[q_pos + p, p] = temperature
        pattern_q[q_neg + p, n_patterns + p] = temperature
        pattern_k[k_pos + p, p] = temperature
        pattern_k[k_neg + p, n_patterns + p] = temperature
    label_sel = np.zeros((d, d), dtype=np.float32)
    for l in range(n_labels):
        label_sel[l_pos + l, l_pos + l] = 1.0
        label_sel[l_neg + l, l_neg + l] = 1.0

    zeros = lambda *shape: np.zeros(shape, dtype=np.float32)
    ones = lambda n: np.ones(n, dtype=np.float32)
    tensors = {
        "tok_emb": wte,
        "pos_emb": zeros(config.max_positions, d),
        "h0.ln1.g": ones(d),
        "h0.ln1.b": zeros(d),
        "h0.attn.wq": pattern_q,
        "h0.attn.bq": zeros(d),
        "h0.attn.wk": pattern_k,
        "h0.attn.bk": zeros(d),
        "h0.attn.wv": label_sel,
        "h0.attn.bv": zeros(d),
        "h0.attn.wo": np.eye(d, dtype=np.float32),
        "h0.attn.bo": zeros(d),
        "h0.ln2.g": ones(d),
        "h0.ln2.b": zeros(d),
        "h0.mlp.wi": zeros(d, config.d_mlp),
        "h0.mlp.bi": zeros(config.d_mlp),
        "h0.mlp.wo": zeros(config.d_mlp, d),
        "h0.mlp.bo": zeros(d),
        "lnf.g": ones(d),
        "lnf.b": zeros(d),
    }
    return config, WeightStore(config, tensors), vocab


@dataclass(frozen=True)
class Model:
    """A config/weights pair; the unit the inference pipeline passes around."""

    config: ModelConfig
    weights: WeightStore

    @classmethod
    def load(cls, path, config: ModelConfig) -> "Model":
        return cls(config, load_weights(path, config))

    @classmethod
    def random(cls, config: ModelConfig, seed: int, scale: float = 0.08) -> "Model":
        return cls(config, random_model(config, seed, scale))

    @classmethod
    def matching(cls, n_patterns: int, n_labels: int, temperature: float = 16.0):
        config, weights, vocab = build_matching_model(n_patterns, n_labels, temperature)
        return cls(config, weights), vocab


def forward(
    config: ModelConfig,
    weights: WeightStore,
    token_ids: list[int] | np.ndarray,
    position_ids: list[int] | np.ndarray,
    mask: np.ndarray,
    kv_in: KVCache | None = None,
    segments: int | list[int] | np.ndarray = TASK_SEGMENT,
    bias: BiasMode = PCW,
    W: int = 1,
    collect_traces: bool = False,
) -> tuple[np.ndarray, KVCache, AttentionTrace | None]:
    """Run the block stack over new tokens, extending the KV cache.

    mask is (n_new, n_cached + n_new) boolean over the concatenated key
    axis; segments tags the new tokens (a window index, or TASK_SEGMENT).
    The bias hook fires after softmax in every layer and head whenever
    bias_value(bias, W) is active, scaling weights on task-tagged keys.
    Returns (logits per new position, extended cache, optional trace).
    """
    ids = np.asarray(token_ids, dtype=np.int64)
    positions = np.asarray(position_ids, dtype=np.int64)
    if ids.shape != positions.shape:
        raise ShapeError(f"{ids.size} tokens but {positions.size} position ids")
    if ids.size and (ids.min() < 0 or ids.max() >= config.vocab_size):
        raise DomainError(f"token id out of vocabulary range [0, {config.vocab_size})")
    if positions.size and (positions.min() < 0 or positions.max() >= config.max_positions):
        raise CapacityError(
            f"position id exceeds model capacity {config.max_positions}"
        )
    if kv_in is None:
        kv_in = KVCache.empty(config.n_layers, config.n_heads, config.d_head)
    n_new, n_cached = ids.size, kv_in.n_keys
    mask = np.asarray(mask, dtype=bool)
    if mask.shape != (n_new, n_cached + n_new):
        raise ShapeError(
            f"mask shape {mask.shape} != (new tokens {n_new}, keys {n_cached + n_new})"
        )
    new_segments = np.broadcast_to(np.asarray(segments, dtype=np.int64), (n_new,))
    key_segments = np.concatenate([kv_in.segments, new_segments])

    b = bias_value(bias, W)
    task_idx = np.flatnonzero(key_segments == TASK_SEGMENT)
    task_start = int(task_idx[0]) if task_idx.size else len(key_segments)
    if task_idx.size and np.any(key_segments[task_start:] != TASK_SEGMENT):
        raise DomainError("task keys must form a suffix of the key axis")
    if b is not None and (b == 1.0 or task_start == len(key_segments)):
        b = None  # exact no-op: nothing to reweight

    scale = 1.0 / np.sqrt(config.d_head)
    h = weights["tok_emb"][ids].astype(np.float64) + weights["pos_emb"][positions].astype(
        np.float64
    )
    trace = AttentionTrace(key_segments=key_segments) if collect_traces else None
    new_kv: list[tuple[np.ndarray, np.ndarray]] = []
    for layer in range(config.n_layers):
        p = f"h{layer}"
        x = layer_norm(h, weights[f"{p}.ln1.g"], weights[f"{p}.ln1.b"], config.ln_eps)
        q = x @ weights[f"{p}.attn.wq"].astype(np.float64) + weights[f"{p}.attn.bq"]
        k = x @ weights[f"{p}.attn.wk"].astype(np.float64) + weights[f"{p}.attn.bk"]
        v = x @ weights[f"{p}.attn.wv"].astype(np.float64) + weights[f"{p}.attn.bv"]
        q = q.reshape(n_new, config.n_heads, config.d_head)
        k = k.reshape(n_new, config.n_heads, config.d_head)
        v = v.reshape(n_new, config.n_heads, config.d_head)
        new_kv.append((k, v))
        k_cached, v_cached = kv_in.layers[layer]
        k_all = np.concatenate([k_cached, k], axis=0)
        v_all = np.concatenate([v_cached, v], axis=0)

        merged = np.empty((n_new, config.d_model))
        for head in range(config.n_heads):
            out, w_pre = attend(q[:, head], k_all[:, head], v_all[:, head], mask, scale)
            if b is not None:
                w_post = bias_rows(w_pre, task_start, b)
                out = w_post @ v_all[:, head]
            else:
                w_post = w_pre
            if trace is not None:
                window_mass = w_pre[:, key_segments != TASK_SEGMENT].sum(axis=1)
                trace.heads.append(
                    HeadTrace(
                        layer=layer,
                        head=head,
                        rows_pre=w_pre,
                        rows_post=w_post,
                        nu=window_mass,
                        task_mass_pre=w_pre[:, task_start:].sum(axis=1),
                        task_mass_post=w_post[:, task_start:].sum(axis=1),
                    )
                )
            merged[:, head * config.d_head : (head + 1) * config.d_head] = out
        h = h + merged @ weights[f"{p}.attn.wo"].astype(np.float64) + weights[f"{p}.attn.bo"]

        x = layer_norm(h, weights[f"{p}.ln2.g"], weights[f"{p}.ln2.b"], config.ln_eps)
        inner = gelu(x @ weights[f"{p}.mlp.wi"].astype(np.float64) + weights[f"{p}.mlp.bi"])
        h = h + inner @ weights[f"{p}.mlp.wo"].astype(np.float64) + weights[f"{p}.mlp.bo"]

    hf = layer_norm(h, weights["lnf.g"], weights["lnf.b"], config.ln_eps)
    logits = hf @ weights.unembed.astype(np.float64).T
    kv_out = kv_in.extended(new_kv, positions, new_segments)
    return logits, kv_out, trace


def causal_mask(n: int, n_cached: int = 0) -> np.ndarray:
    """(n, n_cached + n) mask: every cached key visible, new keys causal."""
    mask = np.zeros((n, n_cached + n), dtype=bool)
    mask[:, :n_cached] = True
    mask[:, n_cached:] = np.tril(np.ones((n, n), dtype=bool))
    return mask
