"""Neural building blocks on top of the tensor library.

Parameters live in a ParameterStore under stable dotted names, so the
same (seed, name) pair always produces the same initialization no matter
which model variant created it.
"""

from __future__ import annotations

import hashlib
import json
import struct
import zlib
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .tensor import Tensor

CONTAINER_MAGIC = b"CAFT"
CONTAINER_VERSION = 1


class ContainerError(IOError):
    """Corrupt, truncated, or wrong-version checkpoint container."""


@dataclass
class AttentionConfig:
    num_heads: int = 1
    head_dim: int = 32
    query_dim: int = 32
    kv_dim: int = 32
    out_dim: int = 32

    def __post_init__(self):
        for name in ("num_heads", "head_dim", "query_dim", "kv_dim", "out_dim"):
            if getattr(self, name) < 1:
                raise ValueError(f"AttentionConfig.{name} must be positive")


def _rng_for(seed, name):
    digest = hashlib.sha256(f"{seed}:{name}".encode()).digest()
    return np.random.default_rng(int.from_bytes(digest[:8], "little"))


class ParameterStore:
    """Named float64 parameter tensors with seeded, name-stable init."""

    def __init__(self, seed=0):
        self.seed = seed
        self.params = {}

    def create(self, name, shape, init="uniform", fan_in=None):
        if name in self.params:
            raise KeyError(f"duplicate parameter name: {name}")
        if init == "zeros":
            data = np.zeros(shape)
        elif init == "uniform":
            fan = fan_in if fan_in is not None else shape[0]
            bound = 1.0 / np.sqrt(fan)
            data = _rng_for(self.seed, name).uniform(-bound, bound, size=shape)
        else:
            raise ValueError(f"unknown init: {init}")
        t = Tensor(data, requires_grad=True)
        self.params[name] = t
        return t

    def __getitem__(self, name):
        return self.params[name]

    def zero_grad(self):
        for p in self.params.values():
            p.zero_grad()

    def count(self, prefixes=None):
        total = 0
        for name, p in self.params.items():
            if prefixes is None or any(name.startswith(pre) for pre in prefixes):
                total += p.size
        return total

    def state_dict(self):
        return {name: p.data.copy() for name, p in self.params.items()}

    def load_state_dict(self, state):
        for name, arr in state.items():
            if name not in self.params:
                raise KeyError(f"unexpected parameter in checkpoint: {name}")
            if self.params[name].shape != arr.shape:
                raise ValueError(f"shape mismatch for {name}: "
                                 f"{self.params[name].shape} vs {arr.shape}")
            self.params[name].data[...] = arr


class Linear:
    def __init__(self, store, name, d_in, d_out, zero_init=False):
        init = "zeros" if zero_init else "uniform"
        self.w = store.create(f"{name}.w", (d_in, d_out), init=init, fan_in=d_in)
        self.b = store.create(f"{name}.b", (d_out,), init=init, fan_in=d_in)

    def __call__(self, x):
        return T.add_rowvec(T.matmul(x, self.w), self.b)


class MultiHeadAttention:
    """Scaled dot-product attention; supports self- and cross-attention.

    window limits self-attention to |i - j| <= window frames; None means
    unrestricted. Only meaningful when query and key lengths match.
    """

    def __init__(self, store, name, cfg: AttentionConfig, zero_init_out=False,
                 window=None):
        self.cfg = cfg
        self.window = window
        width = cfg.num_heads * cfg.head_dim
        self.wq = store.create(f"{name}.wq", (cfg.query_dim, width), fan_in=cfg.query_dim)
        self.wk = store.create(f"{name}.wk", (cfg.kv_dim, width), fan_in=cfg.kv_dim)
        self.wv = store.create(f"{name}.wv", (cfg.kv_dim, width), fan_in=cfg.kv_dim)
        self.wo = store.create(f"{name}.wo", (width, cfg.out_dim),
                               init="zeros" if zero_init_out else "uniform", fan_in=width)

    def __call__(self, q_src, kv_src):
        kv_src = T.as_tensor(kv_src)
        if kv_src.shape[0] < 1:
            raise ValueError("multi_head_attention: empty key/value sequence")
        cfg = self.cfg
        q = T.matmul(q_src, self.wq)
        k = T.matmul(kv_src, self.wk)
        v = T.matmul(kv_src, self.wv)
        mask = None
        if self.window is not None:
            tq, tk = q.shape[0], k.shape[0]
            idx_q = np.arange(tq)[:, None]
            idx_k = np.arange(tk)[None, :]
            mask = Tensor(np.where(np.abs(idx_q - idx_k) <= self.window, 0.0, -1e30))
        inv_scale = 1.0 / np.sqrt(cfg.head_dim)
        heads = []
        for h in range(cfg.num_heads):
            lo, hi = h * cfg.head_dim, (h + 1) * cfg.head_dim
            qh = T.slice_cols(q, lo, hi)
            kh = T.slice_cols(k, lo, hi)
            vh = T.slice_cols(v, lo, hi)
            scores = T.scale(T.matmul(qh, T.transpose(kh)), inv_scale)
            if mask is not None:
                scores = T.add(scores, mask)
            weights = T.softmax(scores, axis=-1)
            heads.append(T.matmul(weights, vh))
        merged = heads[0] if len(heads) == 1 else T.concat_cols(heads)
        return T.matmul(merged, self.wo)


class TransformerLayer:
    """Pre-norm residual block: x + Attn(LN(x)), then + FFN(LN(.)).

    By default attention and FFN output projections are zero-initialized,
    so a fresh layer is exactly the identity map. active_init=True uses
    normal init instead, for encoders that must transform inputs even
    when frozen (a frozen identity encoder maps every text to the same
    leading-token state).
    """

    def __init__(self, store, name, d_model, num_heads, ffn_mult=4, window=None,
                 active_init=False):
        if d_model % num_heads != 0:
            raise ValueError(f"d_model {d_model} not divisible by {num_heads} heads")
        cfg = AttentionConfig(num_heads=num_heads, head_dim=d_model // num_heads,
                              query_dim=d_model, kv_dim=d_model, out_dim=d_model)
        self.d_model = d_model
        self.ln1_g = store.create(f"{name}.ln1.g", (d_model,), init="zeros")
        self.ln1_g.data[...] = 1.0
        self.ln1_b = store.create(f"{name}.ln1.b", (d_model,), init="zeros")
        self.attn = MultiHeadAttention(store, f"{name}.attn", cfg,
                                       zero_init_out=not active_init, window=window)
        self.ln2_g = store.create(f"{name}.ln2.g", (d_model,), init="zeros")
        self.ln2_g.data[...] = 1.0
        self.ln2_b = store.create(f"{name}.ln2.b", (d_model,), init="zeros")
        self.ff1 = Linear(store, f"{name}.ff1", d_model, ffn_mult * d_model)
        self.ff2 = Linear(store, f"{name}.ff2", ffn_mult * d_model, d_model,
                          zero_init=not active_init)

    def __call__(self, x):
        if x.shape[-1] != self.d_model:
            raise T.ShapeMismatchError("transformer_layer", x.shape, (self.d_model,))
        normed = T.layer_norm(x, self.ln1_g, self.ln1_b)
        h = T.add(x, self.attn(normed, normed))
        return T.add(h, self.ff2(T.gelu(self.ff1(T.layer_norm(h, self.ln2_g, self.ln2_b)))))


def mean_pool(x):
    return T.mean_rows(x)


def embed_tokens(ids, table):
    return T.embed_rows(ids, table)


# --- binary container for parameter / feature arrays ---

def save_arrays(path, arrays, meta=None):
    """Write {name -> float64 array} plus optional JSON metadata.

    Layout: magic, version byte, meta, entries, trailing crc32 of all
    preceding bytes.
    """
    chunks = [CONTAINER_MAGIC, bytes([CONTAINER_VERSION])]
    meta_bytes = json.dumps(meta or {}, sort_keys=True).encode()
    chunks.append(struct.pack("<I", len(meta_bytes)))
    chunks.append(meta_bytes)
    chunks.append(struct.pack("<I", len(arrays)))
    for name in sorted(arrays):
        arr = np.ascontiguousarray(arrays[name], dtype=np.float64)
        nb = name.encode()
        chunks.append(struct.pack("<H", len(nb)))
        chunks.append(nb)
        chunks.append(struct.pack("<B", arr.ndim))
        chunks.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        chunks.append(arr.astype("<f8").tobytes())
    blob = b"".join(chunks)
    with open(path, "wb") as f:
        f.write(blob)
        f.write(struct.pack("<I", zlib.crc32(blob)))


def load_arrays(path):
    """Read a container; returns (arrays, meta). Raises ContainerError."""
    with open(path, "rb") as f:
        blob = f.read()
    if len(blob) < 13 or blob[:4] != CONTAINER_MAGIC:
        raise ContainerError(f"{path}: not a parameter container")
    body, crc_stored = blob[:-4], struct.unpack("<I", blob[-4:])[0]
    if zlib.crc32(body) != crc_stored:
        raise ContainerError(f"{path}: checksum mismatch (truncated or corrupt)")
    if body[4] != CONTAINER_VERSION:
        raise ContainerError(f"{path}: unsupported container version {body[4]}")
    off = 5
    (meta_len,) = struct.unpack_from("<I", body, off)
    off += 4
    meta = json.loads(body[off:off + meta_len].decode())
    off += meta_len
    (count,) = struct.unpack_from("<I", body, off)
    off += 4
    arrays = {}
    for _ in range(count):
        (name_len,) = struct.unpack_from("<H", body, off)
        off += 2
        name = body[off:off + name_len].decode()
        off += name_len
        ndim = body[off]
        off += 1
        shape = struct.unpack_from(f"<{ndim}I", body, off)
        off += 4 * ndim
        n = int(np.prod(shape)) if ndim else 1
        arrays[name] = np.frombuffer(body, dtype="<f8", count=n, offset=off).reshape(shape).copy()
        off += 8 * n
    return arrays, meta
