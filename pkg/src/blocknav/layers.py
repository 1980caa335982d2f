"""Parameter store, layer primitives, and checkpoint serialization.

Layers are plain functions over a ModelParams store; each family has an
`*_init` that registers its weights under a dotted prefix and a forward
function that reads them back. Everything trains in float64; checkpoint
files store float32 payloads.
"""

from __future__ import annotations

import math
import struct

import numpy as np

from .tensor import EmptySequence, ShapeMismatch, Tensor, concat

CKPT_MAGIC = b"BNCKPT01"
CKPT_VERSION = 1


class CheckpointError(ValueError):
    """Unreadable or inconsistent checkpoint file."""


class ModelParams:
    """Ordered name -> Tensor map holding every learnable array."""

    def __init__(self) -> None:
        self._store: dict[str, Tensor] = {}

    def add(self, name: str, shape: tuple[int, ...], rng: np.random.Generator,
            fan_in: int | None = None) -> Tensor:
        """Register a parameter initialized uniform(-1/sqrt(fan_in), +...).

        fan_in defaults to shape[0]; biases should pass the layer's true
        input width explicitly.
        """
        if name in self._store:
            raise ValueError(f"duplicate parameter {name!r}")
        fan = shape[0] if fan_in is None else fan_in
        bound = 1.0 / math.sqrt(fan)
        t = Tensor(rng.uniform(-bound, bound, size=shape), requires_grad=True)
        self._store[name] = t
        return t

    def __getitem__(self, name: str) -> Tensor:
        return self._store[name]

    def __contains__(self, name: str) -> bool:
        return name in self._store

    def __len__(self) -> int:
        return len(self._store)

    def names(self) -> list[str]:
        return list(self._store)

    def items(self):
        return self._store.items()

    def n_values(self) -> int:
        return sum(t.data.size for t in self._store.values())

    def zero_grad(self) -> None:
        for t in self._store.values():
            t.grad = None

    def state_arrays(self) -> dict[str, np.ndarray]:
        return {k: t.data.copy() for k, t in self._store.items()}

    def load_state(self, arrays: dict[str, np.ndarray]) -> None:
        missing = set(self._store) - set(arrays)
        extra = set(arrays) - set(self._store)
        if missing or extra:
            raise CheckpointError(f"parameter name mismatch: missing={sorted(missing)} extra={sorted(extra)}")
        for k, t in self._store.items():
            a = np.asarray(arrays[k], dtype=np.float64)
            if a.shape != t.data.shape:
                raise CheckpointError(f"{k}: shape {a.shape} != expected {t.data.shape}")
            t.data = a.copy()

    def describe(self) -> str:
        lines = [f"{k}  {'x'.join(map(str, t.data.shape))}" for k, t in self._store.items()]
        lines.append(f"total values: {self.n_values()}")
        return "\n".join(lines)


# ---------------------------------------------------------------- layers


def linear(w: Tensor, x: Tensor, bias: Tensor | None = None) -> Tensor:
    """x @ w (+ bias); w is (in, out), x is (N, in)."""
    out = x @ w
    if bias is not None:
        out = out + bias
    return out


def lstm_init(params: ModelParams, prefix: str, in_dim: int, hidden: int,
              rng: np.random.Generator) -> None:
    params.add(f"{prefix}.w_ih", (in_dim, 4 * hidden), rng)
    params.add(f"{prefix}.w_hh", (hidden, 4 * hidden), rng, fan_in=hidden)
    params.add(f"{prefix}.b", (1, 4 * hidden), rng, fan_in=hidden)


def lstm_zero_state(hidden: int) -> tuple[Tensor, Tensor]:
    return Tensor(np.zeros((1, hidden))), Tensor(np.zeros((1, hidden)))


def lstm_cell(params: ModelParams, prefix: str, x: Tensor,
              state: tuple[Tensor, Tensor]) -> tuple[Tensor, Tensor]:
    """One gated recurrent step; gate order i, f, g, o along the 4H axis."""
    w_ih = params[f"{prefix}.w_ih"]
    w_hh = params[f"{prefix}.w_hh"]
    b = params[f"{prefix}.b"]
    h_prev, c_prev = state
    hid = w_hh.data.shape[0]
    gates = x @ w_ih + h_prev @ w_hh + b
    i = gates.narrow(1, 0, hid).sigmoid()
    f = gates.narrow(1, hid, hid).sigmoid()
    g = gates.narrow(1, 2 * hid, hid).tanh()
    o = gates.narrow(1, 3 * hid, hid).sigmoid()
    c = f * c_prev + i * g
    h = o * c.tanh()
    return h, c


def bilstm_init(params: ModelParams, prefix: str, vocab_size: int, d_t: int,
                rng: np.random.Generator) -> None:
    if d_t % 2:
        raise ValueError("bidirectional width d_t must be even")
    params.add(f"{prefix}.embed", (vocab_size, d_t), rng)
    lstm_init(params, f"{prefix}.fwd", d_t, d_t // 2, rng)
    lstm_init(params, f"{prefix}.bwd", d_t, d_t // 2, rng)


def bidirectional_encode(params: ModelParams, prefix: str, token_ids) -> Tensor:
    """Tokens -> (L, d_t): forward and backward recurrent passes over the
    embedded sequence, hidden states concatenated per position."""
    ids = list(token_ids)
    if not ids:
        raise EmptySequence("cannot encode an empty token sequence")
    emb = params[f"{prefix}.embed"].gather_rows(ids)
    L = len(ids)
    hid = params[f"{prefix}.fwd.w_hh"].data.shape[0]
    fwd: list[Tensor] = []
    state = lstm_zero_state(hid)
    for t in range(L):
        h, c = lstm_cell(params, f"{prefix}.fwd", emb.narrow(0, t, 1), state)
        state = (h, c)
        fwd.append(h)
    bwd: list[Tensor] = [None] * L  # type: ignore[list-item]
    state = lstm_zero_state(hid)
    for t in reversed(range(L)):
        h, c = lstm_cell(params, f"{prefix}.bwd", emb.narrow(0, t, 1), state)
        state = (h, c)
        bwd[t] = h
    rows = [concat([fwd[t], bwd[t]], axis=1) for t in range(L)]
    return concat(rows, axis=0)


def mha_init(params: ModelParams, prefix: str, q_dim: int, kv_dim: int,
             d_model: int, rng: np.random.Generator) -> None:
    params.add(f"{prefix}.wq", (q_dim, d_model), rng)
    params.add(f"{prefix}.wk", (kv_dim, d_model), rng)
    params.add(f"{prefix}.wv", (kv_dim, d_model), rng)
    params.add(f"{prefix}.wo", (d_model, d_model), rng)


def multi_head_attention(params: ModelParams, prefix: str, query: Tensor,
                         keys_values: Tensor, heads: int) -> tuple[Tensor, np.ndarray]:
    """Scaled dot-product cross attention of a single query over N rows.

    Returns (output (1, d_model), weights (heads, N)); weights are a
    detached copy for inspection, each row summing to 1.
    """
    if keys_values.data.ndim != 2 or keys_values.data.shape[0] < 1:
        raise ShapeMismatch(f"keys_values must be (N>=1, d_kv), got {keys_values.data.shape}")
    q = query @ params[f"{prefix}.wq"]
    k = keys_values @ params[f"{prefix}.wk"]
    v = keys_values @ params[f"{prefix}.wv"]
    d_model = q.data.shape[1]
    if d_model % heads:
        raise ShapeMismatch(f"{heads} heads do not divide width {d_model}")
    dh = d_model // heads
    scale = 1.0 / math.sqrt(dh)
    outs = []
    weights = np.empty((heads, keys_values.data.shape[0]))
    for h in range(heads):
        qh = q.narrow(1, h * dh, dh)
        kh = k.narrow(1, h * dh, dh)
        vh = v.narrow(1, h * dh, dh)
        attn = ((qh @ kh.transpose()) * scale).softmax(axis=-1)
        weights[h] = attn.data[0]
        outs.append(attn @ vh)
    out = concat(outs, axis=1) @ params[f"{prefix}.wo"]
    return out, weights


# ---------------------------------------------------------------- checkpoints


def save_checkpoint(path: str, params: ModelParams, metadata: bytes = b"") -> None:
    """Versioned binary dump: header, per-parameter records (float32 LE),
    then a length-prefixed opaque metadata blob."""
    with open(path, "wb") as fh:
        fh.write(struct.pack("<8sII", CKPT_MAGIC, CKPT_VERSION, len(params)))
        for name, t in params.items():
            nb = name.encode("utf-8")
            fh.write(struct.pack("<H", len(nb)))
            fh.write(nb)
            dims = t.data.shape
            fh.write(struct.pack("<B", len(dims)))
            fh.write(struct.pack(f"<{len(dims)}I", *dims))
            fh.write(t.data.astype("<f4").tobytes())
        fh.write(struct.pack("<I", len(metadata)))
        fh.write(metadata)


def load_checkpoint(path: str) -> tuple[dict[str, np.ndarray], bytes]:
    """Read a checkpoint; returns ({name: float32 array}, metadata bytes)."""
    with open(path, "rb") as fh:
        raw = fh.read()

    def take(n: int, what: str) -> bytes:
        nonlocal pos
        if pos + n > len(raw):
            raise CheckpointError(f"truncated checkpoint while reading {what}")
        chunk = raw[pos:pos + n]
        pos += n
        return chunk

    pos = 0
    magic, version, count = struct.unpack("<8sII", take(16, "header"))
    if magic != CKPT_MAGIC:
        raise CheckpointError(f"bad magic {magic!r}")
    if version != CKPT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    arrays: dict[str, np.ndarray] = {}
    for _ in range(count):
        (nlen,) = struct.unpack("<H", take(2, "name length"))
        name = take(nlen, "name").decode("utf-8")
        (rank,) = struct.unpack("<B", take(1, "rank"))
        dims = struct.unpack(f"<{rank}I", take(4 * rank, "dims"))
        n = int(np.prod(dims)) if dims else 1
        payload = take(4 * n, f"payload of {name}")
        if name in arrays:
            raise CheckpointError(f"duplicate parameter {name!r} in checkpoint")
        arrays[name] = np.frombuffer(payload, dtype="<f4").reshape(dims).copy()
    (mlen,) = struct.unpack("<I", take(4, "metadata length"))
    metadata = take(mlen, "metadata")
    if pos != len(raw):
        raise CheckpointError(f"{len(raw) - pos} trailing bytes after metadata")
    return arrays, metadata
