"""Small decoder-only transformer used as the decoding substrate.

Pre-norm blocks: RMSNorm -> rotary GQA attention -> residual, RMSNorm ->
gated SiLU MLP -> residual, final RMSNorm and an untied output projection.
Weights are float32; activations are carried in float64.

Weight file layout (little-endian throughout)::

    offset  size  field
    0       4     magic b"SFIW"
    4       2     format version (1)
    6       2     endianness tag 0x0102
    8       28    uint32 x 7: n_layers, n_query_heads, n_kv_heads, head_dim,
                  vocab_size, max_positions, mlp_hidden
    36      8     float64 rope_base
    44      4     float32 qk_alignment
    48      ...   float32 tensors, row-major, in ``ToyModel.tensor_names()`` order
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from ..errors import ModelSpecError, WeightFileError

MAGIC = b"SFIW"
VERSION = 1
ENDIAN_TAG = 0x0102
_HEADER = struct.Struct("<4sHH7Idf")


@dataclass(frozen=True)
class ModelSpec:
    n_layers: int = 2
    n_query_heads: int = 4
    n_kv_heads: int = 2
    head_dim: int = 16
    vocab_size: int = 64
    max_positions: int = 4096
    rope_base: float = 10000.0
    mlp_hidden: int = 0  # 0 -> 2 * d_model
    # Blend of W_k toward W_q at init. 0 is a plain random model; larger values
    # make tokens attend to earlier occurrences of similar tokens.
    qk_alignment: float = 0.0

    def __post_init__(self) -> None:
        for name in ("n_layers", "n_query_heads", "n_kv_heads", "head_dim", "vocab_size", "max_positions"):
            if getattr(self, name) < 1:
                raise ModelSpecError(f"{name} must be >= 1", **{name: getattr(self, name)})
        if self.n_query_heads % self.n_kv_heads:
            raise ModelSpecError(
                "n_query_heads must be a multiple of n_kv_heads",
                n_query_heads=self.n_query_heads,
                n_kv_heads=self.n_kv_heads,
            )
        if self.head_dim % 2:
            raise ModelSpecError("head_dim must be even for rotary pairing", head_dim=self.head_dim)
        if self.mlp_hidden < 0:
            raise ModelSpecError("mlp_hidden must be >= 0", mlp_hidden=self.mlp_hidden)

    @property
    def d_model(self) -> int:
        return self.n_query_heads * self.head_dim

    @property
    def group(self) -> int:
        return self.n_query_heads // self.n_kv_heads

    @property
    def hidden(self) -> int:
        return self.mlp_hidden or 2 * self.d_model


@dataclass
class ToyModel:
    spec: ModelSpec
    weights: dict[str, np.ndarray]

    def __post_init__(self) -> None:
        half = self.spec.head_dim // 2
        self._inv_freq = 1.0 / (self.spec.rope_base ** (np.arange(half, dtype=np.float64) / half))

    @staticmethod
    def tensor_shapes(spec: ModelSpec) -> list[tuple[str, tuple[int, ...]]]:
        D, Hq, H, d, F = spec.d_model, spec.n_query_heads, spec.n_kv_heads, spec.head_dim, spec.hidden
        out: list[tuple[str, tuple[int, ...]]] = [("embed", (spec.vocab_size, D))]
        for i in range(spec.n_layers):
            out += [
                (f"l{i}.attn_norm", (D,)),
                (f"l{i}.wq", (D, Hq * d)),
                (f"l{i}.wk", (D, H * d)),
                (f"l{i}.wv", (D, H * d)),
                (f"l{i}.wo", (Hq * d, D)),
                (f"l{i}.mlp_norm", (D,)),
                (f"l{i}.w_gate", (D, F)),
                (f"l{i}.w_up", (D, F)),
                (f"l{i}.w_down", (F, D)),
            ]
        out += [("final_norm", (D,)), ("lm_head", (D, spec.vocab_size))]
        return out

    def tensor_names(self) -> list[str]:
        return [n for n, _ in self.tensor_shapes(self.spec)]

    # -- building blocks -------------------------------------------------

    def w(self, name: str) -> np.ndarray:
        return self.weights[name]

    @staticmethod
    def rms_norm(x: np.ndarray, gain: np.ndarray) -> np.ndarray:
        return x / np.sqrt(np.mean(x * x, axis=-1, keepdims=True) + 1e-6) * gain

    def rope(self, x: np.ndarray, positions: np.ndarray | int) -> np.ndarray:
        """Rotate ``x[..., heads, d]`` by absolute position(s); ``positions`` broadcast over the leading axis."""
        pos = np.asarray(positions, dtype=np.float64)
        ang = pos[..., None] * self._inv_freq  # (..., d/2)
        cos, sin = np.cos(ang), np.sin(ang)
        if pos.ndim:
            cos, sin = cos[:, None, :], sin[:, None, :]
        half = x.shape[-1] // 2
        x1, x2 = x[..., :half], x[..., half:]
        return np.concatenate([x1 * cos - x2 * sin, x1 * sin + x2 * cos], axis=-1)

    def qkv(self, layer: int, x: np.ndarray, positions: np.ndarray | int):
        """Project normed residual rows to rotated q, k and plain v.

        ``x`` is ``(D,)`` or ``(L, D)``; outputs are ``(..., heads, d)``.
        """
        s = self.spec
        h = self.rms_norm(x, self.w(f"l{layer}.attn_norm"))
        lead = h.shape[:-1]
        q = (h @ self.w(f"l{layer}.wq")).reshape(*lead, s.n_query_heads, s.head_dim)
        k = (h @ self.w(f"l{layer}.wk")).reshape(*lead, s.n_kv_heads, s.head_dim)
        v = (h @ self.w(f"l{layer}.wv")).reshape(*lead, s.n_kv_heads, s.head_dim)
        return self.rope(q, positions), self.rope(k, positions), v

    def finish_layer(self, layer: int, x: np.ndarray, attn: np.ndarray) -> np.ndarray:
        """Output projection, residual and MLP. ``attn`` is ``(..., Hq, d)``."""
        lead = attn.shape[:-2]
        x = x + attn.reshape(*lead, -1) @ self.w(f"l{layer}.wo")
        h = self.rms_norm(x, self.w(f"l{layer}.mlp_norm"))
        gate = h @ self.w(f"l{layer}.w_gate")
        up = h @ self.w(f"l{layer}.w_up")
        return x + (gate / (1.0 + np.exp(-gate)) * up) @ self.w(f"l{layer}.w_down")

    def embed(self, tokens) -> np.ndarray:
        tokens = np.asarray(tokens)
        if np.any(tokens < 0) or np.any(tokens >= self.spec.vocab_size):
            raise ModelSpecError("token id outside the vocabulary", vocab_size=self.spec.vocab_size)
        return self.w("embed")[tokens].astype(np.float64)

    def head(self, x: np.ndarray) -> np.ndarray:
        return self.rms_norm(x, self.w("final_norm")) @ self.w("lm_head")


def build_toy_model(spec: ModelSpec, seed: int = 0) -> ToyModel:
    rng = np.random.default_rng(seed)
    D = spec.d_model
    weights: dict[str, np.ndarray] = {}
    for name, shape in ToyModel.tensor_shapes(spec):
        if name.endswith("norm"):
            arr = 1.0 + 0.1 * rng.standard_normal(shape)
        elif name == "embed":
            arr = rng.standard_normal(shape)
        else:
            arr = rng.standard_normal(shape) / np.sqrt(shape[0])
        weights[name] = arr.astype(np.float32)
    if spec.qk_alignment:
        a = spec.qk_alignment
        for i in range(spec.n_layers):
            wq = weights[f"l{i}.wq"].reshape(D, spec.n_kv_heads, spec.group, spec.head_dim)
            shared = wq.mean(axis=2).reshape(D, -1)
            wk = (1 - a) * weights[f"l{i}.wk"] + a * shared * np.sqrt(spec.group)
            weights[f"l{i}.wk"] = wk.astype(np.float32)
    return ToyModel(spec, weights)


def save_weights(model: ToyModel, path: str | Path) -> None:
    s = model.spec
    header = _HEADER.pack(
        MAGIC, VERSION, ENDIAN_TAG,
        s.n_layers, s.n_query_heads, s.n_kv_heads, s.head_dim, s.vocab_size, s.max_positions, s.mlp_hidden,
        s.rope_base, s.qk_alignment,
    )
    with open(path, "wb") as fh:
        fh.write(header)
        for name in model.tensor_names():
            fh.write(np.ascontiguousarray(model.weights[name], dtype="<f4").tobytes())


def load_weights(path: str | Path) -> ToyModel:
    data = Path(path).read_bytes()
    if len(data) < _HEADER.size:
        raise WeightFileError("truncated header", offset=len(data), path=str(path))
    magic, version, tag, *dims, rope_base, qk = _HEADER.unpack_from(data, 0)
    if magic != MAGIC:
        raise WeightFileError("bad magic", offset=0, path=str(path))
    if version != VERSION:
        raise WeightFileError("unsupported version", offset=4, version=version)
    if tag != ENDIAN_TAG:
        raise WeightFileError("unexpected endianness tag", offset=6, tag=hex(tag))
    names = ("n_layers", "n_query_heads", "n_kv_heads", "head_dim", "vocab_size", "max_positions", "mlp_hidden")
    try:
        spec = ModelSpec(**dict(zip(names, dims)), rope_base=rope_base, qk_alignment=float(qk))
    except ModelSpecError as exc:
        raise WeightFileError(f"invalid model spec in header: {exc}", offset=8) from exc
    offset = _HEADER.size
    weights = {}
    for name, shape in ToyModel.tensor_shapes(spec):
        nbytes = 4 * int(np.prod(shape))
        if offset + nbytes > len(data):
            raise WeightFileError("truncated tensor data", offset=offset, tensor=name)
        weights[name] = np.frombuffer(data, dtype="<f4", count=nbytes // 4, offset=offset).reshape(shape).astype(np.float32)
        offset += nbytes
    if offset != len(data):
        raise WeightFileError("trailing bytes after last tensor", offset=offset)
    return ToyModel(spec, weights)
