"""Frozen two-layer encoder with a cosine-similarity label head and
attachable low-rank plugin adapters.

The encoder stands in for a large pretrained image tower: weights are drawn
once from a seeded Gaussian and never updated. All task adaptation happens
in rank-r adapter pairs (A, B) attached to every affine layer; the adapter
path adds (alpha/r) * B @ A to the frozen weight. Classification compares
the embedding against frozen per-label rows by cosine similarity.
"""

from __future__ import annotations

import hashlib
import struct
from dataclasses import dataclass

import numpy as np

from . import numerics as nm
from .errors import (
    DegenerateInputError,
    FormatError,
    InputError,
    ParameterError,
    ShapeError,
)
from .numerics import Tensor

ENCODER_DIMS = (256, 64, 32)
DEFAULT_TEMPERATURE = 0.07

PLUGIN_MAGIC = b"FGM1"
PLUGIN_VERSION = 1


@dataclass
class AffineLayer:
    """y = x @ W.T + b with W of shape [out, in]."""

    weight: Tensor
    bias: Tensor

    @property
    def out_dim(self) -> int:
        return self.weight.shape[0]

    @property
    def in_dim(self) -> int:
        return self.weight.shape[1]


class BaseEncoder:
    """Stack of affine layers with tanh between them; parameters frozen."""

    def __init__(self, layers: list[AffineLayer]):
        if not layers:
            raise ParameterError("encoder needs at least one layer")
        self.layers = layers

    @classmethod
    def from_seed(cls, seed: int, dims: tuple[int, ...] = ENCODER_DIMS) -> "BaseEncoder":
        rng = nm.make_rng(nm.derive_seed("base-encoder", seed))
        layers = []
        for fan_in, fan_out in zip(dims[:-1], dims[1:]):
            std = 1.0 / np.sqrt(fan_in)
            w = rng.normal(0.0, std, size=(fan_out, fan_in)).astype(nm.DTYPE)
            b = np.zeros(fan_out, dtype=nm.DTYPE)
            layers.append(AffineLayer(Tensor(w), Tensor(b)))
        return cls(layers)

    @property
    def input_dim(self) -> int:
        return self.layers[0].in_dim

    @property
    def embed_dim(self) -> int:
        return self.layers[-1].out_dim

    def layer_dims(self, layer_id: int) -> tuple[int, int]:
        layer = self.layers[layer_id]
        return layer.out_dim, layer.in_dim

    def param_hash(self) -> str:
        h = hashlib.sha256()
        for layer in self.layers:
            h.update(nm.tensor_to_bytes(layer.weight))
            h.update(nm.tensor_to_bytes(layer.bias))
        return h.hexdigest()


class LabelEmbeddingTable:
    """One frozen Gaussian row per label string, keyed by the label text.

    The row depends only on the label, so identical labels in different
    tasks share an embedding, mimicking a frozen text encoder.
    """

    def __init__(self, task_name: str, labels: list[str], embed_dim: int):
        if len(labels) < 2:
            raise ParameterError("a task needs at least two labels")
        if len(set(labels)) != len(labels):
            raise ParameterError("labels must be distinct")
        self.task_name = task_name
        self.labels = list(labels)
        rows = np.stack([self._embed_label(text, embed_dim) for text in labels])
        self.rows = Tensor(rows)

    @staticmethod
    def _embed_label(text: str, embed_dim: int) -> np.ndarray:
        rng = nm.make_rng(nm.derive_seed("label-embedding", text))
        row = rng.normal(0.0, 1.0, size=embed_dim).astype(nm.DTYPE)
        if np.linalg.norm(row) < 1e-6:
            raise DegenerateInputError(f"label embedding for {text!r} is degenerate")
        return row

    @property
    def num_classes(self) -> int:
        return len(self.labels)

    def param_hash(self) -> str:
        h = hashlib.sha256()
        h.update("\x1f".join(self.labels).encode("utf-8"))
        h.update(nm.tensor_to_bytes(self.rows))
        return h.hexdigest()


@dataclass
class LoraAdapter:
    """Rank-r pair for one target layer: delta = (alpha/r) * B @ A."""

    layer_id: int
    a: Tensor  # [r, in]
    b: Tensor  # [out, r]
    rank: int
    alpha: float
    dropout_p: float = 0.0

    def scaling(self) -> float:
        return self.alpha / self.rank

    def effective_delta(self) -> np.ndarray:
        """Materialized [out, in] weight delta."""
        return (self.b.data @ self.a.data) * nm.DTYPE(self.scaling())


def init_adapter(layer_id: int, d: int, k: int, r: int, alpha: float,
                 rng: np.random.Generator, dropout_p: float = 0.0) -> LoraAdapter:
    """A ~ N(0, 0.02), B = 0, so the initial delta is exactly zero."""
    if r < 1 or r > min(d, k):
        raise ParameterError(f"rank {r} outside [1, min({d}, {k})]")
    if alpha <= 0:
        raise ParameterError("alpha must be positive")
    if not 0.0 <= dropout_p < 1.0:
        raise ParameterError("dropout_p must lie in [0, 1)")
    a = rng.normal(0.0, 0.02, size=(r, k)).astype(nm.DTYPE)
    b = np.zeros((d, r), dtype=nm.DTYPE)
    return LoraAdapter(layer_id, Tensor(a), Tensor(b), r, float(alpha), float(dropout_p))


class PluginModule:
    """The commit unit: one adapter per targeted base layer."""

    def __init__(self, adapters: dict[int, LoraAdapter], task_tags: list[str] | None = None):
        if not adapters:
            raise ParameterError("plugin module needs at least one adapter")
        self.adapters = dict(sorted(adapters.items()))
        self.task_tags = list(task_tags or [])

    @classmethod
    def fresh(cls, base: BaseEncoder, rank: int, alpha: float,
              rng: np.random.Generator, dropout_p: float = 0.0) -> "PluginModule":
        adapters = {}
        for lid in range(len(base.layers)):
            d, k = base.layer_dims(lid)
            adapters[lid] = init_adapter(lid, d, k, rank, alpha, rng, dropout_p)
        return cls(adapters)

    @classmethod
    def zero(cls, base: BaseEncoder, rank: int, alpha: float) -> "PluginModule":
        """All-zero A and B: the identity element for parameter merging."""
        adapters = {}
        for lid in range(len(base.layers)):
            d, k = base.layer_dims(lid)
            adapters[lid] = LoraAdapter(
                lid, Tensor(np.zeros((rank, k), dtype=nm.DTYPE)),
                Tensor(np.zeros((d, rank), dtype=nm.DTYPE)), rank, float(alpha))
        return cls(adapters)

    def parameters(self) -> list[Tensor]:
        out = []
        for ad in self.adapters.values():
            out.extend([ad.a, ad.b])
        return out

    def layer_deltas(self) -> dict[int, np.ndarray]:
        return {lid: ad.effective_delta() for lid, ad in self.adapters.items()}

    def to_bytes(self) -> bytes:
        """Canonical parameter-only encoding; the content id hashes this.

        Entries carry (layer_id, r, alpha, A, B). Dropout is a training-time
        knob, not part of the committed artifact.
        """
        out = [PLUGIN_MAGIC, struct.pack("<BI", PLUGIN_VERSION, len(self.adapters))]
        for lid, ad in self.adapters.items():
            out.append(struct.pack("<IIf", lid, ad.rank, ad.alpha))
            out.append(nm.tensor_to_bytes(ad.a))
            out.append(nm.tensor_to_bytes(ad.b))
        return b"".join(out)

    @classmethod
    def from_bytes(cls, buf: bytes, task_tags: list[str] | None = None) -> "PluginModule":
        if buf[:4] != PLUGIN_MAGIC:
            raise FormatError("bad plugin magic")
        if len(buf) < 9:
            raise FormatError("truncated plugin header")
        version, count = struct.unpack_from("<BI", buf, 4)
        if version != PLUGIN_VERSION:
            raise FormatError(f"unsupported plugin version {version}")
        offset = 9
        adapters: dict[int, LoraAdapter] = {}
        for _ in range(count):
            if len(buf) < offset + 12:
                raise FormatError("truncated adapter entry")
            lid, rank, alpha = struct.unpack_from("<IIf", buf, offset)
            offset += 12
            a, offset = nm.tensor_from_bytes(buf, offset)
            b, offset = nm.tensor_from_bytes(buf, offset)
            if a.shape[0] != rank or b.shape[1] != rank:
                raise FormatError("adapter tensor shapes disagree with rank")
            adapters[lid] = LoraAdapter(lid, a, b, rank, alpha)
        if offset != len(buf):
            raise FormatError("trailing bytes after plugin payload")
        return cls(adapters, task_tags)

    def content_id(self) -> str:
        return hashlib.sha256(self.to_bytes()).hexdigest()


def _validate_plugin(base: BaseEncoder, plugin: PluginModule) -> None:
    for lid, ad in plugin.adapters.items():
        if lid < 0 or lid >= len(base.layers):
            raise ShapeError(f"adapter targets missing layer {lid}")
        d, k = base.layer_dims(lid)
        if ad.b.shape != (d, ad.rank) or ad.a.shape != (ad.rank, k):
            raise ShapeError(f"adapter for layer {lid} has shape mismatch")


def encode(base: BaseEncoder, x: Tensor,
           paths: dict[int, list[tuple[LoraAdapter, float]]] | None = None,
           training: bool = False, rng: np.random.Generator | None = None) -> Tensor:
    """Batched embedding of [n, input_dim]; adapter paths add weighted deltas.

    ``paths`` maps layer_id to (adapter, coefficient) pairs whose outputs are
    scaled and summed on top of the frozen layer output.
    """
    if x.data.ndim == 1:
        x = nm.reshape(x, (1, x.shape[0]))
    if x.shape[1] != base.input_dim:
        raise ShapeError(f"input dim {x.shape[1]} != encoder input {base.input_dim}")
    h = x
    last = len(base.layers) - 1
    for lid, layer in enumerate(base.layers):
        y = nm.add(nm.matmul(h, nm.transpose(layer.weight)), layer.bias)
        for adapter, coeff in (paths or {}).get(lid, ()):  # adapter side path
            hp = nm.dropout(h, adapter.dropout_p, rng, training) if rng is not None else h
            part = nm.matmul(nm.matmul(hp, nm.transpose(adapter.a)), nm.transpose(adapter.b))
            y = nm.add(y, nm.scale(part, adapter.scaling() * coeff))
        h = y if lid == last else nm.tanh(y)
    return h


def forward(base: BaseEncoder, plugin: PluginModule | None, x: Tensor,
            training: bool = False, rng: np.random.Generator | None = None) -> Tensor:
    """Embedding with an optional plugin attached at coefficient 1."""
    paths = None
    if plugin is not None:
        _validate_plugin(base, plugin)
        paths = {lid: [(ad, 1.0)] for lid, ad in plugin.adapters.items()}
    return encode(base, x, paths, training=training, rng=rng)


def classify(embedding: Tensor, table: LabelEmbeddingTable,
             temperature: float = DEFAULT_TEMPERATURE) -> Tensor:
    """Cosine similarity against each label row, divided by temperature."""
    single = embedding.data.ndim == 1
    e = nm.reshape(embedding, (1, embedding.shape[0])) if single else embedding
    if e.shape[1] != table.rows.shape[1]:
        raise ShapeError(f"embedding dim {e.shape[1]} != table dim {table.rows.shape[1]}")
    sims = nm.matmul(nm.l2_normalize_rows(e), nm.transpose(nm.l2_normalize_rows(table.rows)))
    logits = nm.scale(sims, 1.0 / temperature)
    return nm.reshape(logits, (table.num_classes,)) if single else logits


def predict(logits: np.ndarray) -> np.ndarray:
    """Argmax with lowest-index tie-break."""
    return np.argmax(logits, axis=-1)


# ---------------------------------------------------------------------------
# fast no-gradient path (objective evaluation, metrics)
# ---------------------------------------------------------------------------


def encode_np(base: BaseEncoder, deltas: dict[int, np.ndarray] | None,
              x: np.ndarray) -> np.ndarray:
    """Plain-numpy embedding with per-layer weight deltas folded in."""
    h = np.asarray(x, dtype=nm.DTYPE)
    if h.ndim == 1:
        h = h[None, :]
    last = len(base.layers) - 1
    for lid, layer in enumerate(base.layers):
        w = layer.weight.data
        if deltas and lid in deltas:
            w = w + deltas[lid]
        h = h @ w.T + layer.bias.data
        if lid != last:
            h = np.tanh(h)
    return h


def cosine_logits_np(embeddings: np.ndarray, table: LabelEmbeddingTable,
                     temperature: float = DEFAULT_TEMPERATURE) -> np.ndarray:
    e = np.asarray(embeddings, dtype=np.float64)
    norms = np.linalg.norm(e, axis=1, keepdims=True)
    if np.any(norms < 1e-12):
        raise DegenerateInputError("zero-norm embedding in cosine head")
    rows = table.rows.data.astype(np.float64)
    rows = rows / np.linalg.norm(rows, axis=1, keepdims=True)
    return ((e / norms) @ rows.T / temperature).astype(nm.DTYPE)


# ---------------------------------------------------------------------------
# single-task adapter training
# ---------------------------------------------------------------------------


@dataclass
class TrainConfig:
    """Single-task adapter training defaults."""

    epochs: int = 100
    learning_rate: float = 0.01
    momentum: float = 0.9
    weight_decay: float = 5e-4
    batch_size: int = 64
    rank: int = 16
    alpha: float = 16.0
    dropout_p: float = 0.1
    temperature: float = DEFAULT_TEMPERATURE

    def __post_init__(self) -> None:
        if self.epochs < 1 or self.batch_size < 1:
            raise ParameterError("epochs and batch_size must be >= 1")


def train_plugin(base: BaseEncoder, table: LabelEmbeddingTable,
                 inputs: np.ndarray, labels: np.ndarray,
                 config: TrainConfig, rng: np.random.Generator,
                 plugin: PluginModule | None = None,
                 iterations: int | None = None) -> PluginModule:
    """Train adapters on one task; base and label rows stay frozen.

    ``iterations`` caps the number of SGD steps instead of running full
    epochs (used for distilled-data evaluation).
    """
    inputs = np.asarray(inputs, dtype=nm.DTYPE)
    labels = np.asarray(labels, dtype=np.int64)
    n = inputs.shape[0]
    if n == 0:
        raise InputError("cannot train on an empty dataset")
    if labels.shape != (n,):
        raise ShapeError("labels do not match inputs")
    if plugin is None:
        plugin = PluginModule.fresh(base, config.rank, config.alpha, rng, config.dropout_p)
    params = plugin.parameters()
    for p in params:
        p.requires_grad = True
    state = nm.SgdState(config.learning_rate, config.momentum, config.weight_decay)

    steps_done = 0
    budget = iterations if iterations is not None else config.epochs * max(1, -(-n // config.batch_size))
    while steps_done < budget:
        order = rng.permutation(n)
        for start in range(0, n, config.batch_size):
            if steps_done >= budget:
                break
            idx = order[start:start + config.batch_size]
            xb = Tensor(inputs[idx])
            emb = forward(base, plugin, xb, training=True, rng=rng)
            logits = classify(emb, table, config.temperature)
            loss = nm.softmax_cross_entropy(logits, labels[idx])
            for p in params:
                p.zero_grad()
            loss.backward()
            nm.sgd_step(params, None, state)
            steps_done += 1
    for p in params:
        p.requires_grad = False
    plugin.task_tags = sorted(set(plugin.task_tags) | {table.task_name})
    return plugin
