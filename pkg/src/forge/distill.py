"""Distribution-matching dataset distillation with siamese augmentation.

Synthetic per-class inputs are optimized so their feature means match the
per-class feature means of real minibatches under a freshly re-initialized
adapter each step. The same sampled transform parameters are applied to the
real and synthetic batch of a step, and every transform is differentiable
in the input values, so gradients reach the synthetic pixels through the
augmentation and the feature extractor.
"""

from __future__ import annotations

import hashlib
import struct
from dataclasses import dataclass
from typing import Callable, Mapping

import numpy as np

from . import evaluation, model as mdl
from . import numerics as nm
from .datasets import LabeledDataset, TaskSpec, pack_str, unpack_str
from .errors import FormatError, InputError, ParameterError
from .model import BaseEncoder, LabelEmbeddingTable, PluginModule, TrainConfig
from .numerics import Tensor

DISTILLED_MAGIC = b"FGS1"
DISTILLED_VERSION = 1


@dataclass
class DsaParams:
    """Transform parameters shared by the real/synthetic batch of one step."""

    flip: bool = False
    shift: tuple[int, int] = (0, 0)
    scale: float = 1.0
    noise_seed: int = 0
    noise_std: float = 0.0

    @classmethod
    def identity(cls) -> "DsaParams":
        return cls()

    @classmethod
    def sample(cls, rng: np.random.Generator, max_shift: int = 2,
               scale_range: tuple[float, float] = (0.8, 1.2),
               noise_std: float = 0.01) -> "DsaParams":
        return cls(
            flip=bool(rng.random() < 0.5),
            shift=(int(rng.integers(-max_shift, max_shift + 1)),
                   int(rng.integers(-max_shift, max_shift + 1))),
            scale=float(rng.uniform(*scale_range)),
            noise_seed=int(rng.integers(0, 2 ** 31)),
            noise_std=noise_std,
        )


def dsa_augment(batch: Tensor, params: DsaParams) -> Tensor:
    """Apply flip/shift/scale/noise to [n, h, w]; gradient flows to values."""
    out = batch
    if params.flip:
        out = nm.flip_w(out)
    if params.shift != (0, 0):
        out = nm.shift2d(out, *params.shift)
    if params.scale != 1.0:
        out = nm.scale(out, params.scale)
    if params.noise_std > 0.0:
        noise_rng = nm.make_rng(params.noise_seed)
        out = nm.add_const(out, noise_rng.normal(0.0, params.noise_std,
                                                 size=out.shape).astype(nm.DTYPE))
    return out


def dm_loss(real_by_class: Mapping[int, Tensor], syn_by_class: Mapping[int, Tensor],
            feature_fn: Callable[[Tensor], Tensor]) -> Tensor:
    """Sum over classes of || mean features(real) - mean features(syn) ||^2."""
    if set(real_by_class) != set(syn_by_class):
        raise InputError("real and synthetic batches cover different classes")
    if not real_by_class:
        raise InputError("no classes to match")
    terms = []
    for cls in sorted(real_by_class):
        real_mean = nm.mean_rows(feature_fn(real_by_class[cls]))
        syn_mean = nm.mean_rows(feature_fn(syn_by_class[cls]))
        terms.append(nm.sq_sum(nm.sub(real_mean, syn_mean)))
    return nm.scalar_sum(terms)


@dataclass
class DistillConfig:
    """Distillation schedule; defaults follow the reference protocol."""

    iterations: int = 5000
    ipc: int = 20
    syn_lr: float = 1.0
    syn_lr_final: float = 0.1
    inner_steps: int = 1
    dsa_enabled: bool = True
    persist_adapter: bool = False  # listing re-inits the adapter every step
    init_from_real: bool = False
    real_batch_per_class: int = 64
    max_shift: int = 2
    scale_range: tuple[float, float] = (0.8, 1.2)
    noise_std: float = 0.01
    rank: int = 16
    alpha: float = 16.0
    inner_lr: float = 0.01
    inner_momentum: float = 0.9
    inner_weight_decay: float = 5e-4
    temperature: float = mdl.DEFAULT_TEMPERATURE
    eval_iterations: int = 1000
    eval_batch_size: int = 64

    def __post_init__(self) -> None:
        if self.iterations < 1:
            raise ParameterError("distillation needs at least one iteration")
        if self.ipc < 1:
            raise ParameterError("ipc must be >= 1")


@dataclass
class DistilledDataset:
    """Synthetic stand-in set: ipc items per class, task input shape."""

    task_name: str
    num_classes: int
    ipc: int
    input_shape: tuple[int, int]
    inputs: np.ndarray  # [num_classes * ipc, h*w] float32, class-major
    labels: np.ndarray  # [num_classes * ipc] int64

    def __post_init__(self) -> None:
        self.inputs = np.ascontiguousarray(self.inputs, dtype=nm.DTYPE)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if len(self.inputs) != self.num_classes * self.ipc:
            raise InputError("distilled set size must be ipc * classes")
        if self.inputs.shape[1] != int(np.prod(self.input_shape)):
            raise InputError("distilled inputs do not match the task shape")
        if not np.all(np.isfinite(self.inputs)):
            raise InputError("distilled inputs must be finite")

    def to_bytes(self) -> bytes:
        out = [DISTILLED_MAGIC, struct.pack("<B", DISTILLED_VERSION)]
        out.append(pack_str(self.task_name))
        out.append(struct.pack("<III", self.num_classes, self.ipc, len(self.labels)))
        out.append(struct.pack("<II", *self.input_shape))
        out.append(self.labels.astype("<i8").tobytes())
        out.append(nm.tensor_to_bytes(Tensor(self.inputs)))
        return b"".join(out)

    @classmethod
    def from_bytes(cls, buf: bytes) -> "DistilledDataset":
        if buf[:4] != DISTILLED_MAGIC:
            raise FormatError("bad distilled-set magic")
        if len(buf) < 5:
            raise FormatError("truncated distilled-set header")
        (version,) = struct.unpack_from("<B", buf, 4)
        if version != DISTILLED_VERSION:
            raise FormatError(f"unsupported distilled-set version {version}")
        offset = 5
        name, offset = unpack_str(buf, offset)
        if len(buf) < offset + 20:
            raise FormatError("truncated distilled-set counts")
        num_classes, ipc, n = struct.unpack_from("<III", buf, offset)
        offset += 12
        shape = struct.unpack_from("<II", buf, offset)
        offset += 8
        if len(buf) < offset + 8 * n:
            raise FormatError("truncated distilled labels")
        labels = np.frombuffer(buf, dtype="<i8", count=n, offset=offset).copy()
        offset += 8 * n
        inputs, offset = nm.tensor_from_bytes(buf, offset)
        if offset != len(buf):
            raise FormatError("trailing bytes after distilled payload")
        return cls(name, num_classes, ipc, tuple(shape), inputs.data, labels)

    def content_id(self) -> str:
        return hashlib.sha256(self.to_bytes()).hexdigest()


def _cosine_lr(step: int, total: int, start: float, final: float) -> float:
    if total <= 1:
        return start
    t = step / (total - 1)
    return final + 0.5 * (start - final) * (1.0 + np.cos(np.pi * t))


def random_feature_plugin(base: BaseEncoder, rank: int, alpha: float,
                          rng: np.random.Generator) -> PluginModule:
    """Adapter with Gaussian A and B: a genuinely random feature extractor.

    Unlike the training init (B = 0, zero delta), both factors are drawn so
    the (alpha/r)*B@A delta has the same scale as the base weights, giving
    the matching loss a distribution of embedding spaces to average over.
    """
    adapters = {}
    for lid in range(len(base.layers)):
        d, k = base.layer_dims(lid)
        a = rng.normal(0.0, 1.0 / np.sqrt(k), size=(rank, k)).astype(nm.DTYPE)
        b = rng.normal(0.0, 1.0 / np.sqrt(rank), size=(d, rank)).astype(nm.DTYPE)
        adapters[lid] = mdl.LoraAdapter(lid, Tensor(a), Tensor(b), rank, float(alpha))
    return PluginModule(adapters)


def distill(spec: TaskSpec, data: LabeledDataset, base: BaseEncoder,
            config: DistillConfig, rng: np.random.Generator) -> DistilledDataset:
    """Synthesize ipc items per class by distribution matching.

    Each step draws a fresh random adapter as the feature extractor, samples
    a per-class real minibatch and the synthetic set, applies one shared
    augmentation to both sides, updates the synthetic inputs on the matching
    loss, then gives the adapter its own update step on the synthetic data.
    """
    num_classes = spec.num_classes
    side = spec.input_shape
    flat = spec.flat_dim
    class_idx = data.class_indices(num_classes)
    for cls, idx in enumerate(class_idx):
        if idx.size < 1:
            raise InputError(f"class {cls} has no examples to distill from")

    m = num_classes * config.ipc
    if config.init_from_real:
        rows = []
        for idx in class_idx:
            take = rng.choice(idx, size=config.ipc, replace=idx.size < config.ipc)
            rows.append(data.inputs[take])
        syn0 = np.concatenate(rows)
    else:
        syn0 = rng.normal(0.0, 1.0, size=(m, flat)).astype(nm.DTYPE)
    syn = Tensor(syn0.copy(), requires_grad=True)
    syn_labels = np.repeat(np.arange(num_classes, dtype=np.int64), config.ipc)

    table = LabelEmbeddingTable(spec.name, spec.labels, base.embed_dim)
    syn_state = nm.SgdState(learning_rate=config.syn_lr)
    plugin: PluginModule | None = None
    inner_state: nm.SgdState | None = None

    def feature_fn(batch_flat: Tensor, current: PluginModule) -> Tensor:
        paths = {lid: [(ad, 1.0)] for lid, ad in current.adapters.items()}
        return mdl.encode(base, batch_flat, paths)

    for step in range(config.iterations):
        if plugin is None or not config.persist_adapter:
            plugin = random_feature_plugin(base, config.rank, config.alpha, rng)
            for p in plugin.parameters():
                p.requires_grad = True
            inner_state = nm.SgdState(config.inner_lr, config.inner_momentum,
                                      config.inner_weight_decay)
        step_params = None
        if config.dsa_enabled:
            step_params = DsaParams.sample(rng, config.max_shift,
                                           config.scale_range, config.noise_std)

        real_by_class: dict[int, Tensor] = {}
        syn_by_class: dict[int, Tensor] = {}
        for cls in range(num_classes):
            idx = class_idx[cls]
            take = rng.choice(idx, size=min(config.real_batch_per_class, idx.size),
                              replace=False)
            real = Tensor(data.inputs[take])
            syn_c = nm.slice_rows(syn, cls * config.ipc, (cls + 1) * config.ipc)
            if step_params is not None:
                real = _augment_flat(real, side, step_params)
                syn_c = _augment_flat(syn_c, side, step_params)
            real_by_class[cls] = real
            syn_by_class[cls] = syn_c

        loss = dm_loss(real_by_class, syn_by_class,
                       lambda t: feature_fn(t, plugin))
        syn.zero_grad()
        for p in plugin.parameters():
            p.zero_grad()
        loss.backward()
        syn_state.learning_rate = _cosine_lr(step, config.iterations,
                                             config.syn_lr, config.syn_lr_final)
        nm.sgd_step([syn], None, syn_state)

        # adapter refinement on the synthetic set (cross-entropy)
        for _ in range(config.inner_steps):
            xb = Tensor(syn.data.copy())
            emb = feature_fn(xb, plugin)
            logits = mdl.classify(emb, table, config.temperature)
            inner_loss = nm.softmax_cross_entropy(logits, syn_labels)
            for p in plugin.parameters():
                p.zero_grad()
            inner_loss.backward()
            nm.sgd_step(plugin.parameters(), None, inner_state)

    return DistilledDataset(spec.name, num_classes, config.ipc, tuple(side),
                            syn.data.copy(), syn_labels)


def _augment_flat(batch: Tensor, side: tuple[int, int], params: DsaParams) -> Tensor:
    spatial = nm.reshape(batch, (batch.shape[0], side[0], side[1]))
    out = dsa_augment(spatial, params)
    return nm.reshape(out, (batch.shape[0], side[0] * side[1]))


def eval_distilled(distilled: DistilledDataset, base: BaseEncoder, spec: TaskSpec,
                   test: LabeledDataset, config: DistillConfig,
                   rng: np.random.Generator) -> dict[str, float]:
    """Train a fresh adapter on the distilled set only, then score the test set."""
    if distilled.inputs.shape[1] != spec.flat_dim:
        raise InputError("distilled set does not match the task input shape")
    table = LabelEmbeddingTable(spec.name, spec.labels, base.embed_dim)
    train_cfg = TrainConfig(
        epochs=1, learning_rate=config.inner_lr, momentum=config.inner_momentum,
        weight_decay=config.inner_weight_decay,
        batch_size=min(config.eval_batch_size, len(distilled.inputs)),
        rank=config.rank, alpha=config.alpha, dropout_p=0.0,
        temperature=config.temperature)
    plugin = mdl.train_plugin(base, table, distilled.inputs, distilled.labels,
                              train_cfg, rng, iterations=config.eval_iterations)
    acc, auc_value = evaluation.evaluate_deltas(base, plugin.layer_deltas(), table,
                                                test, config.temperature)
    return {"acc": acc, "auc": auc_value}
