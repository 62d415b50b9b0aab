"""Merging strategies for plugin modules plus the coefficient search.

Fusion composes parameters: per layer, new A = w*A_main + w'*A_branch and
new B = w*B_main + w'*B_branch, so the resulting delta B@A carries the
quadratic cross terms of the two modules. Mixture leaves parameters alone
and forms the output as the coefficient-weighted sum of every module's
adapter-path output on top of the frozen base.

Coefficients are found by a derivative-free simplex search over a box,
minimizing cross-entropy on distilled guidance data plus an L1 penalty.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
from scipy.optimize import minimize

from . import model as mdl
from . import numerics as nm
from .distill import DistilledDataset
from .errors import (
    FormatError,
    IncompatibleModulesError,
    InputError,
    ParameterError,
)
from .model import BaseEncoder, LabelEmbeddingTable, PluginModule
from .numerics import Tensor

FORGE_ITEM_MAGIC = b"FGI1"
FORGE_ITEM_VERSION = 1

# (distilled set, label table for its task)
GuidanceSet = tuple[DistilledDataset, LabelEmbeddingTable]


@dataclass
class MergeCoefficients:
    w_main: float
    w_branch: float

    def __post_init__(self) -> None:
        if not (np.isfinite(self.w_main) and np.isfinite(self.w_branch)):
            raise ParameterError("merge coefficients must be finite")


@dataclass
class CoeffOptimConfig:
    """Derivative-free search budget and regularization."""

    max_iterations: int = 40
    init_value: float = 0.5
    l1_lambda: float = 0.05
    box_min: float = 0.0
    box_max: float = 2.0
    allow_negative: bool = False

    def __post_init__(self) -> None:
        if self.max_iterations < 1:
            raise ParameterError("max_iterations must be >= 1")
        if self.l1_lambda < 0:
            raise ParameterError("l1_lambda must be non-negative")
        if self.box_min >= self.box_max:
            raise ParameterError("empty coefficient box")

    def bounds(self) -> tuple[float, float]:
        lo = -self.box_max if self.allow_negative else self.box_min
        return lo, self.box_max


def _check_compatible(plugins: Sequence[PluginModule]) -> None:
    first = plugins[0]
    layer_ids = set(first.adapters)
    for other in plugins[1:]:
        if set(other.adapters) != layer_ids:
            raise IncompatibleModulesError("plugin modules target different layers")
        for lid in layer_ids:
            a, b = first.adapters[lid], other.adapters[lid]
            if a.rank != b.rank:
                raise IncompatibleModulesError(
                    f"rank mismatch on layer {lid}: {a.rank} vs {b.rank}")
            if a.alpha != b.alpha:
                raise IncompatibleModulesError(
                    f"alpha mismatch on layer {lid}: {a.alpha} vs {b.alpha}")
            if a.a.shape != b.a.shape or a.b.shape != b.b.shape:
                raise IncompatibleModulesError(f"shape mismatch on layer {lid}")


def combine_plugins(plugins: Sequence[PluginModule],
                    weights: Sequence[float]) -> PluginModule:
    """Per layer: A = sum w_k A_k, B = sum w_k B_k; alpha and rank preserved."""
    if not plugins:
        raise InputError("no plugin modules to combine")
    if len(plugins) != len(weights):
        raise InputError("one weight per plugin module required")
    _check_compatible(plugins)
    adapters = {}
    for lid, ref in plugins[0].adapters.items():
        a = np.zeros_like(ref.a.data)
        b = np.zeros_like(ref.b.data)
        for plugin, w in zip(plugins, weights):
            ad = plugin.adapters[lid]
            a += nm.DTYPE(w) * ad.a.data
            b += nm.DTYPE(w) * ad.b.data
        adapters[lid] = mdl.LoraAdapter(lid, Tensor(a), Tensor(b), ref.rank,
                                        ref.alpha, ref.dropout_p)
    tags = sorted({t for p in plugins for t in p.task_tags})
    return PluginModule(adapters, tags)


def fuse(main: PluginModule, branch: PluginModule,
         coeffs: MergeCoefficients) -> PluginModule:
    """Parameter fusion; the composed delta carries w*w' cross terms."""
    return combine_plugins([main, branch], [coeffs.w_main, coeffs.w_branch])


def mixture_forward(base: BaseEncoder, entries: Sequence[tuple[PluginModule, float]],
                    x: Tensor) -> Tensor:
    """Embedding with each module's adapter-path output weighted and summed."""
    paths: dict[int, list] = {}
    for plugin, coeff in entries:
        for lid, ad in plugin.adapters.items():
            if lid >= len(base.layers):
                raise IncompatibleModulesError(f"plugin targets missing layer {lid}")
            paths.setdefault(lid, []).append((ad, float(coeff)))
    return mdl.encode(base, x, paths)


def mixture_deltas(entries: Sequence[tuple[PluginModule, float]]) -> dict[int, np.ndarray]:
    """Effective per-layer weight delta of a coefficient-weighted mixture."""
    out: dict[int, np.ndarray] = {}
    for plugin, coeff in entries:
        for lid, ad in plugin.adapters.items():
            delta = nm.DTYPE(coeff) * ad.effective_delta()
            out[lid] = out[lid] + delta if lid in out else delta
    return out


@dataclass
class ForgeItem:
    """Main-branch merge state: one fused module, or weighted mixture entries."""

    kind: str  # "fused" | "mixture"
    round: int
    plugin: PluginModule | None = None
    entries: list[tuple[PluginModule, float]] = field(default_factory=list)

    def __post_init__(self) -> None:
        if self.kind not in ("fused", "mixture"):
            raise ParameterError(f"unknown forge item kind {self.kind!r}")
        if self.kind == "fused":
            if self.plugin is None:
                raise ParameterError("fused item needs exactly one plugin module")
        else:
            if self.plugin is not None:
                raise ParameterError("mixture item stores entries, not a plugin")
            if self.round >= 1 and not self.entries:
                raise ParameterError("mixture item must have entries after round 1")
            if not all(np.isfinite(c) for _, c in self.entries):
                raise ParameterError("mixture coefficients must be finite")

    @classmethod
    def genesis(cls, strategy: str, base: BaseEncoder, rank: int, alpha: float) -> "ForgeItem":
        if strategy == "fusion":
            return cls("fused", 0, plugin=PluginModule.zero(base, rank, alpha))
        if strategy == "mixture":
            return cls("mixture", 0)
        raise ParameterError(f"unknown strategy {strategy!r}")

    def deltas(self) -> dict[int, np.ndarray] | None:
        if self.kind == "fused":
            return self.plugin.layer_deltas()
        return mixture_deltas(self.entries) if self.entries else None

    def to_bytes(self) -> bytes:
        out = [FORGE_ITEM_MAGIC,
               struct.pack("<BBI", FORGE_ITEM_VERSION,
                           0 if self.kind == "fused" else 1, self.round)]
        if self.kind == "fused":
            payload = self.plugin.to_bytes()
            out.append(struct.pack("<I", len(payload)))
            out.append(payload)
        else:
            out.append(struct.pack("<I", len(self.entries)))
            for plugin, coeff in self.entries:
                out.append(bytes.fromhex(plugin.content_id()))
                out.append(struct.pack("<d", float(coeff)))
        return b"".join(out)

    @classmethod
    def from_bytes(cls, buf: bytes,
                   plugin_loader: Callable[[str], PluginModule] | None = None) -> "ForgeItem":
        if buf[:4] != FORGE_ITEM_MAGIC:
            raise FormatError("bad forge item magic")
        if len(buf) < 10:
            raise FormatError("truncated forge item header")
        version, kind_tag, round_no = struct.unpack_from("<BBI", buf, 4)
        if version != FORGE_ITEM_VERSION:
            raise FormatError(f"unsupported forge item version {version}")
        offset = 10
        if kind_tag == 0:
            (size,) = struct.unpack_from("<I", buf, offset)
            offset += 4
            plugin = PluginModule.from_bytes(buf[offset:offset + size])
            return cls("fused", round_no, plugin=plugin)
        (count,) = struct.unpack_from("<I", buf, offset)
        offset += 4
        if plugin_loader is None and count:
            raise FormatError("mixture item needs a plugin loader to resolve ids")
        entries = []
        for _ in range(count):
            if len(buf) < offset + 40:
                raise FormatError("truncated mixture entry")
            plugin_id = buf[offset:offset + 32].hex()
            (coeff,) = struct.unpack_from("<d", buf, offset + 32)
            offset += 40
            entries.append((plugin_loader(plugin_id), coeff))
        return cls("mixture", round_no, entries=entries)


# ---------------------------------------------------------------------------
# coefficient optimization
# ---------------------------------------------------------------------------


class _BudgetExhausted(Exception):
    pass


def optimize_coefficients(objective: Callable[[np.ndarray], float],
                          config: CoeffOptimConfig,
                          n_vars: int = 2) -> tuple[np.ndarray, float, list[dict]]:
    """Budgeted simplex search over the box; returns the best point seen.

    The trace records every evaluated candidate and never exceeds the
    budget (the simplex solver may try to overshoot maxfev during shrink
    steps, so the cap is enforced here). The initial point is always
    evaluated first, so the result can never be worse than the start.
    """
    lo, hi = config.bounds()
    x0 = np.full(n_vars, config.init_value, dtype=np.float64)
    trace: list[dict] = []
    best = {"x": x0.copy(), "value": None}

    def wrapped(x: np.ndarray) -> float:
        if len(trace) >= config.max_iterations:
            raise _BudgetExhausted
        x = np.clip(x, lo, hi)
        value = float(objective(x))
        if np.isnan(value):
            raise InputError("objective returned NaN")
        trace.append({"point": [float(v) for v in x], "value": value})
        if best["value"] is None or value < best["value"]:
            best["x"] = x.copy()
            best["value"] = value
        return value

    wrapped(x0)
    if config.max_iterations > 1:
        step = 0.35 * (hi - lo) / 2.0
        simplex = np.tile(x0, (n_vars + 1, 1))
        for i in range(n_vars):
            up = x0[i] + step
            simplex[i + 1, i] = up if up <= hi else x0[i] - step
        try:
            minimize(wrapped, x0, method="Nelder-Mead", bounds=[(lo, hi)] * n_vars,
                     options={"maxfev": config.max_iterations - 1,
                              "initial_simplex": simplex,
                              "xatol": 1e-8, "fatol": 1e-10})
        except _BudgetExhausted:
            pass
    return best["x"], float(best["value"]), trace


def guidance_objective(base: BaseEncoder, guidance: Sequence[GuidanceSet],
                       deltas_for: Callable[[np.ndarray], dict[int, np.ndarray]],
                       l1_lambda: float,
                       temperature: float = mdl.DEFAULT_TEMPERATURE) -> Callable:
    """Mean per-task cross-entropy on distilled sets plus l1 * sum |w|."""
    if not guidance:
        raise InputError("guidance data required for coefficient optimization")

    def objective(w: np.ndarray) -> float:
        deltas = deltas_for(w)
        losses = []
        for distilled, table in guidance:
            emb = mdl.encode_np(base, deltas, distilled.inputs)
            logits = mdl.cosine_logits_np(emb, table, temperature)
            z = logits.astype(np.float64)
            zmax = z.max(axis=1, keepdims=True)
            lse = zmax[:, 0] + np.log(np.exp(z - zmax).sum(axis=1))
            losses.append(float(np.mean(lse - z[np.arange(len(z)), distilled.labels])))
        return float(np.mean(losses)) + l1_lambda * float(np.abs(w).sum())

    return objective


@dataclass
class MergeOutcome:
    coefficients: MergeCoefficients
    objective_value: float
    trace: list[dict]


def merge_round_fusion(base: BaseEncoder, item: ForgeItem, branch: PluginModule,
                       guidance: Sequence[GuidanceSet],
                       config: CoeffOptimConfig) -> tuple[ForgeItem, MergeOutcome]:
    """Optimize (w, w'), then fuse the branch into the main plugin module."""
    if item.kind != "fused":
        raise InputError("fusion round requires a fused main item")
    if not guidance:
        raise InputError("fusion round requires guidance data")

    def deltas_for(w: np.ndarray) -> dict[int, np.ndarray]:
        merged = fuse(item.plugin, branch, MergeCoefficients(float(w[0]), float(w[1])))
        return merged.layer_deltas()

    objective = guidance_objective(base, guidance, deltas_for, config.l1_lambda)
    best, value, trace = optimize_coefficients(objective, config, n_vars=2)
    coeffs = MergeCoefficients(float(best[0]), float(best[1]))
    fused = fuse(item.plugin, branch, coeffs)
    new_item = ForgeItem("fused", item.round + 1, plugin=fused)
    return new_item, MergeOutcome(coeffs, value, trace)


def merge_round_mixture(base: BaseEncoder, item: ForgeItem, branch: PluginModule,
                        guidance: Sequence[GuidanceSet],
                        config: CoeffOptimConfig) -> tuple[ForgeItem, MergeOutcome]:
    """Optimize (w, w') with history frozen; rescale history by w, append branch.

    Flattened bookkeeping: nested application of the output rule gives every
    previous entry an effective coefficient multiplied by this round's w.
    """
    if item.kind != "mixture":
        raise InputError("mixture round requires a mixture main item")
    if not guidance:
        raise InputError("mixture round requires guidance data")
    branch_delta = {lid: ad.effective_delta() for lid, ad in branch.adapters.items()}
    main_delta = mixture_deltas(item.entries) if item.entries else {}

    def deltas_for(w: np.ndarray) -> dict[int, np.ndarray]:
        out = {lid: nm.DTYPE(w[0]) * d for lid, d in main_delta.items()}
        for lid, d in branch_delta.items():
            scaled = nm.DTYPE(w[1]) * d
            out[lid] = out[lid] + scaled if lid in out else scaled
        return out

    objective = guidance_objective(base, guidance, deltas_for, config.l1_lambda)
    best, value, trace = optimize_coefficients(objective, config, n_vars=2)
    coeffs = MergeCoefficients(float(best[0]), float(best[1]))
    entries = [(plugin, coeff * coeffs.w_main) for plugin, coeff in item.entries]
    entries.append((branch, coeffs.w_branch))
    new_item = ForgeItem("mixture", item.round + 1, entries=entries)
    return new_item, MergeOutcome(coeffs, value, trace)


# ---------------------------------------------------------------------------
# collaborative baselines
# ---------------------------------------------------------------------------


def baseline_modelsoup(plugins: Sequence[PluginModule]) -> PluginModule:
    """Uniform parameter average of the plugin modules."""
    if not plugins:
        raise InputError("model soup needs at least one plugin module")
    return combine_plugins(plugins, [1.0 / len(plugins)] * len(plugins))


def baseline_lorahub(base: BaseEncoder, plugins: Sequence[PluginModule],
                     guidance: Sequence[GuidanceSet], config: CoeffOptimConfig,
                     ) -> tuple[PluginModule, np.ndarray, list[dict]]:
    """One-shot joint optimization of one coefficient per module."""
    if not plugins:
        raise InputError("joint merging needs at least one plugin module")
    if not guidance:
        raise InputError("joint merging requires guidance data")
    _check_compatible(plugins)

    def deltas_for(w: np.ndarray) -> dict[int, np.ndarray]:
        return combine_plugins(plugins, list(w)).layer_deltas()

    objective = guidance_objective(base, guidance, deltas_for, config.l1_lambda)
    best, _, trace = optimize_coefficients(objective, config, n_vars=len(plugins))
    merged = combine_plugins(plugins, list(best))
    return merged, best, trace
