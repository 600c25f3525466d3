"""Pairwise-gated hierarchical layer-fusion detector.

Layers are fused bottom-up by per-frame two-way softmax gates: level 0
pairs adjacent layers (0,1), (2,3), ...; each later level pairs adjacent
outputs of the previous one, passing an odd leftover slot through
unchanged, until a single per-frame vector remains.  That vector is
pooled over time by additive attention (tanh projection + context vector)
and scored by a linear classifier into one logit.

The training objective combines class-weighted binary cross-entropy over
a clean/augmented view pair with a gate-consistency penalty: the mean JS
divergence between the two views' gate distributions, averaged over all
gates and frames.  ``loss_and_grad`` returns exact reverse-mode gradients
of that objective for every parameter.

Parameter vector layout (float64, in order):
  per gate, level-major: weight (2 x 2D, row-major), bias (2)
  attention projection (D x D, row-major), attention bias (D),
  attention context (D), classifier weight (D), classifier bias (1)
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import NumericFault
from .numerics import LOG_CLAMP, bce_with_logit, js_rows, sigmoid, softmax_rows
from .stacks import LayerStack


@dataclass(frozen=True)
class LevelPlan:
    """One fusion level: gate input-slot pairs plus pass-through slots."""

    gates: tuple[tuple[int, int], ...]
    passes: tuple[int, ...]

    @property
    def n_out(self) -> int:
        return len(self.gates) + len(self.passes)


@dataclass(frozen=True)
class ModelTopology:
    n_layers: int
    dim: int
    levels: tuple[LevelPlan, ...]

    @property
    def gate_count(self) -> int:
        return sum(len(lv.gates) for lv in self.levels)

    def gate_ids(self) -> list[tuple[int, int]]:
        """(level, index-within-level) for every gate, level-major."""
        return [(li, gi) for li, lv in enumerate(self.levels)
                for gi in range(len(lv.gates))]

    def param_count(self) -> int:
        d = self.dim
        return self.gate_count * (4 * d + 2) + d * d + 2 * d + d + 1


def build_topology(n_layers: int, dim: int) -> ModelTopology:
    """Plan the fusion tree for ``n_layers`` inputs of width ``dim``.

    Each level turns S slots into floor(S/2) gated fusions plus one
    pass-through when S is odd; recursion stops at a single slot.
    """
    if n_layers < 2:
        raise ValueError(f"need at least 2 layers to fuse, got {n_layers}")
    if dim < 1:
        raise ValueError(f"feature dim must be positive, got {dim}")
    levels = []
    slots = n_layers
    while slots > 1:
        gates = tuple((2 * i, 2 * i + 1) for i in range(slots // 2))
        passes = (slots - 1,) if slots % 2 else ()
        levels.append(LevelPlan(gates=gates, passes=passes))
        slots = len(gates) + len(passes)
    return ModelTopology(n_layers=n_layers, dim=dim, levels=tuple(levels))


@dataclass
class ModelParams:
    """All learnable parameters as one flat float64 vector.

    The slice accessors return views into ``vector``, so in-place edits of
    a view (used by tests and by gradient packing) update the model.
    """

    topology: ModelTopology
    vector: np.ndarray = field(repr=False)

    def __post_init__(self) -> None:
        self.vector = np.asarray(self.vector, dtype=np.float64)
        expected = self.topology.param_count()
        if self.vector.shape != (expected,):
            raise ValueError(f"parameter vector has {self.vector.shape}, "
                             f"topology needs ({expected},)")

    def _gate_offset(self, g: int) -> int:
        return g * (4 * self.topology.dim + 2)

    def gate_weight(self, g: int) -> np.ndarray:
        d = self.topology.dim
        o = self._gate_offset(g)
        return self.vector[o:o + 4 * d].reshape(2, 2 * d)

    def gate_bias(self, g: int) -> np.ndarray:
        d = self.topology.dim
        o = self._gate_offset(g) + 4 * d
        return self.vector[o:o + 2]

    @property
    def _attn_offset(self) -> int:
        return self.topology.gate_count * (4 * self.topology.dim + 2)

    @property
    def attn_proj(self) -> np.ndarray:
        d = self.topology.dim
        o = self._attn_offset
        return self.vector[o:o + d * d].reshape(d, d)

    @property
    def attn_bias(self) -> np.ndarray:
        d = self.topology.dim
        o = self._attn_offset + d * d
        return self.vector[o:o + d]

    @property
    def attn_context(self) -> np.ndarray:
        d = self.topology.dim
        o = self._attn_offset + d * d + d
        return self.vector[o:o + d]

    @property
    def classifier_weight(self) -> np.ndarray:
        d = self.topology.dim
        o = self._attn_offset + d * d + 2 * d
        return self.vector[o:o + d]

    @property
    def classifier_bias(self) -> float:
        return float(self.vector[-1])

    def copy(self) -> "ModelParams":
        return ModelParams(self.topology, self.vector.copy())


def init_params(topology: ModelTopology, seed: int) -> ModelParams:
    """Glorot-uniform weights (a = sqrt(6 / (fan_in + fan_out))), zero
    biases; deterministic in ``seed``."""
    d = topology.dim
    rng = np.random.default_rng(seed)
    vec = np.zeros(topology.param_count(), dtype=np.float64)
    params = ModelParams(topology, vec)
    a_gate = np.sqrt(6.0 / (2 * d + 2))
    for g in range(topology.gate_count):
        params.gate_weight(g)[:] = rng.uniform(-a_gate, a_gate, size=(2, 2 * d))
    params.attn_proj[:] = rng.uniform(-np.sqrt(6.0 / (2 * d)),
                                      np.sqrt(6.0 / (2 * d)), size=(d, d))
    params.attn_context[:] = rng.uniform(-np.sqrt(6.0 / (d + 1)),
                                         np.sqrt(6.0 / (d + 1)), size=d)
    params.classifier_weight[:] = rng.uniform(-np.sqrt(6.0 / (d + 1)),
                                              np.sqrt(6.0 / (d + 1)), size=d)
    return params


@dataclass
class GateTrace:
    level: int
    index: int
    alpha: np.ndarray  # (T, 2) rows on the simplex


@dataclass
class FusionTrace:
    """Everything observable from one forward pass."""

    gates: list[GateTrace]
    attention: np.ndarray  # (T,) weights over frames
    logit: float
    posterior: float
    fused_frames: list[list[np.ndarray]] | None = None  # per level, per slot

    def gate_alphas(self) -> list[np.ndarray]:
        return [g.alpha for g in self.gates]


class _ForwardContext:
    """Intermediate activations retained for the backward pass."""

    __slots__ = ("slots", "concats", "alphas", "final", "tanh_a", "e",
                 "attn_w", "utt_vec", "logit")

    def __init__(self):
        self.slots: list[list[np.ndarray]] = []   # slots[level] -> inputs of that level
        self.concats: list[np.ndarray] = []       # per gate (T, 2D)
        self.alphas: list[np.ndarray] = []        # per gate (T, 2)
        self.final: np.ndarray | None = None
        self.tanh_a: np.ndarray | None = None
        self.e: np.ndarray | None = None
        self.attn_w: np.ndarray | None = None
        self.utt_vec: np.ndarray | None = None
        self.logit: float = 0.0


def _forward_full(stack: LayerStack, params: ModelParams) -> _ForwardContext:
    topo = params.topology
    if stack.n_layers != topo.n_layers or stack.dim != topo.dim:
        raise ValueError(
            f"stack dims (L={stack.n_layers}, D={stack.dim}) do not match "
            f"topology (L={topo.n_layers}, D={topo.dim})")
    ctx = _ForwardContext()
    slots = [stack.features[l] for l in range(topo.n_layers)]
    g = 0
    for li, level in enumerate(topo.levels):
        ctx.slots.append(slots)
        out = []
        for gi, (a, b) in enumerate(level.gates):
            h_a, h_b = slots[a], slots[b]
            concat = np.concatenate([h_a, h_b], axis=1)
            z = concat @ params.gate_weight(g).T + params.gate_bias(g)
            if not np.isfinite(z).all():
                t = int(np.argwhere(~np.isfinite(z))[0][0])
                raise NumericFault(f"non-finite gate activation at level {li} "
                                   f"gate {gi} frame {t}")
            alpha = softmax_rows(z)
            out.append(alpha[:, 0:1] * h_a + alpha[:, 1:2] * h_b)
            ctx.concats.append(concat)
            ctx.alphas.append(alpha)
            g += 1
        for p in level.passes:
            out.append(slots[p])
        slots = out
    ctx.final = slots[0]

    h = ctx.final
    a = h @ params.attn_proj.T + params.attn_bias
    ctx.tanh_a = np.tanh(a)
    ctx.e = ctx.tanh_a @ params.attn_context
    if not np.isfinite(ctx.e).all():
        t = int(np.argwhere(~np.isfinite(ctx.e))[0][0])
        raise NumericFault(f"non-finite attention score at frame {t}")
    w = np.exp(ctx.e - ctx.e.max())
    ctx.attn_w = w / w.sum()
    ctx.utt_vec = ctx.attn_w @ h
    ctx.logit = float(params.classifier_weight @ ctx.utt_vec
                      + params.classifier_bias)
    if not np.isfinite(ctx.logit):
        raise NumericFault("non-finite output logit")
    return ctx


def forward(stack: LayerStack, params: ModelParams,
            keep_intermediates: bool = False) -> FusionTrace:
    """Run the detector on one utterance.

    Set ``keep_intermediates`` to retain the per-level fused frame tables
    (needed when a caller wants to inspect or differentiate the graph).
    """
    ctx = _forward_full(stack, params)
    gates = [GateTrace(level=li, index=gi, alpha=alpha)
             for (li, gi), alpha in zip(params.topology.gate_ids(), ctx.alphas)]
    fused = None
    if keep_intermediates:
        fused = [list(level_slots) for level_slots in ctx.slots[1:]]
        fused.append([ctx.final])
    return FusionTrace(gates=gates, attention=ctx.attn_w, logit=ctx.logit,
                       posterior=sigmoid(ctx.logit), fused_frames=fused)


@dataclass(frozen=True)
class LossBreakdown:
    total: float
    cls: float
    cons: float
    lam: float


def _consistency(alphas_clean: list[np.ndarray],
                 alphas_aug: list[np.ndarray]) -> float:
    """Mean JS divergence over all gates and frames."""
    total = 0.0
    n = 0
    for p, q in zip(alphas_clean, alphas_aug):
        total += float(js_rows(p, q).sum())
        n += p.shape[0]
    return total / n


def _check_pair(clean_gates, aug_gates) -> None:
    if len(clean_gates) != len(aug_gates):
        raise ValueError("view traces come from different topologies")
    for p, q in zip(clean_gates, aug_gates):
        if p.shape != q.shape:
            raise ValueError("view traces disagree on frame count")


def loss(clean: FusionTrace, aug: FusionTrace, label: int, lam: float,
         class_weights: tuple[float, float] = (1.0, 1.0)) -> LossBreakdown:
    """Training objective for one clean/augmented pair of traces.

    cls  = w_label * mean BCE of the two views' posteriors against label
    cons = mean gate JS divergence between the views
    total = cls + lam * cons
    """
    if label not in (0, 1):
        raise ValueError(f"label must be 0 or 1, got {label!r}")
    _check_pair(clean.gate_alphas(), aug.gate_alphas())
    w = class_weights[label]
    cls = w * 0.5 * (bce_with_logit(clean.logit, label)
                     + bce_with_logit(aug.logit, label))
    cons = _consistency(clean.gate_alphas(), aug.gate_alphas())
    return LossBreakdown(total=cls + lam * cons, cls=cls, cons=cons, lam=lam)


def _backward_view(ctx: _ForwardContext, params: ModelParams, d_logit: float,
                   d_alphas: list[np.ndarray], grad: np.ndarray) -> None:
    """Accumulate one view's parameter gradients into ``grad``.

    ``d_alphas`` carries the consistency term's direct gradient on each
    gate's distribution; the classification path enters through
    ``d_logit``.  Accumulation order is fixed, so results are
    deterministic.
    """
    topo = params.topology
    gview = ModelParams(topo, grad)  # same layout; slice views for packing
    d = topo.dim
    h = ctx.final

    # classifier
    gview.classifier_weight[:] += d_logit * ctx.utt_vec
    grad[-1] += d_logit
    d_utt = d_logit * params.classifier_weight

    # attention pooling: utt = sum_t w_t h_t, w = softmax(e), e = tanh(a) @ u
    w = ctx.attn_w
    d_w = h @ d_utt
    d_h = np.outer(w, d_utt)
    d_e = w * (d_w - float(w @ d_w))
    gview.attn_context[:] += ctx.tanh_a.T @ d_e
    d_a = np.outer(d_e, params.attn_context) * (1.0 - ctx.tanh_a ** 2)
    gview.attn_proj[:] += d_a.T @ h
    gview.attn_bias[:] += d_a.sum(axis=0)
    d_h += d_a @ params.attn_proj

    # fusion levels, deepest first; each slot feeds exactly one consumer
    d_slots = [d_h]
    g = topo.gate_count
    for li in range(len(topo.levels) - 1, -1, -1):
        level = topo.levels[li]
        slots_in = ctx.slots[li]
        d_in = [np.zeros_like(s) for s in slots_in]
        n_gates = len(level.gates)
        for p in reversed(range(len(level.passes))):
            d_in[level.passes[p]] += d_slots[n_gates + p]
        for gi in reversed(range(n_gates)):
            g -= 1
            a_slot, b_slot = level.gates[gi]
            h_a, h_b = slots_in[a_slot], slots_in[b_slot]
            alpha = ctx.alphas[g]
            d_f = d_slots[gi]
            d_alpha = d_alphas[g].copy()
            d_alpha[:, 0] += np.sum(d_f * h_a, axis=1)
            d_alpha[:, 1] += np.sum(d_f * h_b, axis=1)
            d_in[a_slot] += alpha[:, 0:1] * d_f
            d_in[b_slot] += alpha[:, 1:2] * d_f
            d_z = alpha * (d_alpha - np.sum(alpha * d_alpha, axis=1,
                                            keepdims=True))
            gview.gate_weight(g)[:] += d_z.T @ ctx.concats[g]
            gview.gate_bias(g)[:] += d_z.sum(axis=0)
            d_concat = d_z @ params.gate_weight(g)
            d_in[a_slot] += d_concat[:, :d]
            d_in[b_slot] += d_concat[:, d:]
        d_slots = d_in


def loss_and_grad(clean: LayerStack, aug: LayerStack, label: int,
                  params: ModelParams, lam: float,
                  class_weights: tuple[float, float] = (1.0, 1.0),
                  ) -> tuple[LossBreakdown, np.ndarray]:
    """Objective value and its exact gradient w.r.t. every parameter.

    Both views' graphs receive gradients: the classification term through
    each view's logit, the consistency term through both gate
    distributions of every (gate, frame) pair.
    """
    if label not in (0, 1):
        raise ValueError(f"label must be 0 or 1, got {label!r}")
    ctx_c = _forward_full(clean, params)
    ctx_a = _forward_full(aug, params)
    _check_pair(ctx_c.alphas, ctx_a.alphas)

    w = class_weights[label]
    cls = w * 0.5 * (bce_with_logit(ctx_c.logit, label)
                     + bce_with_logit(ctx_a.logit, label))
    cons = _consistency(ctx_c.alphas, ctx_a.alphas)
    breakdown = LossBreakdown(total=cls + lam * cons, cls=cls, cons=cons,
                              lam=lam)

    m_total = sum(a.shape[0] for a in ctx_c.alphas)  # gate count * frames
    scale = lam / m_total
    d_alphas_c = []
    d_alphas_a = []
    for p, q in zip(ctx_c.alphas, ctx_a.alphas):
        mid = np.maximum(0.5 * (p + q), LOG_CLAMP)
        d_alphas_c.append(scale * 0.5 * np.log(np.maximum(p, LOG_CLAMP) / mid))
        d_alphas_a.append(scale * 0.5 * np.log(np.maximum(q, LOG_CLAMP) / mid))

    grad = np.zeros_like(params.vector)
    d_logit_c = w * 0.5 * (sigmoid(ctx_c.logit) - label)
    d_logit_a = w * 0.5 * (sigmoid(ctx_a.logit) - label)
    _backward_view(ctx_c, params, d_logit_c, d_alphas_c, grad)
    _backward_view(ctx_a, params, d_logit_a, d_alphas_a, grad)
    if not np.isfinite(grad).all():
        raise NumericFault("non-finite parameter gradient")
    return breakdown, grad


def export_gate_maps(trace: FusionTrace) -> list[tuple[int, int, int, float]]:
    """Flatten a trace's gates to (level, gate index, frame, alpha_1) rows,
    one per (gate, frame)."""
    if not trace.gates:
        raise ValueError("trace contains no gates")
    rows = []
    for gt in trace.gates:
        for t in range(gt.alpha.shape[0]):
            rows.append((gt.level, gt.index, t, float(gt.alpha[t, 0])))
    return rows


def write_gate_maps_csv(trace: FusionTrace, path) -> None:
    """CSV export with header ``level,gate,frame,alpha1`` and 9 significant
    digits per value."""
    with open(path, "w", encoding="utf-8") as f:
        f.write("level,gate,frame,alpha1\n")
        for level, gate, frame, alpha1 in export_gate_maps(trace):
            f.write(f"{level},{gate},{frame},{alpha1:.9g}\n")
