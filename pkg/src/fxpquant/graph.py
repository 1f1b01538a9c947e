"""Model graphs of Conv/Linear-BN blocks with fixed-point quantized training.

Activations travel between layers in a scaled domain: each wire carries
``z = x / eta`` where x is the real pre-activation and eta is the fix scaling
factor of the wire's master consumer.  All wire values are dyadic rationals
with 32-bit-bounded numerators, so float64 arithmetic on them is exact and the
quantized forward agrees with the integer engine mantissa for mantissa.

Sharing rules for residual topology: the quantizing consumers of a producer
(reached directly or through add nodes) form a sibling group; the first in
topological order is the master and owns the group's clipping level.  Sibling
fractional lengths stay private; differing FLs only relabel mantissas, which
costs bit shifts at add nodes and nothing anywhere else.

Training runs every Conv-BN block twice per step: a no-gradient pass with the
full-precision weight refreshes the BN running statistics, then the gradient
pass uses the quantized effective weight built from those statistics.  Weight
fractional lengths are recomputed from the effective weight's standard
deviation every step; activation fractional lengths come from momentum
buffers updated after the step, so a parent always reads the child's buffered
value from the previous step.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .container import (
    MODEL_MAGIC,
    atomic_write_bytes,
    decode_meta,
    encode_meta,
    pack_sections,
    unpack_sections,
)
from .errors import ConfigError, ContractError, DomainError, TrainingDiverged
from .formats import FixFormat, round_half_away, to_mantissa
from .stats import fl_from_std

BN_MOMENTUM = 0.1
FL_MOMENTUM = 0.1
SIGMA_FLOOR = 1e-5
ALPHA_FLOOR = 1e-3


def _round_half_away_t(t: torch.Tensor) -> torch.Tensor:
    return torch.sign(t) * torch.floor(torch.abs(t) + 0.5)


class _PactWireQuant(torch.autograd.Function):
    """Mantissas of a pact-clipped wire, with the straight-through rule.

    Forward: round(clip(z * 2**label_fl, 0, M)); the scaled argument equals
    x * M / alpha, so the clip boundary is the clipping level.  Backward
    passes through inside (0, M) and routes the saturation indicator to the
    shared clipping level: d(loss)/d(alpha) += sum_sat(g) * M / alpha.
    """

    @staticmethod
    def forward(ctx, z, alpha, label_fl, m_scale):
        u = z * (2.0**label_fl)
        mant = _round_half_away_t(torch.clamp(u, 0.0, m_scale))
        ctx.save_for_backward(u, alpha)
        ctx.label_fl = label_fl
        ctx.m_scale = m_scale
        return mant

    @staticmethod
    def backward(ctx, g):
        u, alpha = ctx.saved_tensors
        gz = galpha = None
        if ctx.needs_input_grad[0]:
            inside = (u > 0.0) & (u < ctx.m_scale)
            gz = g * inside.to(g.dtype) * (2.0**ctx.label_fl)
        if ctx.needs_input_grad[1]:
            saturated = (u >= ctx.m_scale).to(g.dtype)
            galpha = (g * saturated).sum() * (ctx.m_scale / alpha.detach())
        return gz, galpha, None, None


class _FixedWireQuant(torch.autograd.Function):
    """Mantissas of a plain fixed-point wire (eta = 1), passthrough inside."""

    @staticmethod
    def forward(ctx, z, label_fl, lo, hi):
        u = z * (2.0**label_fl)
        mant = _round_half_away_t(torch.clamp(u, float(lo), float(hi)))
        ctx.save_for_backward(u)
        ctx.args = (label_fl, lo, hi)
        return mant

    @staticmethod
    def backward(ctx, g):
        (u,) = ctx.saved_tensors
        label_fl, lo, hi = ctx.args
        inside = (u > lo) & (u < hi)
        return g * inside.to(g.dtype) * (2.0**label_fl), None, None, None


def _ste_fix_quant(t: torch.Tensor, fl: int, lo: int, hi: int) -> torch.Tensor:
    """Fixed-point quantize with gradient passthrough (detach trick)."""
    s = 2.0**fl
    q = torch.clamp(_round_half_away_t(t * s), float(lo), float(hi)) / s
    return t + (q - t).detach()


@dataclass
class EffectiveParams:
    """Fused parameters: (gamma/sigma)(eta_in/eta_out) W and the matching bias."""

    eff_weight: np.ndarray
    eff_bias: np.ndarray


@dataclass
class GraphNode:
    name: str
    kind: str  # 'input' | 'layer' | 'add'
    inputs: tuple[str, ...]


class ConvBNLayer(nn.Module):
    """One Conv/Linear + BN block plus the quantization state of its input."""

    def __init__(
        self,
        name: str,
        op: str,
        weight_shape: tuple[int, ...],
        stride: int = 1,
        padding: int = 0,
        has_bn: bool = True,
        in_kind: str = "pact",
        in_signed: bool = False,
        in_fl: int = 8,
        in_fl_searchable: bool = False,
    ):
        super().__init__()
        if op not in ("conv2d", "linear"):
            raise ConfigError(f"unknown op {op!r}")
        self.name = name
        self.op = op
        self.stride = stride
        self.padding = padding
        self.has_bn = has_bn
        self.in_kind = in_kind
        self.in_signed = in_signed
        self.in_fl = in_fl
        self.in_fl_searchable = in_fl_searchable
        self.master_ref: str | None = None
        self.weight_fl: int | None = None
        self.weight_fl_frozen = False
        self.act_fl_frozen = False
        self.act_sigma: float | None = None

        self.weight = nn.Parameter(torch.zeros(weight_shape, dtype=torch.float64))
        out_ch = weight_shape[0]
        if has_bn:
            self.gamma = nn.Parameter(torch.ones(out_ch, dtype=torch.float64))
            self.beta = nn.Parameter(torch.zeros(out_ch, dtype=torch.float64))
            self.register_buffer("running_mean", torch.zeros(out_ch, dtype=torch.float64))
            self.register_buffer("running_var", torch.ones(out_ch, dtype=torch.float64))
        self.alpha = nn.Parameter(torch.tensor(1.0, dtype=torch.float64))

    def bn_sigma(self) -> torch.Tensor:
        """Running standard deviation, floored at 1e-5."""
        if not self.has_bn:
            raise ContractError(f"layer {self.name} has no batch norm")
        var = self.running_var
        if not torch.isfinite(var).all():
            raise DomainError(f"non-finite running variance in {self.name}")
        return torch.clamp(torch.sqrt(var), min=SIGMA_FLOOR)

    def apply_op(self, x: torch.Tensor, weight: torch.Tensor) -> torch.Tensor:
        if self.op == "conv2d":
            return F.conv2d(x, weight, stride=self.stride, padding=self.padding)
        if x.dim() > 2:
            x = x.reshape(x.shape[0], -1)
        return F.linear(x, weight)

    def update_bn_stats(self, y: torch.Tensor):
        dims = (0, 2, 3) if y.dim() == 4 else (0,)
        mean = y.mean(dim=dims)
        var = y.var(dim=dims, unbiased=True)
        self.running_mean.mul_(1.0 - BN_MOMENTUM).add_(BN_MOMENTUM * mean)
        self.running_var.mul_(1.0 - BN_MOMENTUM).add_(BN_MOMENTUM * var)

    def effective_tensors(self, eta_in: float, eta_out: float):
        """Full-precision fused weight and bias for the given scale pair."""
        w = self.weight
        if self.has_bn:
            ratio = self.gamma / self.bn_sigma()
            shape = (-1,) + (1,) * (w.dim() - 1)
            eff_w = ratio.reshape(shape) * w * (eta_in / eta_out)
            eff_b = (self.beta - ratio * self.running_mean) / eta_out
        else:
            eff_w = w * (eta_in / eta_out)
            eff_b = torch.zeros(w.shape[0], dtype=w.dtype)
        return eff_w, eff_b


class ModelGraph(nn.Module):
    """Ordered node list plus the layer modules, masters and freeze state."""

    def __init__(self, nodes: list[GraphNode], layers: dict[str, ConvBNLayer],
                 input_shape: tuple[int, ...], word_length: int = 8):
        super().__init__()
        self.nodes = list(nodes)
        self.layers = nn.ModuleDict(layers)
        self.input_shape = tuple(input_shape)
        self.word_length = word_length
        self.fl_momentum = FL_MOMENTUM
        self.frozen = False
        self._node_by_name = {n.name: n for n in self.nodes}
        self._validate()
        assign_masters(self)

    # -- topology ---------------------------------------------------------

    def _validate(self):
        seen = set()
        for node in self.nodes:
            for src in node.inputs:
                if src not in seen:
                    raise ConfigError(f"node {node.name} consumes undefined wire {src!r}")
            if node.kind == "layer" and node.name not in self.layers:
                raise ConfigError(f"missing layer module for node {node.name}")
            seen.add(node.name)
        kinds = [n.kind for n in self.nodes]
        if kinds.count("input") != 1 or kinds[0] != "input":
            raise ConfigError("graph must start with exactly one input node")

    def consumers(self, wire: str) -> list[GraphNode]:
        return [n for n in self.nodes if wire in n.inputs]

    def quantizing_children(self, wire: str) -> list[str]:
        """Layers that quantize values derived from this wire, in topo order."""
        out: list[str] = []
        for node in self.consumers(wire):
            if node.kind == "layer":
                if node.name not in out:
                    out.append(node.name)
            elif node.kind == "add":
                for name in self.quantizing_children(node.name):
                    if name not in out:
                        out.append(name)
        order = {n.name: i for i, n in enumerate(self.nodes)}
        return sorted(out, key=lambda n: order[n])

    def direct_layer_consumers(self, wire: str) -> list[str]:
        return [n.name for n in self.consumers(wire) if n.kind == "layer"]

    def master_child(self, wire: str) -> str | None:
        children = self.quantizing_children(wire)
        return children[0] if children else None

    def effective_alpha(self, layer: ConvBNLayer) -> torch.Tensor:
        if layer.master_ref is not None:
            return self.layers[layer.master_ref].alpha
        return layer.alpha

    def m_scale(self) -> float:
        return 2.0**self.word_length - 1.0

    def eta_of(self, layer_name: str | None) -> torch.Tensor | float:
        """Fix scaling factor of a layer's input quantizer; 1.0 past the head."""
        if layer_name is None:
            return 1.0
        layer = self.layers[layer_name]
        if layer.in_kind == "fixed":
            return 1.0
        alpha = self.effective_alpha(layer).detach()
        return (2.0**layer.in_fl) * alpha / self.m_scale()

    def wire_unit_fl(self, wire: str) -> int:
        """FL labeling the wire's z units: the master child's FL (WL past the head)."""
        m = self.master_child(wire)
        return self.layers[m].in_fl if m is not None else self.word_length

    # -- quantized forward --------------------------------------------------

    def _quantize_wire(self, z: torch.Tensor, wire: str):
        """Shared 8-bit mantissas of a wire, plus the labeling layer."""
        label_name = self.direct_layer_consumers(wire)[0]
        label = self.layers[label_name]
        if label.in_kind == "pact":
            alpha = self.effective_alpha(label)
            mant = _PactWireQuant.apply(z, alpha, label.in_fl, self.m_scale())
        else:
            fmt = FixFormat(self.word_length, label.in_fl, signed=label.in_signed)
            mant = _FixedWireQuant.apply(z, label.in_fl, fmt.mantissa_min, fmt.mantissa_max)
        return mant, label

    def forward_quantized(self, x: torch.Tensor, training: bool = False, capture=None):
        """Quantized forward in the z domain; returns head logits.

        With training=True, runs the double forward (BN statistics update from
        the no-gradient full-precision pass) and records the batch statistics
        needed for the post-step buffer updates on self._pending_stds.
        """
        if training and self.frozen:
            raise ContractError("graph is frozen; training forward is not allowed")
        x = x.to(torch.float64)
        wires: dict[str, torch.Tensor] = {}
        mants: dict[str, tuple[torch.Tensor, ConvBNLayer]] = {}
        pending: dict[str, float] = {}

        for node in self.nodes:
            if node.kind == "input":
                wires[node.name] = x
                continue
            if node.kind == "add":
                out_fl = self.wire_unit_fl(node.name)
                pieces = []
                for src in node.inputs:
                    shift = self.wire_unit_fl(src) - out_fl
                    pieces.append(wires[src] * (2.0**shift))
                wires[node.name] = sum(pieces)
                if capture is not None:
                    capture.setdefault("acc", {})[node.name] = wires[node.name].detach()
                continue

            layer: ConvBNLayer = self.layers[node.name]
            src = node.inputs[0]
            if src not in mants:
                mants[src] = self._quantize_wire(wires[src], src)
            mant, label = mants[src]
            if capture is not None:
                capture.setdefault("mant", {})[src] = mant.detach()

            q = mant * (2.0 ** -layer.in_fl)

            if training:
                with torch.no_grad():
                    if label.in_kind == "pact":
                        scale = self.effective_alpha(label).detach() / self.m_scale()
                    else:
                        scale = 2.0 ** -label.in_fl
                    x_q = mant.detach() * scale
                    if layer.has_bn:
                        y1 = layer.apply_op(x_q, layer.weight.detach())
                        layer.update_bn_stats(y1)
                    eta_unit = self.eta_of(self.master_child(src))
                    eta_unit = eta_unit.item() if torch.is_tensor(eta_unit) else eta_unit
                    pre = wires[src].detach() * eta_unit
                    pending[node.name] = float(pre.std())

            eta_in = self.eta_of(node.name)
            eta_out = self.eta_of(self.master_child(node.name))
            eff_w, eff_b = layer.effective_tensors(
                eta_in.item() if torch.is_tensor(eta_in) else eta_in,
                eta_out.item() if torch.is_tensor(eta_out) else eta_out,
            )

            if not torch.isfinite(eff_w).all():
                raise TrainingDiverged(f"non-finite effective weight in {node.name}")
            if layer.weight_fl_frozen or self.frozen:
                fl_w = layer.weight_fl
                if fl_w is None:
                    raise ContractError(f"layer {node.name} has no frozen weight FL")
            else:
                try:
                    fl_w = weight_fl_for(eff_w.detach().numpy(), self.word_length)
                except DomainError as exc:
                    raise TrainingDiverged(f"{node.name}: {exc}") from exc
                layer.weight_fl = fl_w
            wfmt = FixFormat(self.word_length, fl_w, signed=True)
            w_hat = _ste_fix_quant(eff_w, fl_w, wfmt.mantissa_min, wfmt.mantissa_max)

            fl_acc = layer.in_fl + fl_w
            bfmt = FixFormat(32, fl_acc, signed=True)
            b_hat = _ste_fix_quant(eff_b, fl_acc, bfmt.mantissa_min, bfmt.mantissa_max)

            z_out = layer.apply_op(q, w_hat)
            b_shape = (1, -1) + (1,) * (z_out.dim() - 2)
            wires[node.name] = z_out + b_hat.reshape(b_shape)
            if capture is not None:
                capture.setdefault("acc", {})[node.name] = wires[node.name].detach()

        if training:
            self._pending_stds = pending
        return wires[self.nodes[-1].name]

    def apply_pending_fl_updates(self):
        """EMA the recorded pre-quantization stds and rederive activation FLs.

        Returns the number of layers whose activation FL changed.
        """
        if self.frozen:
            raise ContractError("graph is frozen; buffers may not change")
        pending = getattr(self, "_pending_stds", None) or {}
        changed = 0
        for name, std in pending.items():
            layer = self.layers[name]
            if layer.in_kind != "pact":
                continue
            before = layer.in_fl
            update_act_fl(layer, std, self.word_length, self.fl_momentum)
            changed += int(layer.in_fl != before)
        self._pending_stds = {}
        return changed

    # -- float reference forward -------------------------------------------

    def forward_float(self, x: torch.Tensor, training: bool = False) -> torch.Tensor:
        """Standard full-precision forward (batch-stat BN + ReLU), for baselines."""
        x = x.to(torch.float64)
        wires: dict[str, torch.Tensor] = {}
        for node in self.nodes:
            if node.kind == "input":
                wires[node.name] = x
                continue
            if node.kind == "add":
                wires[node.name] = sum(wires[src] for src in node.inputs)
                continue
            layer = self.layers[node.name]
            h = wires[node.inputs[0]]
            if layer.in_kind == "pact":
                h = F.relu(h)
            y = layer.apply_op(h, layer.weight)
            if layer.has_bn:
                if training:
                    dims = (0, 2, 3) if y.dim() == 4 else (0,)
                    mean = y.mean(dim=dims)
                    var = y.var(dim=dims, unbiased=False)
                    with torch.no_grad():
                        layer.running_mean.mul_(1 - BN_MOMENTUM).add_(BN_MOMENTUM * mean)
                        n = y.numel() // y.shape[1]
                        layer.running_var.mul_(1 - BN_MOMENTUM).add_(
                            BN_MOMENTUM * var * n / max(n - 1, 1)
                        )
                else:
                    mean, var = layer.running_mean, layer.running_var
                shape = (1, -1) + (1,) * (y.dim() - 2)
                y = (y - mean.reshape(shape)) / torch.sqrt(var.reshape(shape) + 1e-5)
                y = y * layer.gamma.reshape(shape) + layer.beta.reshape(shape)
            wires[node.name] = y
        return wires[self.nodes[-1].name]

    # -- lifecycle -----------------------------------------------------------

    def calibrate(self, x: torch.Tensor, pretrained: bool = False):
        """Initialize clipping levels, sigma buffers and activation FLs.

        Runs one full-precision forward: fresh models normalize with batch
        statistics (and warm-start the running buffers); pretrained models
        keep their loaded statistics.
        """
        if self.frozen:
            raise ContractError("graph is frozen; quantizer state may not change")
        x = x.to(torch.float64)
        with torch.no_grad():
            wires: dict[str, torch.Tensor] = {}
            for node in self.nodes:
                if node.kind == "input":
                    wires[node.name] = x
                    continue
                if node.kind == "add":
                    wires[node.name] = sum(wires[src] for src in node.inputs)
                    continue
                layer = self.layers[node.name]
                pre = wires[node.inputs[0]]
                self._init_quantizer(layer, pre)
                h = F.relu(pre) if layer.in_kind == "pact" else pre
                y = layer.apply_op(h, layer.weight)
                if layer.has_bn:
                    dims = (0, 2, 3) if y.dim() == 4 else (0,)
                    if pretrained:
                        mean, var = layer.running_mean, layer.running_var
                    else:
                        mean = y.mean(dim=dims)
                        var = y.var(dim=dims, unbiased=False)
                        layer.running_mean.copy_(mean)
                        layer.running_var.copy_(var)
                    shape = (1, -1) + (1,) * (y.dim() - 2)
                    y = (y - mean.reshape(shape)) / torch.sqrt(
                        var.reshape(shape) + 1e-5
                    ) * layer.gamma.reshape(shape) + layer.beta.reshape(shape)
                wires[node.name] = y

    def _init_quantizer(self, layer: ConvBNLayer, pre: torch.Tensor):
        if layer.in_kind != "pact":
            return
        peak = float(F.relu(pre).max())
        with torch.no_grad():
            layer.alpha.fill_(max(peak, ALPHA_FLOOR))
        std = float(pre.std())
        if std > 0 and math.isfinite(std):
            layer.act_sigma = std
            if not layer.in_fl_searchable:
                layer.in_fl = fl_from_std(std, layer.in_signed, self.word_length)

    def freeze(self):
        """Pin every format; afterwards the graph only evaluates and compiles."""
        for node in self.nodes:
            if node.kind != "layer":
                continue
            layer = self.layers[node.name]
            if layer.weight_fl is None or not layer.weight_fl_frozen:
                eta_in = self.eta_of(node.name)
                eta_out = self.eta_of(self.master_child(node.name))
                eff_w, _ = layer.effective_tensors(
                    eta_in.item() if torch.is_tensor(eta_in) else eta_in,
                    eta_out.item() if torch.is_tensor(eta_out) else eta_out,
                )
                layer.weight_fl = weight_fl_for(eff_w.detach().numpy(), self.word_length)
                layer.weight_fl_frozen = True
            layer.act_fl_frozen = True
        self.frozen = True


# -- module-level operations ------------------------------------------------


def assign_masters(graph: ModelGraph) -> ModelGraph:
    """Pick one master per sibling group; siblings read its clipping level.

    The group of a producer is its quantizing children (consumers reached
    directly or through add nodes); the first child in topological order is
    the master.  Fractional lengths stay private to each sibling.
    """
    for layer in graph.layers.values():
        layer.master_ref = None
    for node in graph.nodes:
        if node.kind == "add":
            continue  # add wires inherit sharing from their root producers
        children = graph.quantizing_children(node.name)
        if len(children) <= 1:
            continue
        master = children[0]
        root = graph.layers[master].master_ref or master
        for name in children[1:]:
            if name != root and graph.layers[name].master_ref is None:
                graph.layers[name].master_ref = root
    # exactly one master per group: a master never points at anyone
    for layer in graph.layers.values():
        if layer.master_ref is not None and graph.layers[layer.master_ref].master_ref:
            raise ConfigError(f"master chain detected at {layer.name}")
    return graph


def weight_fl_for(eff_weight: np.ndarray, word_length: int = 8) -> int:
    """Signed weight FL from the effective weight's standard deviation.

    Constant weights (e.g. a single-element kernel) have zero spread; the
    mean magnitude then stands in as the scale.
    """
    std = float(np.std(eff_weight))
    if std == 0.0:
        std = float(np.mean(np.abs(eff_weight)))
    if not (std > 0 and math.isfinite(std)):
        raise DomainError("degenerate effective weight: zero or non-finite spread")
    return fl_from_std(std, signed=True, word_length=word_length)


def effective_params(graph: ModelGraph, layer_name: str, child_eta: float) -> EffectiveParams:
    """Fused full-precision weight/bias of one layer against a child's eta."""
    layer = graph.layers[layer_name]
    eta_in = graph.eta_of(layer_name)
    eta_in = eta_in.item() if torch.is_tensor(eta_in) else eta_in
    with torch.no_grad():
        eff_w, eff_b = layer.effective_tensors(eta_in, float(child_eta))
    return EffectiveParams(eff_w.numpy().copy(), eff_b.numpy().copy())


def quantize_effective(ep: EffectiveParams, word_length: int = 8):
    """int8 mantissas of the effective weight plus the derived signed format."""
    if not np.all(np.isfinite(ep.eff_weight)):
        raise DomainError("effective weight contains non-finite values")
    fl = weight_fl_for(ep.eff_weight, word_length)
    fmt = FixFormat(word_length, fl, signed=True)
    return to_mantissa(ep.eff_weight, fmt).astype(np.int8), fmt


def update_act_fl(layer: ConvBNLayer, batch_std: float, word_length: int = 8,
                  momentum: float = FL_MOMENTUM) -> FixFormat:
    """Momentum-update the sigma buffer and rederive the activation format.

    Returns the layer's (possibly unchanged) input format.  Non-positive or
    non-finite batch statistics are skipped with a warning; frozen or
    grid-search-owned formats keep their FL while the buffer still tracks.
    """
    if not (batch_std > 0 and math.isfinite(batch_std)):
        warnings.warn(f"skipping act FL update for {layer.name}: batch std {batch_std}")
        return FixFormat(word_length, layer.in_fl, signed=layer.in_signed)
    if layer.act_sigma is None:
        layer.act_sigma = float(batch_std)
    else:
        layer.act_sigma = (1.0 - momentum) * layer.act_sigma + momentum * float(batch_std)
    if not (layer.act_fl_frozen or layer.in_fl_searchable):
        layer.in_fl = fl_from_std(layer.act_sigma, layer.in_signed, word_length)
    return FixFormat(word_length, layer.in_fl, signed=layer.in_signed)


def double_forward(graph: ModelGraph, layer_name: str, q_in, training: bool = True):
    """Per-layer double forward: stat-update pass, then the quantized pass.

    q_in is the layer's quantized input (a FixTensor or a torch tensor of its
    values).  Returns the real pre-activation eta_out * z_out.
    """
    if not training:
        raise ContractError("double_forward is a training-mode operation")
    if graph.frozen:
        raise ContractError("graph is frozen")
    layer = graph.layers[layer_name]
    if torch.is_tensor(q_in):
        q = q_in.to(torch.float64)
    else:
        q = torch.from_numpy(np.asarray(q_in.values, dtype=np.float64))
    eta_in = graph.eta_of(layer_name)
    eta_in = eta_in.item() if torch.is_tensor(eta_in) else eta_in
    eta_out = graph.eta_of(graph.master_child(layer_name))
    eta_out = eta_out.item() if torch.is_tensor(eta_out) else eta_out

    with torch.no_grad():
        if layer.has_bn:
            y1 = layer.apply_op(q * eta_in, layer.weight.detach())
            layer.update_bn_stats(y1)

    eff_w, eff_b = layer.effective_tensors(eta_in, eta_out)
    fl_w = layer.weight_fl if layer.weight_fl_frozen else weight_fl_for(
        eff_w.detach().numpy(), graph.word_length
    )
    layer.weight_fl = fl_w
    wfmt = FixFormat(graph.word_length, fl_w, signed=True)
    w_hat = _ste_fix_quant(eff_w, fl_w, wfmt.mantissa_min, wfmt.mantissa_max)
    fl_acc = layer.in_fl + fl_w
    bfmt = FixFormat(32, fl_acc, signed=True)
    b_hat = _ste_fix_quant(eff_b, fl_acc, bfmt.mantissa_min, bfmt.mantissa_max)
    z = layer.apply_op(q, w_hat)
    b_shape = (1, -1) + (1,) * (z.dim() - 2)
    return (z + b_hat.reshape(b_shape)) * eta_out


def private_fl_equiv(x, alpha: float, fl: int, fl_master: int, word_length: int = 8):
    """Both sides of the private-FL identity.

    Quantizing with the master's FL in the scale factor equals ordinary
    clipped quantization with alpha' = 2**(fl_master - fl) * alpha times a
    shift of 2**(fl - fl_master); the two sides are bit-identical.
    """
    x = np.asarray(x, dtype=np.float64)
    m = 2.0**word_length - 1.0
    lhs = (
        (2.0**fl * alpha / m)
        * (2.0**-fl)
        * round_half_away(np.clip(m / (2.0**fl_master * alpha) * x * 2.0**fl, 0.0, m))
    )
    alpha_p = 2.0 ** (fl_master - fl) * alpha
    rhs = (
        2.0 ** (fl - fl_master)
        * (2.0**fl * alpha_p / m)
        * (2.0**-fl)
        * round_half_away(np.clip(m / (2.0**fl * alpha_p) * x * 2.0**fl, 0.0, m))
    )
    return lhs, rhs


def grid_search_fl(graph: ModelGraph, calib_x: torch.Tensor, calib_y: torch.Tensor,
                   space) -> ModelGraph:
    """Choose per-layer weight and activation FLs from `space` by calibration loss.

    Coordinate descent, one layer at a time in topological order, one full
    sweep; within a layer the (activation FL, weight FL) pair is searched
    jointly.  Ties break toward larger FLs.
    """
    space = sorted(set(int(s) for s in space))
    if not space:
        raise ConfigError("grid search space is empty")
    if graph.frozen:
        raise ContractError("graph is frozen")
    calib_x = calib_x.to(torch.float64)

    def calib_loss() -> float:
        with torch.no_grad():
            logits = graph.forward_quantized(calib_x, training=False)
            return float(F.cross_entropy(logits, calib_y))

    for node in graph.nodes:
        if node.kind != "layer":
            continue
        layer = graph.layers[node.name]
        act_hi = graph.word_length - 1 if layer.in_signed else graph.word_length
        w_hi = graph.word_length - 1
        act_searchable = layer.in_kind == "pact" or layer.in_fl_searchable
        act_cands = [f for f in space if 0 <= f <= act_hi] if act_searchable else [layer.in_fl]
        w_cands = [f for f in space if 0 <= f <= w_hi]
        if not act_cands or not w_cands:
            raise ConfigError(f"space {space} has no legal FL for layer {node.name}")

        if layer.weight_fl is None:
            eta_in = graph.eta_of(node.name)
            eta_out = graph.eta_of(graph.master_child(node.name))
            eff_w, _ = layer.effective_tensors(
                eta_in.item() if torch.is_tensor(eta_in) else eta_in,
                eta_out.item() if torch.is_tensor(eta_out) else eta_out,
            )
            layer.weight_fl = weight_fl_for(eff_w.detach().numpy(), graph.word_length)
        layer.weight_fl_frozen = True

        best = (act_cands[-1], w_cands[-1], math.inf)
        for fa in sorted(act_cands, reverse=True):
            for fw in sorted(w_cands, reverse=True):
                layer.in_fl, layer.weight_fl = fa, fw
                loss = calib_loss()
                if math.isfinite(loss) and loss < best[2]:
                    best = (fa, fw, loss)
        layer.in_fl, layer.weight_fl = best[0], best[1]
        layer.act_fl_frozen = True
    return graph


# -- builders -----------------------------------------------------------------


def _init_weight(rng: np.random.Generator, shape: tuple[int, ...]) -> torch.Tensor:
    fan_in = int(np.prod(shape[1:]))
    w = rng.normal(0.0, math.sqrt(2.0 / fan_in), shape)
    return torch.from_numpy(w).to(torch.float64)


def _input_layer_kwargs(signed_input: bool, input_fl: int) -> dict:
    return dict(
        in_kind="fixed",
        in_signed=signed_input,
        in_fl=input_fl,
        in_fl_searchable=signed_input,
    )


def build_mlp(seed: int = 0, in_features: int = 256, hidden=(64, 32), classes: int = 10,
              signed_input: bool = False, input_fl: int = 8) -> ModelGraph:
    rng = np.random.default_rng(seed)
    nodes = [GraphNode("input", "input", ())]
    layers: dict[str, ConvBNLayer] = {}
    prev, prev_f = "input", in_features
    for i, h in enumerate(hidden):
        name = f"fc{i + 1}"
        kwargs = _input_layer_kwargs(signed_input, input_fl) if i == 0 else {}
        layers[name] = ConvBNLayer(name, "linear", (h, prev_f), has_bn=True, **kwargs)
        layers[name].weight.data = _init_weight(rng, (h, prev_f))
        nodes.append(GraphNode(name, "layer", (prev,)))
        prev, prev_f = name, h
    head_kwargs = _input_layer_kwargs(signed_input, input_fl) if not hidden else {}
    layers["head"] = ConvBNLayer("head", "linear", (classes, prev_f), has_bn=False,
                                 **head_kwargs)
    layers["head"].weight.data = _init_weight(rng, (classes, prev_f))
    nodes.append(GraphNode("head", "layer", (prev,)))
    return ModelGraph(nodes, layers, (in_features,))


def build_cnn(seed: int = 0, image_size: int = 16, classes: int = 10,
              signed_input: bool = False, input_fl: int = 8) -> ModelGraph:
    """Plain conv stack: stem s2, conv s2, conv s1, linear head."""
    rng = np.random.default_rng(seed)
    c1, c2 = 8, 16
    shapes = {
        "stem": (c1, 1, 3, 3),
        "conv2": (c2, c1, 3, 3),
        "conv3": (c2, c2, 3, 3),
    }
    strides = {"stem": 2, "conv2": 2, "conv3": 1}
    nodes = [GraphNode("input", "input", ())]
    layers: dict[str, ConvBNLayer] = {}
    prev = "input"
    for i, (name, shape) in enumerate(shapes.items()):
        kwargs = _input_layer_kwargs(signed_input, input_fl) if i == 0 else {}
        layers[name] = ConvBNLayer(name, "conv2d", shape, stride=strides[name],
                                   padding=1, has_bn=True, **kwargs)
        layers[name].weight.data = _init_weight(rng, shape)
        nodes.append(GraphNode(name, "layer", (prev,)))
        prev = name
    feat = c2 * (image_size // 4) ** 2
    layers["head"] = ConvBNLayer("head", "linear", (classes, feat), has_bn=False)
    layers["head"].weight.data = _init_weight(rng, (classes, feat))
    nodes.append(GraphNode("head", "layer", (prev,)))
    return ModelGraph(nodes, layers, (1, image_size, image_size))


def build_toy_resnet(seed: int = 0, image_size: int = 16, classes: int = 10,
                     signed_input: bool = False, input_fl: int = 8) -> ModelGraph:
    """Residual CNN with an identity-shortcut block and a downsampling block."""
    rng = np.random.default_rng(seed)
    c1, c2 = 8, 16
    defs = [
        ("stem", (c1, 1, 3, 3), 2, 1, ("input",)),
        ("a1", (c1, c1, 3, 3), 1, 1, ("stem",)),
        ("a2", (c1, c1, 3, 3), 1, 1, ("a1",)),
        ("adda", None, None, None, ("stem", "a2")),
        ("b1", (c2, c1, 3, 3), 2, 1, ("adda",)),
        ("b2", (c2, c2, 3, 3), 1, 1, ("b1",)),
        ("down", (c2, c1, 1, 1), 2, 0, ("adda",)),
        ("addb", None, None, None, ("b2", "down")),
    ]
    nodes = [GraphNode("input", "input", ())]
    layers: dict[str, ConvBNLayer] = {}
    for name, shape, stride, pad, inputs in defs:
        if shape is None:
            nodes.append(GraphNode(name, "add", inputs))
            continue
        kwargs = _input_layer_kwargs(signed_input, input_fl) if name == "stem" else {}
        layers[name] = ConvBNLayer(name, "conv2d", shape, stride=stride,
                                   padding=pad, has_bn=True, **kwargs)
        layers[name].weight.data = _init_weight(rng, shape)
        nodes.append(GraphNode(name, "layer", inputs))
    feat = c2 * (image_size // 4) ** 2
    layers["head"] = ConvBNLayer("head", "linear", (classes, feat), has_bn=False)
    layers["head"].weight.data = _init_weight(rng, (classes, feat))
    nodes.append(GraphNode("head", "layer", ("addb",)))
    return ModelGraph(nodes, layers, (1, image_size, image_size))


BUILDERS = {"mlp": build_mlp, "cnn": build_cnn, "resnet": build_toy_resnet}


# -- serialization -------------------------------------------------------------


def save_model(path: str, graph: ModelGraph):
    meta = {
        "version": 1,
        "kind": "model",
        "word_length": graph.word_length,
        "frozen": graph.frozen,
        "input_shape": list(graph.input_shape),
        "nodes": [
            {"name": n.name, "kind": n.kind, "inputs": list(n.inputs)} for n in graph.nodes
        ],
        "layers": {
            name: {
                "op": l.op,
                "weight_shape": list(l.weight.shape),
                "stride": l.stride,
                "padding": l.padding,
                "has_bn": l.has_bn,
                "in_kind": l.in_kind,
                "in_signed": l.in_signed,
                "in_fl": l.in_fl,
                "in_fl_searchable": l.in_fl_searchable,
                "master": l.master_ref,
                "weight_fl": l.weight_fl,
                "weight_fl_frozen": l.weight_fl_frozen,
                "act_fl_frozen": l.act_fl_frozen,
            }
            for name, l in graph.layers.items()
        },
    }
    sections: dict[str, np.ndarray | bytes] = {"meta": encode_meta(meta)}
    for name, l in graph.layers.items():
        sections[f"{name}.weight"] = l.weight.detach().numpy()
        sections[f"{name}.alpha"] = l.alpha.detach().numpy()
        sections[f"{name}.act_sigma"] = np.float64(
            l.act_sigma if l.act_sigma is not None else np.nan
        )
        if l.has_bn:
            sections[f"{name}.gamma"] = l.gamma.detach().numpy()
            sections[f"{name}.beta"] = l.beta.detach().numpy()
            sections[f"{name}.running_mean"] = l.running_mean.numpy()
            sections[f"{name}.running_var"] = l.running_var.numpy()
    atomic_write_bytes(path, pack_sections(MODEL_MAGIC, sections))


def load_model(path: str) -> ModelGraph:
    with open(path, "rb") as f:
        sections = unpack_sections(f.read(), MODEL_MAGIC)
    meta = decode_meta(sections["meta"])
    layers: dict[str, ConvBNLayer] = {}
    for name, lm in meta["layers"].items():
        layer = ConvBNLayer(
            name,
            lm["op"],
            tuple(lm["weight_shape"]),
            stride=lm["stride"],
            padding=lm["padding"],
            has_bn=lm["has_bn"],
            in_kind=lm["in_kind"],
            in_signed=lm["in_signed"],
            in_fl=lm["in_fl"],
            in_fl_searchable=lm["in_fl_searchable"],
        )
        layer.weight.data = torch.from_numpy(sections[f"{name}.weight"].copy())
        layer.alpha.data = torch.from_numpy(np.asarray(sections[f"{name}.alpha"]).copy())
        sigma = float(sections[f"{name}.act_sigma"])
        layer.act_sigma = None if math.isnan(sigma) else sigma
        layer.weight_fl = lm["weight_fl"]
        layer.weight_fl_frozen = lm["weight_fl_frozen"]
        layer.act_fl_frozen = lm["act_fl_frozen"]
        if lm["has_bn"]:
            layer.gamma.data = torch.from_numpy(sections[f"{name}.gamma"].copy())
            layer.beta.data = torch.from_numpy(sections[f"{name}.beta"].copy())
            layer.running_mean.copy_(torch.from_numpy(sections[f"{name}.running_mean"].copy()))
            layer.running_var.copy_(torch.from_numpy(sections[f"{name}.running_var"].copy()))
        layers[name] = layer
    nodes = [GraphNode(n["name"], n["kind"], tuple(n["inputs"])) for n in meta["nodes"]]
    graph = ModelGraph(nodes, layers, tuple(meta["input_shape"]), meta["word_length"])
    for name, lm in meta["layers"].items():
        graph.layers[name].master_ref = lm["master"]
    graph.frozen = meta["frozen"]
    return graph
