"""Integer-only compilation and execution of frozen model graphs.

A compiled program stores int8 weight mantissas, int32 bias mantissas at the
accumulator scale, and per-wire shift amounts; no real-valued constant
survives compilation.  Execution multiplies only 8-bit operands, accumulates
in 32 bits (checked, never wrapped) and rescales exclusively by shifts with
round-half-away-from-zero, so its mantissas agree exactly with the graph
module's quantized simulation.

Every run is instrumented: the trace counts multiplies by operand width,
shift operations, and the worst-case accumulator magnitude (an order-free
bound, sum of absolute products, so any summation schedule is covered).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .container import (
    PROGRAM_MAGIC,
    atomic_write_bytes,
    decode_meta,
    encode_meta,
    pack_sections,
    unpack_sections,
)
from .errors import AccumulatorOverflowError, ContractError, InputError
from .formats import INT32_MAX, FixFormat, FixTensor, shift_round_half_away, to_mantissa
from .graph import ModelGraph

INT8_LIMIT = 127
UINT8_LIMIT = 255


@dataclass
class ExecTrace:
    """Counters proving the 8-bit multiplication contract for one run."""

    mults_8x8: int = 0
    wide_multiplies: int = 0
    shifts: int = 0
    acc_max_abs: int = 0
    acc_bound_max: int = 0
    wire_mantissas: dict = field(default_factory=dict)
    node_accumulators: dict = field(default_factory=dict)

    def note_acc(self, actual: int, bound: int):
        self.acc_max_abs = max(self.acc_max_abs, int(actual))
        self.acc_bound_max = max(self.acc_bound_max, int(bound))

    def summary(self) -> str:
        return (
            f"mults_8x8={self.mults_8x8} wide_multiplies={self.wide_multiplies} "
            f"shifts={self.shifts} acc_max_abs={self.acc_max_abs} "
            f"acc_bound_max={self.acc_bound_max}"
        )


@dataclass
class QuantProgram:
    """Closed integer program: meta (ints only), int8 weights, int32 biases."""

    meta: dict
    weights: dict[str, np.ndarray]
    biases: dict[str, np.ndarray]
    warnings: list[str] = field(default_factory=list)

    @property
    def input_format(self) -> FixFormat:
        inp = self.meta["input"]
        return FixFormat(inp["wl"], inp["fl"], signed=bool(inp["signed"]))

    @property
    def output_format(self) -> FixFormat:
        out = self.meta["output"]
        return FixFormat(32, out["fl_acc"], signed=True)


def compile(graph: ModelGraph) -> QuantProgram:
    """Integerize a frozen graph: fuse, quantize, and plan all shifts."""
    if not graph.frozen:
        raise ContractError("compile requires a frozen graph")
    wl = graph.word_length
    nodes_meta = []
    weights: dict[str, np.ndarray] = {}
    biases: dict[str, np.ndarray] = {}
    warnings_out: list[str] = []

    fl_acc_of: dict[str, int] = {}
    unit_fl_of: dict[str, int] = {}

    for node in graph.nodes:
        if node.kind == "input":
            stem = graph.layers[graph.direct_layer_consumers(node.name)[0]]
            fl_acc_of[node.name] = stem.in_fl
            unit_fl_of[node.name] = graph.wire_unit_fl(node.name)
            nodes_meta.append(
                {
                    "name": node.name,
                    "kind": "input",
                    "signed": stem.in_signed,
                    "wl": wl,
                    "fl": stem.in_fl,
                    "shape": list(graph.input_shape),
                }
            )
            continue

        if node.kind == "add":
            unit_out = graph.wire_unit_fl(node.name)
            aligned = [
                fl_acc_of[src] - unit_fl_of[src] + unit_out for src in node.inputs
            ]
            fl_t = max(aligned)
            fl_acc_of[node.name] = fl_t
            unit_fl_of[node.name] = unit_out
            nodes_meta.append(
                {
                    "name": node.name,
                    "kind": "add",
                    "inputs": list(node.inputs),
                    "lshifts": [fl_t - a for a in aligned],
                    "fl_acc": fl_t,
                }
            )
            continue

        layer = graph.layers[node.name]
        src = node.inputs[0]
        label = graph.layers[graph.direct_layer_consumers(src)[0]]
        in_fmt = FixFormat(wl, label.in_fl, signed=label.in_signed)

        eta_out = graph.eta_of(graph.master_child(node.name))
        eta_out = eta_out.item() if hasattr(eta_out, "item") else eta_out
        eta_in = graph.eta_of(node.name)
        eta_in = eta_in.item() if hasattr(eta_in, "item") else eta_in
        eff_w_t, eff_b_t = layer.effective_tensors(eta_in, eta_out)
        eff_w = eff_w_t.detach().numpy()
        eff_b = eff_b_t.detach().numpy()

        fl_w = layer.weight_fl
        if fl_w is None:
            raise ContractError(f"layer {node.name} has no frozen weight FL")
        wfmt = FixFormat(wl, fl_w, signed=True)
        w_mant = to_mantissa(eff_w, wfmt).astype(np.int8)
        fl_acc = layer.in_fl + fl_w
        b_mant = to_mantissa(eff_b, FixFormat(32, fl_acc, signed=True)).astype(np.int32)

        weights[node.name] = w_mant
        biases[node.name] = b_mant
        fl_acc_of[node.name] = fl_acc
        unit_fl_of[node.name] = graph.wire_unit_fl(node.name)

        in_max = abs(in_fmt.mantissa_min) if in_fmt.signed else in_fmt.mantissa_max
        k_abs = np.abs(w_mant.astype(np.int64)).reshape(w_mant.shape[0], -1).sum(axis=1)
        worst = (k_abs * in_max + np.abs(b_mant.astype(np.int64))).max()
        if worst > INT32_MAX:
            warnings_out.append(
                f"{node.name}: worst-case accumulator bound {worst} exceeds int32"
            )

        nodes_meta.append(
            {
                "name": node.name,
                "kind": "layer",
                "op": layer.op,
                "input": src,
                "stride": layer.stride,
                "padding": layer.padding,
                "in_fl": layer.in_fl,
                "fl_w": fl_w,
                "fl_acc": fl_acc,
                "in_shift": fl_acc_of[src] - label.in_fl,
                "in_lo": in_fmt.mantissa_min,
                "in_hi": in_fmt.mantissa_max,
            }
        )

    out_node = graph.nodes[-1].name
    meta = {
        "version": 1,
        "kind": "program",
        "word_length": wl,
        "input": nodes_meta[0],
        "nodes": nodes_meta,
        "output": {"wire": out_node, "fl_acc": fl_acc_of[out_node]},
    }
    for node in nodes_meta:
        shifts = [node["in_shift"]] if node["kind"] == "layer" else node.get("lshifts", [])
        if any(not -31 <= s <= 31 for s in shifts):
            raise ContractError(f"shift out of [-31, 31] at {node['name']}: {shifts}")
    return QuantProgram(meta, weights, biases, warnings_out)


def _im2col(x: np.ndarray, kh: int, kw: int, stride: int, padding: int):
    n, c, h, w = x.shape
    if padding:
        x = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    windows = np.lib.stride_tricks.sliding_window_view(x, (kh, kw), axis=(2, 3))
    windows = windows[:, :, ::stride, ::stride]
    n, c, ho, wo = windows.shape[:4]
    cols = windows.transpose(0, 2, 3, 1, 4, 5).reshape(n * ho * wo, c * kh * kw)
    return cols, ho, wo


def _quantize_wire_int(s: np.ndarray, shift: int, lo: int, hi: int, trace: ExecTrace):
    mant = shift_round_half_away(s, shift)
    if shift != 0:
        trace.shifts += mant.size
    return np.clip(mant, lo, hi)


def infer(program: QuantProgram, x: FixTensor, dump: bool = False):
    """Run the integer program; returns (int32 logits FixTensor, trace)."""
    expected = program.input_format
    if x.fmt != expected:
        raise InputError(
            f"input format {x.fmt.describe()} does not match program "
            f"{expected.describe()}"
        )
    shape = tuple(program.meta["input"]["shape"])
    if tuple(x.shape[1:]) != shape:
        raise InputError(f"input shape {x.shape[1:]} does not match program {shape}")

    trace = ExecTrace()
    wires: dict[str, tuple[np.ndarray, int]] = {}
    mants: dict[str, np.ndarray] = {}

    for node in program.meta["nodes"]:
        name = node["name"]
        if node["kind"] == "input":
            wires[name] = (x.mantissa.astype(np.int64), node["fl"])
            continue

        if node["kind"] == "add":
            total = None
            for src, sh in zip(node["inputs"], node["lshifts"]):
                s, _ = wires[src]
                piece = s << np.int64(sh)
                if sh:
                    trace.shifts += piece.size
                total = piece if total is None else total + piece
            peak = int(np.abs(total).max()) if total.size else 0
            if peak > INT32_MAX:
                raise AccumulatorOverflowError(f"add {name} exceeds int32: {peak}")
            trace.note_acc(peak, peak)
            wires[name] = (total, node["fl_acc"])
            if dump:
                trace.node_accumulators[name] = total.copy()
            continue

        src = node["input"]
        if src not in mants:
            s, _ = wires[src]
            mants[src] = _quantize_wire_int(
                s, node["in_shift"], node["in_lo"], node["in_hi"], trace
            )
            if dump:
                trace.wire_mantissas[src] = mants[src].copy()
        q = mants[src]

        w = program.weights[name].astype(np.int64)
        b = program.biases[name].astype(np.int64)
        q_peak = int(np.abs(q).max()) if q.size else 0
        w_peak = int(np.abs(w).max()) if w.size else 0
        n_mults_per_out = int(np.prod(w.shape[1:]))

        if node["op"] == "conv2d":
            kh, kw = w.shape[2], w.shape[3]
            cols, ho, wo = _im2col(q, kh, kw, node["stride"], node["padding"])
            wmat = w.reshape(w.shape[0], -1)
            acc = cols @ wmat.T + b[None, :]
            bound = np.abs(cols) @ np.abs(wmat).T + np.abs(b)[None, :]
            out = acc.reshape(q.shape[0], ho, wo, w.shape[0]).transpose(0, 3, 1, 2)
        else:
            flat = q.reshape(q.shape[0], -1)
            acc = flat @ w.T + b[None, :]
            bound = np.abs(flat) @ np.abs(w).T + np.abs(b)[None, :]
            out = acc

        n_products = n_mults_per_out * (out.size // w.shape[0]) * w.shape[0]
        limit_in = UINT8_LIMIT if node["in_lo"] == 0 else INT8_LIMIT
        if q_peak > limit_in or w_peak > INT8_LIMIT:
            trace.wide_multiplies += n_products
        else:
            trace.mults_8x8 += n_products

        worst = int(bound.max()) if bound.size else 0
        if worst > INT32_MAX:
            raise AccumulatorOverflowError(f"layer {name} accumulator bound {worst}")
        trace.note_acc(int(np.abs(out).max()) if out.size else 0, worst)
        wires[name] = (out, node["fl_acc"])
        if dump:
            trace.node_accumulators[name] = out.copy()

    out_wire = program.meta["output"]["wire"]
    s, fl_acc = wires[out_wire]
    logits = FixTensor(s, FixFormat(32, fl_acc, signed=True))
    return logits, trace


def equivalence_report(graph: ModelGraph, program: QuantProgram, inputs: FixTensor):
    """Per-node max mantissa discrepancy between graph simulation and engine."""
    import torch

    _, trace = infer(program, inputs, dump=True)
    capture: dict = {}
    with torch.no_grad():
        graph.forward_quantized(
            torch.from_numpy(inputs.values), training=False, capture=capture
        )

    fl_acc_of = {n["name"]: n.get("fl_acc") for n in program.meta["nodes"]}
    report = {"wires": {}, "nodes": {}}
    for wire, mant in trace.wire_mantissas.items():
        sim = capture["mant"][wire].numpy()
        report["wires"][wire] = int(np.abs(sim - mant).max())
    for name, acc in trace.node_accumulators.items():
        sim_z = capture["acc"][name].numpy()
        sim_mant = np.rint(sim_z * 2.0 ** fl_acc_of[name]).astype(np.int64)
        report["nodes"][name] = int(np.abs(sim_mant - acc).max())
    values = list(report["wires"].values()) + list(report["nodes"].values())
    report["max"] = max(values) if values else 0
    return report


def save_program(path: str, program: QuantProgram):
    sections: dict[str, np.ndarray | bytes] = {"meta": encode_meta(program.meta)}
    for name, w in program.weights.items():
        sections[f"{name}.w"] = w
    for name, b in program.biases.items():
        sections[f"{name}.b"] = b
    atomic_write_bytes(path, pack_sections(PROGRAM_MAGIC, sections))


def load_program(path: str) -> QuantProgram:
    with open(path, "rb") as f:
        sections = unpack_sections(f.read(), PROGRAM_MAGIC)
    meta = decode_meta(sections["meta"])
    weights, biases = {}, {}
    for name, payload in sections.items():
        if name.endswith(".w"):
            weights[name[:-2]] = payload
        elif name.endswith(".b"):
            biases[name[:-2]] = payload
    return QuantProgram(meta, weights, biases)
