"""Verification suites: fusion equivalence, the private-FL identity, and the
integer-only multiplication contract.  Used by the verify command and by the
acceptance tests."""

from __future__ import annotations

import numpy as np
import torch

from . import engine
from .formats import FixTensor
from .graph import ConvBNLayer, GraphNode, ModelGraph, private_fl_equiv


def build_random_chain(seed: int, depth: int = 3, spatial: int = 8,
                       max_channels: int = 16) -> ModelGraph:
    """Random Conv-BN-ReLU chain with randomized weights, BN stats and formats."""
    rng = np.random.default_rng(np.random.SeedSequence([0xC4A1, seed]))
    channels = [1] + [int(rng.integers(1, max_channels + 1)) for _ in range(depth)]
    nodes = [GraphNode("input", "input", ())]
    layers: dict[str, ConvBNLayer] = {}
    prev = "input"
    for i in range(depth):
        name = f"c{i}"
        k = int(rng.choice([1, 3]))
        kwargs = {"in_kind": "fixed", "in_fl": 8} if i == 0 else {}
        layer = ConvBNLayer(name, "conv2d", (channels[i + 1], channels[i], k, k),
                            stride=1, padding=k // 2, has_bn=True, **kwargs)
        w_scale = float(2.0 ** rng.uniform(-3, 1))
        layer.weight.data = torch.from_numpy(
            rng.normal(0, w_scale, tuple(layer.weight.shape))
        ).to(torch.float64)
        with torch.no_grad():
            sign = np.where(rng.uniform(size=channels[i + 1]) < 0.2, -1.0, 1.0)
            layer.gamma.data = torch.from_numpy(rng.uniform(0.5, 2.0, channels[i + 1]) * sign)
            layer.beta.data = torch.from_numpy(rng.normal(0, 0.5, channels[i + 1]))
            layer.running_mean.copy_(torch.from_numpy(rng.normal(0, 0.5, channels[i + 1])))
            layer.running_var.copy_(
                torch.from_numpy(2.0 ** rng.uniform(-6, 2, channels[i + 1]))
            )
            layer.alpha.fill_(float(2.0 ** rng.uniform(-2, 3)))
        if i > 0:
            layer.in_fl = int(rng.integers(2, 9))
            layer.act_sigma = 1.0
        layers[name] = layer
        nodes.append(GraphNode(name, "layer", (prev,)))
        prev = name
    head = ConvBNLayer("head", "linear", (4, channels[-1] * spatial * spatial),
                       has_bn=False)
    head.weight.data = torch.from_numpy(
        rng.normal(0, 0.2, tuple(head.weight.shape))
    ).to(torch.float64)
    head.in_fl = int(rng.integers(2, 9))
    head.act_sigma = 1.0
    with torch.no_grad():
        head.alpha.fill_(float(2.0 ** rng.uniform(-2, 3)))
    layers["head"] = head
    nodes.append(GraphNode("head", "layer", (prev,)))
    graph = ModelGraph(nodes, layers, (1, spatial, spatial))
    graph.freeze()
    return graph


def fusion_equivalence_once(seed: int, batch: int = 4) -> int:
    """Max mantissa discrepancy, fused integer program vs graph simulation."""
    graph = build_random_chain(seed)
    program = engine.compile(graph)
    rng = np.random.default_rng(np.random.SeedSequence([0xFACE, seed]))
    x = rng.uniform(0.0, 1.0, (batch,) + graph.input_shape)
    xt = FixTensor.from_real(x, program.input_format)
    report = engine.equivalence_report(graph, program, xt)
    return report["max"]


def run_fusion_suite(n_chains: int = 20, seed: int = 0) -> tuple[bool, str]:
    worst = max(fusion_equivalence_once(seed + i) for i in range(n_chains))
    return worst == 0, f"{n_chains} random chains, max mantissa discrepancy {worst}"


def run_a6_suite(n_points: int = 10_000) -> tuple[bool, str]:
    """Exhaustive private-FL identity check over FL pairs {0..8}^2."""
    mismatches = 0
    for alpha in (0.7333, 1.0, 2.31):
        x = np.linspace(-1.0, 4.0 * alpha, n_points)
        for fl in range(9):
            for fl_m in range(9):
                lhs, rhs = private_fl_equiv(x, alpha, fl, fl_m)
                mismatches += int(np.count_nonzero(lhs != rhs))
    return mismatches == 0, f"81 FL pairs x 3 alphas x {n_points} points, {mismatches} mismatches"


def quantize_fresh_toy(seed: int = 0):
    """Calibrate and freeze an untrained toy model; returns (graph, program)."""
    from .train import TrainConfig, build_model, make_synthetic_task, prepare_inputs

    cfg = TrainConfig(seed=seed)
    graph = build_model(cfg)
    task = make_synthetic_task(seed, 512, 256)
    graph.calibrate(prepare_inputs(graph, task.train_x[:256]))
    graph.freeze()
    return graph, engine.compile(graph)


def run_integer_contract_suite(graph=None, program=None, n_inputs: int = 200,
                               seed: int = 0) -> tuple[bool, str]:
    """Zero multiplies wider than 8x8 and zero overflows on a toy model run."""
    from .train import make_synthetic_task

    if graph is None or program is None:
        graph, program = quantize_fresh_toy(seed)
    task = make_synthetic_task(seed, 64, max(n_inputs, 64))
    x = task.test_x[:n_inputs]
    xt = FixTensor.from_real(
        x if not program.input_format.signed else (x - 0.5) * 4.0,
        program.input_format,
    )
    _, trace = engine.infer(program, xt)
    report = engine.equivalence_report(graph, program, xt)
    ok = trace.wide_multiplies == 0 and report["max"] == 0
    return ok, (
        f"{n_inputs} inputs: {trace.summary()}, sim/int max discrepancy {report['max']}"
    )
