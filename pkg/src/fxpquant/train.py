"""Desk-scale quantization-aware training on a bundled synthetic task.

The dataset is procedurally generated: ten blocky grayscale prototypes with
additive Gaussian noise and random contrast, clipped into [0, 1] so images
quantize directly to unsigned (8, 8) without standardization.  Everything is
seed-deterministic, including batch order.

Two training modes:

* from-scratch QAT: the full quantized step on a freshly initialized model
  (double forward, straight-through gradients, trainable clipping levels,
  momentum format buffers);
* tiny fine-tune: grid-searched fractional lengths on a pre-trained
  full-precision model followed by a short constant-learning-rate adaptation
  with batch-norm statistics still updating.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn.functional as F

from .errors import ConfigError, TrainingDiverged
from .graph import BUILDERS, ModelGraph, grid_search_fl

IMAGE_SIZE = 16
NUM_CLASSES = 10


@dataclass
class SyntheticTask:
    train_x: np.ndarray
    train_y: np.ndarray
    test_x: np.ndarray
    test_y: np.ndarray


def make_synthetic_task(seed: int = 0, n_train: int = 2048, n_test: int = 512,
                        noise: float = 0.25) -> SyntheticTask:
    """Ten-class blocky-pattern images in [0, 1], fully determined by the seed."""
    rng = np.random.default_rng(np.random.SeedSequence([0x5EED, seed]))
    protos = rng.uniform(0.1, 0.9, (NUM_CLASSES, 4, 4))
    protos = np.kron(protos, np.ones((4, 4)))  # 16x16 blocky patterns

    def draw(n, rstream):
        y = rstream.integers(0, NUM_CLASSES, n)
        contrast = rstream.uniform(0.8, 1.2, (n, 1, 1))
        x = protos[y] * contrast + rstream.normal(0.0, noise, (n, IMAGE_SIZE, IMAGE_SIZE))
        return np.clip(x, 0.0, 1.0)[:, None, :, :], y

    train_x, train_y = draw(n_train, rng)
    test_x, test_y = draw(n_test, rng)
    return SyntheticTask(train_x, train_y, test_x, test_y)


@dataclass
class TrainConfig:
    mode: str = "qat"  # 'qat' | 'finetune'
    arch: str = "resnet"
    steps: int = 300
    batch_size: int = 64
    lr: float = 0.05
    momentum: float = 0.9
    weight_decay: float = 4e-5
    decay_bn: bool = True
    decay_depthwise: bool = True
    fl_momentum: float = 0.1
    seed: int = 0
    n_train: int = 2048
    n_test: int = 512
    signed_input: bool = False  # normalized images, signed input quantizer
    fl_space: tuple[int, ...] = field(default_factory=lambda: tuple(range(9)))
    finetune_lr: float = 1e-4
    finetune_steps: int = 500

    def __post_init__(self):
        if self.mode not in ("qat", "finetune"):
            raise ConfigError(f"unknown mode {self.mode!r}")
        if self.arch not in BUILDERS:
            raise ConfigError(f"unknown arch {self.arch!r}; choose from {sorted(BUILDERS)}")
        if self.steps < 0 or self.finetune_steps < 0 or self.batch_size <= 0:
            raise ConfigError("step counts must be >= 0 and batch_size positive")
        if self.lr <= 0 or self.finetune_lr <= 0:
            raise ConfigError("learning rates must be positive")
        if not 0 < self.fl_momentum <= 1:
            raise ConfigError("fl_momentum must lie in (0, 1]")


def _is_depthwise(layer) -> bool:
    return layer.op == "conv2d" and layer.weight.shape[1] == 1 and layer.weight.shape[0] > 1


def make_optimizer(graph: ModelGraph, cfg: TrainConfig, lr: float) -> torch.optim.SGD:
    """Nesterov momentum SGD with per-group weight-decay policy.

    Clipping levels never decay; BN scale/shift and depthwise conv weights
    decay only when the corresponding flag is on.
    """
    decayed, plain = [], []
    for layer in graph.layers.values():
        w_decays = cfg.decay_depthwise or not _is_depthwise(layer)
        (decayed if w_decays else plain).append(layer.weight)
        if layer.has_bn:
            target = decayed if cfg.decay_bn else plain
            target.extend([layer.gamma, layer.beta])
        plain.append(layer.alpha)
    groups = [
        {"params": decayed, "weight_decay": cfg.weight_decay},
        {"params": plain, "weight_decay": 0.0},
    ]
    return torch.optim.SGD(groups, lr=lr, momentum=cfg.momentum, nesterov=True)


def _batches(n: int, batch_size: int, steps: int, seed: int):
    rng = np.random.default_rng(np.random.SeedSequence([0xBA7C, seed]))
    for _ in range(steps):
        yield rng.integers(0, n, batch_size)


def qat_step(graph: ModelGraph, x: torch.Tensor, y: torch.Tensor,
             optimizer: torch.optim.SGD):
    """One full quantized training step; returns (loss, act-FL change count)."""
    optimizer.zero_grad(set_to_none=True)
    logits = graph.forward_quantized(x, training=True)
    loss = F.cross_entropy(logits, y)
    if not torch.isfinite(loss):
        raise TrainingDiverged(f"non-finite loss {loss.item()!r}")
    loss.backward()
    optimizer.step()
    fl_changes = graph.apply_pending_fl_updates()
    return loss.item(), fl_changes


def float_step(graph: ModelGraph, x: torch.Tensor, y: torch.Tensor,
               optimizer: torch.optim.SGD) -> float:
    optimizer.zero_grad(set_to_none=True)
    logits = graph.forward_float(x, training=True)
    loss = F.cross_entropy(logits, y)
    if not torch.isfinite(loss):
        raise TrainingDiverged(f"non-finite loss {loss.item()!r}")
    loss.backward()
    optimizer.step()
    return loss.item()


# normalization used when the model expects signed input: std lands near 1
NORM_SHIFT = 0.5
NORM_SCALE = 4.0


def stem_is_signed(graph: ModelGraph) -> bool:
    first = graph.direct_layer_consumers("input")[0]
    return graph.layers[first].in_signed


def prepare_inputs(graph: ModelGraph, x: np.ndarray) -> torch.Tensor:
    """Raw [0,1] images to model inputs: normalize for signed stems, flatten for MLPs."""
    xb = torch.from_numpy(np.ascontiguousarray(x)).to(torch.float64)
    if stem_is_signed(graph):
        xb = (xb - NORM_SHIFT) * NORM_SCALE
    if graph.input_shape == (IMAGE_SIZE * IMAGE_SIZE,):
        xb = xb.reshape(xb.shape[0], -1)
    return xb


def evaluate(graph: ModelGraph, x: np.ndarray, y: np.ndarray, quantized: bool,
             batch_size: int = 256) -> float:
    """Classification accuracy under the quantized or the float forward."""
    hits = 0
    with torch.no_grad():
        for i in range(0, len(x), batch_size):
            xb = prepare_inputs(graph, x[i : i + batch_size])
            if quantized:
                logits = graph.forward_quantized(xb, training=False)
            else:
                logits = graph.forward_float(xb, training=False)
            hits += int((logits.argmax(dim=1).numpy() == y[i : i + batch_size]).sum())
    return hits / len(x)


def _prep_batch(graph: ModelGraph, task: SyntheticTask, idx: np.ndarray):
    return prepare_inputs(graph, task.train_x[idx]), torch.from_numpy(task.train_y[idx])


def build_model(cfg: TrainConfig) -> ModelGraph:
    kwargs = {}
    if cfg.signed_input:
        kwargs = {"signed_input": True, "input_fl": 5}
    return BUILDERS[cfg.arch](seed=cfg.seed, **kwargs)


def train_qat(cfg: TrainConfig, log_rows: list | None = None) -> ModelGraph:
    """From-scratch quantization-aware training on the synthetic task."""
    torch.set_num_threads(1)
    task = make_synthetic_task(cfg.seed, cfg.n_train, cfg.n_test)
    graph = build_model(cfg)
    graph.fl_momentum = cfg.fl_momentum
    calib_idx = np.arange(min(256, cfg.n_train))
    xb, _ = _prep_batch(graph, task, calib_idx)
    graph.calibrate(xb)
    optimizer = make_optimizer(graph, cfg, cfg.lr)

    for step, idx in enumerate(_batches(cfg.n_train, cfg.batch_size, cfg.steps, cfg.seed)):
        xb, yb = _prep_batch(graph, task, idx)
        loss, fl_changes = qat_step(graph, xb, yb, optimizer)
        if log_rows is not None:
            with torch.no_grad():
                acc = float((graph.forward_quantized(xb).argmax(1) == yb).double().mean())
            alphas = [graph.effective_alpha(l).item() for l in graph.layers.values()
                      if l.in_kind == "pact"]
            log_rows.append((step, loss, acc, sum(alphas) / len(alphas), fl_changes))
    graph.freeze()
    return graph


def train_float(cfg: TrainConfig) -> ModelGraph:
    """The identically configured full-precision baseline."""
    torch.set_num_threads(1)
    task = make_synthetic_task(cfg.seed, cfg.n_train, cfg.n_test)
    graph = build_model(cfg)
    optimizer = make_optimizer(graph, cfg, cfg.lr)
    for idx in _batches(cfg.n_train, cfg.batch_size, cfg.steps, cfg.seed):
        xb, yb = _prep_batch(graph, task, idx)
        float_step(graph, xb, yb, optimizer)
    return graph


def tiny_finetune(graph: ModelGraph, cfg: TrainConfig,
                  log_rows: list | None = None) -> ModelGraph:
    """Quantize a pre-trained float model: grid-search FLs, then a short
    constant-lr adaptation with BN statistics updating throughout."""
    torch.set_num_threads(1)
    if graph.frozen:
        raise ConfigError("finetune needs an unfrozen pre-trained model")
    if all(l.weight.detach().abs().max().item() == 0.0 for l in graph.layers.values()):
        raise ConfigError("finetune needs pre-trained weights, got all-zero")
    task = make_synthetic_task(cfg.seed, cfg.n_train, cfg.n_test)
    graph.fl_momentum = cfg.fl_momentum
    calib_idx = np.arange(min(256, cfg.n_train))
    xb, yb = _prep_batch(graph, task, calib_idx)
    graph.calibrate(xb, pretrained=True)
    grid_search_fl(graph, xb, yb, cfg.fl_space)

    optimizer = make_optimizer(graph, cfg, cfg.finetune_lr)
    for step, idx in enumerate(
        _batches(cfg.n_train, cfg.batch_size, cfg.finetune_steps, cfg.seed)
    ):
        xb, yb = _prep_batch(graph, task, idx)
        loss, _ = qat_step(graph, xb, yb, optimizer)
        if log_rows is not None and step % 50 == 0:
            log_rows.append((step, loss, math.nan, math.nan, 0))
    graph.freeze()
    return graph


def training_log_csv(rows) -> str:
    lines = ["step,loss,acc,alpha_mean,fl_changes"]
    for step, loss, acc, alpha_mean, fl_changes in rows:
        lines.append(f"{step},{loss!r},{acc!r},{alpha_mean!r},{fl_changes}")
    return "\n".join(lines) + "\n"
