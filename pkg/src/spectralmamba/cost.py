"""Analytic parameter and multiply-accumulate (MAC) counts.

Convention: only multiply-accumulate work is counted. Normalization,
activations, elementwise gates and residual additions are free. MACs are
reported for one forward pass over a batch (64 by default).
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field
from typing import Iterable, NamedTuple

import numpy as np

from .model import ModelConfig, ModelWeights

MAC_CONVENTION = ("multiply-accumulate only; LayerNorm, activations, gates and residual adds "
                  "count 0; one forward pass per batch")
DEFAULT_BATCH = 64


class Layer(NamedTuple):
    name: str
    macs: int      # per sample
    params: int


def linear_layer(name: str, d_in: int, d_out: int, rows: int = 1, bias: bool = True) -> Layer:
    return Layer(name, rows * d_in * d_out, d_in * d_out + (d_out if bias else 0))


def layer_costs(cfg: ModelConfig) -> list[Layer]:
    L, P, k = cfg.bands, cfg.patch, cfg.dw_kernel
    R, C, K, N = cfg.pieces, cfg.piece_len, cfg.classes, cfg.state_size
    D = cfg.d_inner
    layers: list[Layer] = []
    if cfg.uses_gssm:
        layers += [
            Layer("gssm.depthwise", L * P * P * k * k, L * k * k + L),
            Layer("gssm.pointwise", L * L * P * P, L * L + L),
            Layer("gssm.contract", L * P * P, 0),
        ]
    if cfg.mamba:
        for i in range(cfg.depth):
            p = f"block{i}"
            layers += [
                Layer(f"{p}.ln_in", 0, 2 * R),
                linear_layer(f"{p}.expand", R, D, C),
                linear_layer(f"{p}.keep", D, D, C),
                Layer(f"{p}.ssm", C * (D * D + 2 * D * N + 3 * N * D),
                      D * N + D * D + D + 2 * D * N + D),
                Layer(f"{p}.ln_state", 0, 2 * D),
                linear_layer(f"{p}.compress", D, R, C),
                linear_layer(f"{p}.gate", R, R, C),
            ]
    layers += [linear_layer("pre", R, 1, C), linear_layer("head", C, K)]
    return layers


def param_count(cfg: ModelConfig) -> int:
    return sum(layer.params for layer in layer_costs(cfg))


def count_params(weights) -> int:
    """Number of learnable scalars in a ModelWeights or a name -> array mapping."""
    if isinstance(weights, ModelWeights):
        tensors = weights.parameters()
    elif isinstance(weights, dict):
        tensors = weights.values()
    else:
        tensors = weights
    return int(sum(np.size(getattr(t, "data", t)) for t in tensors))


def count_macs(model: ModelConfig | Iterable[Layer], batch: int = DEFAULT_BATCH) -> int:
    layers = layer_costs(model) if isinstance(model, ModelConfig) else model
    return batch * sum(layer.macs for layer in layers)


@dataclass
class CostReport:
    params: int
    macs: int
    batch: int = DEFAULT_BATCH
    convention: str = MAC_CONVENTION
    layers: dict = field(default_factory=dict)

    def to_json(self) -> dict:
        return asdict(self)


def cost_report(cfg: ModelConfig, batch: int = DEFAULT_BATCH) -> CostReport:
    layers = layer_costs(cfg)
    return CostReport(
        params=param_count(cfg),
        macs=count_macs(layers, batch),
        batch=batch,
        layers={layer.name: {"macs": batch * layer.macs, "params": layer.params} for layer in layers},
    )
