"""Optimization loop, evaluation and the module/pieces ablation harness."""

from __future__ import annotations

import logging
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from . import ndtensor as nd
from .cost import count_macs, param_count
from .data import HsiCube, LabelMap, extract_patches, extract_pixels, pad_cube
from .errors import ConfigError, ContractError, NumericError
from .metrics import Metrics, confusion_matrix, metrics_from_confusion
from .model import ModelConfig, ModelWeights, forward, init_weights, predict

log = logging.getLogger(__name__)

LR_GRID = (1e-4, 5e-4, 1e-3, 5e-3)


@dataclass(frozen=True)
class TrainConfig:
    lr0: float = 1e-3
    weight_decay: float = 0.0
    epochs: int = 500
    batch: int = 64
    step_epochs: int = 20
    gamma: float = 0.9
    seed: int = 0

    def __post_init__(self):
        if not self.lr0 > 0:
            raise ConfigError("lr0 must be positive")
        if self.weight_decay < 0:
            raise ConfigError("weight_decay must be non-negative")
        if self.epochs < 1 or self.batch < 1 or self.step_epochs < 1:
            raise ConfigError("epochs, batch and step_epochs must be positive")
        if not 0 < self.gamma <= 1:
            raise ConfigError("gamma must lie in (0, 1]")

    def to_dict(self) -> dict:
        return asdict(self)


def lr_at(epoch: int, cfg: TrainConfig) -> float:
    """Step decay: lr0 * gamma ** (epoch // step_epochs)."""
    if epoch < 0:
        raise ConfigError("epoch must be non-negative")
    return cfg.lr0 * cfg.gamma ** (epoch // cfg.step_epochs)


@dataclass
class AdamState:
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_step(weights: dict, grads: dict, state: AdamState, lr: float, weight_decay: float = 0.0) -> None:
    """One Adam update with decoupled weight decay, in place on ``weights``.

    ``weights`` maps names to arrays or DiffTensors; missing gradients count
    as zero.
    """
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** state.step
    c2 = 1.0 - b2 ** state.step
    for name, w in weights.items():
        arr = w.data if isinstance(w, nd.DiffTensor) else w
        g = grads.get(name)
        g = np.zeros_like(arr) if g is None else np.asarray(g, dtype=np.float64)
        if g.shape != arr.shape:
            raise ContractError(f"{name}: gradient {g.shape} vs weight {arr.shape}")
        if weight_decay:
            arr -= lr * weight_decay * arr
        m = state.m.get(name)
        v = state.v.get(name)
        m = (1 - b1) * g if m is None else b1 * m + (1 - b1) * g
        v = (1 - b2) * g * g if v is None else b2 * v + (1 - b2) * g * g
        state.m[name], state.v[name] = m, v
        arr -= lr * (m / c1) / (np.sqrt(v / c2) + state.eps)


def model_inputs(cube: HsiCube, rows, cols, cfg: ModelConfig, padded: np.ndarray | None = None) -> np.ndarray:
    if cfg.bands != cube.bands:
        raise ContractError(f"model expects {cfg.bands} bands, cube has {cube.bands}")
    if cfg.variant == "patchwise":
        return extract_patches(cube, rows, cols, cfg.patch, padded)
    return extract_pixels(cube, rows, cols)


@dataclass
class TrainResult:
    weights: ModelWeights
    history: list[tuple[int, float, float]]   # (epoch, mean loss, lr)
    seconds: float = 0.0


def train(weights: ModelWeights, cfg: ModelConfig, cube: HsiCube, train_labels: LabelMap,
          tcfg: TrainConfig, on_epoch=None) -> TrainResult:
    """Mini-batch cross-entropy training; the input weights are left untouched."""
    rows, cols, classes = train_labels.coordinates()
    if rows.size == 0:
        raise ContractError("training set is empty")
    if classes.max() > cfg.classes:
        raise ContractError(f"label {classes.max()} exceeds the model's {cfg.classes} classes")
    x_all = model_inputs(cube, rows, cols, cfg)
    y_all = classes - 1

    w = weights.copy()
    params = w.named_parameters()
    state = AdamState()
    rng = np.random.default_rng(tcfg.seed)
    history = []
    start = time.perf_counter()
    n = rows.size
    for epoch in range(tcfg.epochs):
        lr = lr_at(epoch, tcfg)
        order = rng.permutation(n)
        total = 0.0
        for lo in range(0, n, tcfg.batch):
            idx = order[lo:lo + tcfg.batch]
            for t in params.values():
                t.grad = None
            loss = nd.softmax_cross_entropy(forward(x_all[idx], w, cfg), y_all[idx])
            nd.backward(loss)
            adam_step(params, {k: t.grad for k, t in params.items()}, state, lr, tcfg.weight_decay)
            total += loss.item() * idx.size
        mean = total / n
        if not np.isfinite(mean):
            raise NumericError(f"training loss diverged at epoch {epoch}")
        history.append((epoch, mean, lr))
        if on_epoch is not None:
            on_epoch(epoch, mean, lr)
    return TrainResult(w, history, time.perf_counter() - start)


def predict_pixels(weights: ModelWeights, cfg: ModelConfig, cube: HsiCube, rows, cols,
                   batch: int = 1024, padded: np.ndarray | None = None) -> np.ndarray:
    """0-based class predictions for the given pixels."""
    rows = np.asarray(rows)
    cols = np.asarray(cols)
    if padded is None and cfg.variant == "patchwise":
        padded = pad_cube(cube, cfg.patch)
    out = np.empty(rows.size, dtype=np.int64)
    with nd.no_grad():
        for lo in range(0, rows.size, batch):
            x = model_inputs(cube, rows[lo:lo + batch], cols[lo:lo + batch], cfg, padded)
            out[lo:lo + batch] = predict(forward(x, weights, cfg))
    return out


def predict_scene(weights: ModelWeights, cfg: ModelConfig, cube: HsiCube, batch: int = 1024) -> np.ndarray:
    """1-based class map over every pixel of the scene."""
    rows, cols = np.divmod(np.arange(cube.height * cube.width), cube.width)
    pred = predict_pixels(weights, cfg, cube, rows, cols, batch)
    return (pred + 1).reshape(cube.height, cube.width)


def evaluate(weights: ModelWeights, cfg: ModelConfig, cube: HsiCube, test_labels: LabelMap,
             workers: int = 1, batch: int = 1024) -> Metrics:
    """Score the model on every labeled pixel of ``test_labels``.

    With ``workers > 1`` the test set is sharded across threads and the
    per-shard confusion matrices are summed.
    """
    rows, cols, classes = test_labels.coordinates()
    if rows.size == 0:
        raise ContractError("test set is empty")
    if classes.max() > cfg.classes:
        raise ContractError(f"label {classes.max()} exceeds the model's {cfg.classes} classes")
    padded = pad_cube(cube, cfg.patch) if cfg.variant == "patchwise" else None

    def shard(sel):
        pred = predict_pixels(weights, cfg, cube, rows[sel], cols[sel], batch, padded)
        return confusion_matrix(classes[sel] - 1, pred, cfg.classes)

    shards = np.array_split(np.arange(rows.size), max(1, workers))
    if workers > 1:
        with ThreadPoolExecutor(workers) as pool:
            parts = list(pool.map(shard, shards))
    else:
        parts = [shard(s) for s in shards]
    return metrics_from_confusion(sum(parts))


# ---------------------------------------------------------------------------
# ablations

PIECES_SWEEP = (2, 4, 6, 8)


def module_grid(base: ModelConfig) -> list[tuple[dict, ModelConfig]]:
    """GSSM x PSS x Mamba on/off cells; PSS off means a single piece."""
    cells = []
    for gssm in (False, True):
        for pss in (False, True):
            for mamba in (True, False):
                cfg = replace(base, variant="patchwise" if gssm else "pixelwise",
                              pieces=base.pieces if pss else 1, mamba=mamba)
                cells.append(({"gssm": gssm, "pss": pss, "mamba": mamba}, cfg))
    return cells


def pieces_sweep(base: ModelConfig, pieces=PIECES_SWEEP) -> list[tuple[dict, ModelConfig]]:
    return [({"gssm": base.uses_gssm, "pss": True, "mamba": base.mamba}, replace(base, pieces=r))
            for r in pieces]


def ablate(cube: HsiCube, train_labels: LabelMap, test_labels: LabelMap, base: ModelConfig,
           tcfg: TrainConfig, sections=("modules", "pieces"), pieces=PIECES_SWEEP) -> list[dict]:
    """Train and score every ablation cell; one result row per cell."""
    plan = []
    if "modules" in sections:
        plan += [("modules", flags, cfg) for flags, cfg in module_grid(base)]
    if "pieces" in sections:
        plan += [("pieces", flags, cfg) for flags, cfg in pieces_sweep(base, pieces)]
    rows = []
    for section, flags, cfg in plan:
        result = train(init_weights(cfg, tcfg.seed), cfg, cube, train_labels, tcfg)
        m = evaluate(result.weights, cfg, cube, test_labels)
        row = {"section": section, **flags, "variant": cfg.variant, "pieces": cfg.pieces,
               "piece_len": cfg.piece_len, "oa": m.oa, "aa": m.aa, "kappa": m.kappa,
               "macs": count_macs(cfg), "params": param_count(cfg), "seconds": result.seconds}
        log.info("ablation %s %s -> OA %.4f", section, flags, m.oa)
        rows.append(row)
    return rows


def render_table(rows: list[dict]) -> str:
    """Fixed-width text rendering of ablation rows."""
    mark = {True: "on", False: "off"}
    header = ["section", "variant", "GSSM", "PSS", "Mamba", "R", "OA", "AA", "kappa", "MACs(M)", "Params(K)"]
    body = [[r["section"], r["variant"], mark[r["gssm"]], mark[r["pss"]], mark[r["mamba"]],
             str(r["pieces"]), f"{100 * r['oa']:.2f}", f"{100 * r['aa']:.2f}", f"{r['kappa']:.4f}",
             f"{r['macs'] / 1e6:.3f}", f"{r['params'] / 1e3:.2f}"] for r in rows]
    widths = [max(len(row[i]) for row in [header] + body) for i in range(len(header))]
    lines = ["  ".join(cell.rjust(wd) for cell, wd in zip(row, widths)) for row in [header] + body]
    lines.insert(1, "  ".join("-" * wd for wd in widths))
    return "\n".join(lines) + "\n"
