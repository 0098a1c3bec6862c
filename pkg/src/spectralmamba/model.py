"""SpectralMamba network: spectral piece scanning, gated spatial merging,
the Mamba block and the classification head.

Every forward function accepts an optional leading batch axis.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import numpy as np

from . import ndtensor as nd
from .errors import ConfigError, ContractError, DimensionError
from .ndtensor import DiffTensor
from .ssm import SelectiveSsmParams, selective_scan

VARIANTS = ("pixelwise", "patchwise")


@dataclass(frozen=True)
class ModelConfig:
    bands: int
    pieces: int
    classes: int
    state_size: int = 16
    expand: int = 8
    patch: int = 3
    variant: str = "patchwise"
    mamba: bool = True
    depth: int = 1
    dw_kernel: int = 3

    def __post_init__(self):
        for name in ("bands", "pieces", "classes", "state_size", "expand", "patch", "depth", "dw_kernel"):
            value = getattr(self, name)
            if not isinstance(value, (int, np.integer)) or value < 1:
                raise ConfigError(f"{name} must be a positive integer, got {value!r}")
        if self.variant not in VARIANTS:
            raise ConfigError(f"variant must be one of {VARIANTS}, got {self.variant!r}")
        if self.patch % 2 == 0 or self.dw_kernel % 2 == 0:
            raise ConfigError("patch size and depthwise kernel size must be odd")
        if self.pieces > self.bands:
            raise ConfigError(f"cannot cut {self.bands} bands into {self.pieces} pieces")
        if self.piece_len * self.pieces - self.bands >= self.piece_len:
            raise ConfigError(f"{self.pieces} pieces of length {self.piece_len} leave a piece made "
                              f"only of padding for {self.bands} bands")

    @property
    def piece_len(self) -> int:
        return math.ceil(self.bands / self.pieces)

    @property
    def d_inner(self) -> int:
        return self.expand * self.pieces

    @property
    def uses_gssm(self) -> bool:
        return self.variant == "patchwise"

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        known = {k: d[k] for k in cls.__dataclass_fields__ if k in d}
        return cls(**known)


# ---------------------------------------------------------------------------
# piece-wise sequential scanning


def pss_index(bands: int, pieces: int) -> np.ndarray:
    """Band index feeding each (step, piece) cell; the tail repeats the last band."""
    if pieces < 1 or pieces > bands:
        raise ConfigError(f"need 1 <= pieces <= bands, got pieces={pieces}, bands={bands}")
    piece_len = math.ceil(bands / pieces)
    idx = np.arange(pieces)[None, :] * piece_len + np.arange(piece_len)[:, None]
    return np.minimum(idx, bands - 1)


def pss_scan(spectrum, pieces) -> np.ndarray:
    """Cut a spectrum into contiguous pieces laid out as columns.

    Returns a ``[piece_len, R]`` matrix whose column ``r`` is the r-th piece,
    so row ``t`` is the feature vector at sequence step ``t``.
    """
    if isinstance(pieces, ModelConfig):
        pieces = pieces.pieces
    x = np.asarray(spectrum, dtype=np.float64)
    return x[..., pss_index(x.shape[-1], pieces)]


def pss_unscan(m, bands: int) -> np.ndarray:
    m = np.asarray(m)
    columns = np.swapaxes(m, -1, -2).reshape(m.shape[:-2] + (-1,))
    if columns.shape[-1] < bands:
        raise DimensionError(f"{columns.shape[-1]} scanned values cannot restore {bands} bands")
    return columns[..., :bands]


def pss_tensor(spectrum: DiffTensor, pieces: int) -> DiffTensor:
    return nd.take_last(spectrum, pss_index(spectrum.shape[-1], pieces))


# ---------------------------------------------------------------------------
# weights


def _uniform(rng, fan_in, shape):
    bound = 1.0 / math.sqrt(fan_in)
    return DiffTensor(rng.uniform(-bound, bound, shape), requires_grad=True)


def _zeros(shape):
    return DiffTensor(np.zeros(shape), requires_grad=True)


def _ones(shape):
    return DiffTensor(np.ones(shape), requires_grad=True)


@dataclass
class GssmWeights:
    dw_kernel: DiffTensor   # [L, k, k]
    dw_bias: DiffTensor     # [L]
    pw_weight: DiffTensor   # [L, L]
    pw_bias: DiffTensor     # [L]

    @classmethod
    def init(cls, bands: int, rng: np.random.Generator, kernel: int = 3) -> "GssmWeights":
        return cls(_uniform(rng, kernel * kernel, (bands, kernel, kernel)), _zeros(bands),
                   _uniform(rng, bands, (bands, bands)), _zeros(bands))

    def named_parameters(self) -> dict[str, DiffTensor]:
        return {"dw_kernel": self.dw_kernel, "dw_bias": self.dw_bias,
                "pw_weight": self.pw_weight, "pw_bias": self.pw_bias}


@dataclass
class MambaBlockWeights:
    ln_in_gamma: DiffTensor
    ln_in_beta: DiffTensor
    W_expand: DiffTensor
    b_expand: DiffTensor
    W_keep: DiffTensor
    b_keep: DiffTensor
    ssm: SelectiveSsmParams
    ln_state_gamma: DiffTensor
    ln_state_beta: DiffTensor
    W_compress: DiffTensor
    b_compress: DiffTensor
    W_gate: DiffTensor
    b_gate: DiffTensor

    @classmethod
    def init(cls, width: int, expand: int, state_size: int, rng: np.random.Generator) -> "MambaBlockWeights":
        inner = width * expand
        return cls(
            _ones(width), _zeros(width),
            _uniform(rng, width, (width, inner)), _zeros(inner),
            _uniform(rng, inner, (inner, inner)), _zeros(inner),
            SelectiveSsmParams.init(inner, state_size, rng),
            _ones(inner), _zeros(inner),
            _uniform(rng, inner, (inner, width)), _zeros(width),
            _uniform(rng, width, (width, width)), _zeros(width),
        )

    def named_parameters(self) -> dict[str, DiffTensor]:
        out = {name: getattr(self, name) for name in (
            "ln_in_gamma", "ln_in_beta", "W_expand", "b_expand", "W_keep", "b_keep")}
        out.update({f"ssm.{k}": v for k, v in self.ssm.named_parameters().items()})
        out.update({name: getattr(self, name) for name in (
            "ln_state_gamma", "ln_state_beta", "W_compress", "b_compress", "W_gate", "b_gate")})
        return out


@dataclass
class ModelWeights:
    pre_weight: DiffTensor                  # [R, 1]
    pre_bias: DiffTensor                    # [1]
    head_weight: DiffTensor                 # [piece_len, K]
    head_bias: DiffTensor                   # [K]
    blocks: list[MambaBlockWeights] = field(default_factory=list)
    gssm: GssmWeights | None = None

    def named_parameters(self) -> dict[str, DiffTensor]:
        out: dict[str, DiffTensor] = {}
        if self.gssm is not None:
            out.update({f"gssm.{k}": v for k, v in self.gssm.named_parameters().items()})
        for i, block in enumerate(self.blocks):
            out.update({f"block{i}.{k}": v for k, v in block.named_parameters().items()})
        out.update({"pre.weight": self.pre_weight, "pre.bias": self.pre_bias,
                    "head.weight": self.head_weight, "head.bias": self.head_bias})
        return out

    def parameters(self) -> list[DiffTensor]:
        return list(self.named_parameters().values())

    def copy(self) -> "ModelWeights":
        """Deep copy with fresh leaf tensors."""
        clone = _clone_structure(self)
        for dst, src in zip(clone.parameters(), self.parameters()):
            dst.data = src.data.copy()
        return clone

    def load_named(self, arrays: dict[str, np.ndarray]) -> None:
        """Overwrite values in place from a name -> array mapping."""
        mine = self.named_parameters()
        missing = set(mine) - set(arrays)
        extra = set(arrays) - set(mine)
        if missing or extra:
            raise ContractError(f"parameter names disagree: missing {sorted(missing)}, "
                                f"unexpected {sorted(extra)}")
        for name, tensor in mine.items():
            arr = np.asarray(arrays[name], dtype=np.float64)
            if arr.shape != tensor.shape:
                raise ContractError(f"{name}: stored shape {arr.shape}, model expects {tensor.shape}")
            tensor.data = arr.copy()


def _clone_structure(w: ModelWeights) -> ModelWeights:
    def fresh(t):
        return DiffTensor(t.data.copy(), requires_grad=True)

    def clone_block(b):
        vals = {k: fresh(getattr(b, k)) for k in MambaBlockWeights.__dataclass_fields__ if k != "ssm"}
        ssm = SelectiveSsmParams(**{k: fresh(v) for k, v in b.ssm.named_parameters().items()})
        return MambaBlockWeights(ssm=ssm, **vals)

    gssm = None
    if w.gssm is not None:
        gssm = GssmWeights(*(fresh(t) for t in w.gssm.named_parameters().values()))
    return ModelWeights(fresh(w.pre_weight), fresh(w.pre_bias), fresh(w.head_weight),
                        fresh(w.head_bias), [clone_block(b) for b in w.blocks], gssm)


def init_weights(cfg: ModelConfig, seed: int | np.random.Generator = 0) -> ModelWeights:
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    gssm = GssmWeights.init(cfg.bands, rng, cfg.dw_kernel) if cfg.uses_gssm else None
    blocks = [MambaBlockWeights.init(cfg.pieces, cfg.expand, cfg.state_size, rng)
              for _ in range(cfg.depth)] if cfg.mamba else []
    return ModelWeights(
        pre_weight=_uniform(rng, cfg.pieces, (cfg.pieces, 1)),
        pre_bias=_zeros(1),
        head_weight=_uniform(rng, cfg.piece_len, (cfg.piece_len, cfg.classes)),
        head_bias=_zeros(cfg.classes),
        blocks=blocks,
        gssm=gssm,
    )


# ---------------------------------------------------------------------------
# forward pieces


def gssm_mask(patch: DiffTensor, w: GssmWeights) -> DiffTensor:
    dw = nd.depthwise_conv2d(patch, w.dw_kernel, w.dw_bias)
    return nd.activation(nd.pointwise_conv2d(dw, w.pw_weight, w.pw_bias), "sigmoid")


def gssm_merge(patch, w: GssmWeights) -> DiffTensor:
    """Collapse an ``[..., L, P, P]`` patch into one gated spectrum ``[..., L]``."""
    patch = nd.as_tensor(patch)
    if patch.ndim < 3 or patch.shape[-1] != patch.shape[-2]:
        raise DimensionError(f"patch must be [..., L, P, P], got {patch.shape}")
    if patch.shape[-3] != w.dw_kernel.shape[0]:
        raise DimensionError(f"patch has {patch.shape[-3]} bands, GSSM weights expect {w.dw_kernel.shape[0]}")
    return nd.spatial_contract(gssm_mask(patch, w), patch)


def mamba_block(seq: DiffTensor, w: MambaBlockWeights, eps: float = 1e-5) -> DiffTensor:
    """Residual Mamba unit over ``seq [..., piece_len, R]``."""
    if seq.shape[-1] != w.W_expand.shape[0]:
        raise DimensionError(f"sequence features {seq.shape[-1]} != block width {w.W_expand.shape[0]}")
    u = nd.layer_norm(seq, w.ln_in_gamma, w.ln_in_beta, eps)
    hidden = nd.linear(nd.linear(u, w.W_expand, w.b_expand), w.W_keep, w.b_keep)
    hidden = selective_scan(nd.activation(hidden, "silu"), w.ssm)
    main = nd.linear(nd.layer_norm(hidden, w.ln_state_gamma, w.ln_state_beta, eps),
                     w.W_compress, w.b_compress)
    gate = nd.activation(nd.linear(u, w.W_gate, w.b_gate), "sigmoid")
    return nd.add(seq, nd.mul(gate, main))


def merged_spectrum(inputs, w: ModelWeights, cfg: ModelConfig) -> DiffTensor:
    x = nd.as_tensor(inputs)
    if cfg.variant == "patchwise":
        if x.ndim not in (3, 4) or x.shape[-3:] != (cfg.bands, cfg.patch, cfg.patch):
            raise ContractError(f"patchwise model expects [..., {cfg.bands}, {cfg.patch}, {cfg.patch}] "
                                f"input, got {x.shape}")
        if w.gssm is None:
            raise ContractError("patchwise model has no GSSM weights")
        return gssm_merge(x, w.gssm)
    if x.ndim not in (1, 2) or x.shape[-1] != cfg.bands:
        raise ContractError(f"pixelwise model expects [..., {cfg.bands}] input, got {x.shape}")
    return x


def forward(inputs, w: ModelWeights, cfg: ModelConfig) -> DiffTensor:
    """Logits ``[..., K]`` for a pixel spectrum or a spatial patch."""
    seq = pss_tensor(merged_spectrum(inputs, w, cfg), cfg.pieces)
    for block in w.blocks:
        seq = mamba_block(seq, block)
    v = nd.linear(seq, w.pre_weight, w.pre_bias)
    v = nd.reshape(v, v.shape[:-1])
    return nd.linear(v, w.head_weight, w.head_bias)


def predict(logits) -> np.ndarray | int:
    """Arg-max class index; ties resolve to the lowest index."""
    arr = logits.data if isinstance(logits, DiffTensor) else np.asarray(logits)
    out = np.argmax(arr, axis=-1)
    return int(out) if out.ndim == 0 else out
