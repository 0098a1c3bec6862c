"""State-space machinery: discretization, LTI scans and the selective scan.

The time-invariant path works on plain numpy vectors for a single-input,
single-output system with a diagonal state matrix. The selective path is
differentiable and runs on :class:`DiffTensor` sequences of shape
``[..., L, D]`` where every one of the ``D`` channels owns an ``N``-dim state.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import ndtensor as nd
from .errors import ConfigError, DimensionError
from .ndtensor import DiffTensor


@dataclass(frozen=True)
class LtiSsm:
    A: np.ndarray
    B: np.ndarray
    Cvec: np.ndarray
    delta: float
    skip_d: float = 0.0

    def __post_init__(self):
        for name in ("A", "B", "Cvec"):
            object.__setattr__(self, name, np.atleast_1d(np.asarray(getattr(self, name), dtype=np.float64)))
        n = self.A.shape[0]
        if n < 1 or self.A.shape != (n,) or self.B.shape != (n,) or self.Cvec.shape != (n,):
            raise DimensionError(f"A, B, Cvec must be equal-length vectors, got "
                                 f"{self.A.shape}, {self.B.shape}, {self.Cvec.shape}")
        if not self.delta > 0:
            raise ConfigError(f"delta must be positive, got {self.delta}")

    @property
    def state_size(self) -> int:
        return self.A.shape[0]

    def is_stable(self) -> bool:
        return bool(np.all(np.abs(np.exp(self.delta * self.A)) < 1.0))


@dataclass(frozen=True)
class DiscreteSsm:
    Abar: np.ndarray
    Bbar: np.ndarray
    Cvec: np.ndarray
    # entries where the exact hold rule hit A == 0 and used its limit
    limit_mask: np.ndarray = field(default=None, compare=False)

    def __post_init__(self):
        if not (self.Abar.shape == self.Bbar.shape == self.Cvec.shape):
            raise DimensionError("Abar, Bbar and Cvec must have equal length")

    @property
    def used_limit(self) -> bool:
        return self.limit_mask is not None and bool(self.limit_mask.any())


def discretize_zoh(ssm: LtiSsm) -> DiscreteSsm:
    """Exact zero-order hold: Abar = exp(dA), Bbar = (dA)^-1 (Abar - 1) dB."""
    dA = ssm.delta * ssm.A
    zero = dA == 0.0
    safe = np.where(zero, 1.0, dA)
    factor = np.where(zero, 1.0, np.expm1(safe) / safe)
    return DiscreteSsm(np.exp(dA), factor * ssm.delta * ssm.B, ssm.Cvec.copy(), zero)


def discretize_taylor(ssm: LtiSsm) -> DiscreteSsm:
    """First-order rule: Abar = exp(dA), Bbar = dB."""
    return DiscreteSsm(np.exp(ssm.delta * ssm.A), ssm.delta * ssm.B, ssm.Cvec.copy())


def recurrent_scan(d: DiscreteSsm, x, h0=None) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    h = np.zeros_like(d.Abar) if h0 is None else np.array(h0, dtype=np.float64)
    y = np.empty(x.shape[0])
    for k, xk in enumerate(x):
        h = d.Abar * h + d.Bbar * xk
        y[k] = d.Cvec @ h
    return y


def ssm_conv_kernel(d: DiscreteSsm, length: int) -> np.ndarray:
    """Kbar[j] = <Cvec, Abar^j * Bbar> for j < length."""
    if length < 1:
        raise ConfigError("kernel length must be at least 1")
    powers = d.Abar[None, :] ** np.arange(length)[:, None]
    return powers @ (d.Cvec * d.Bbar)


def conv_scan(x, kernel) -> np.ndarray:
    """Causal convolution y_k = sum_{j<=k} kernel[j] x[k-j]."""
    x = np.asarray(x, dtype=np.float64)
    kernel = np.asarray(kernel, dtype=np.float64)
    if x.shape != kernel.shape or x.ndim != 1:
        raise DimensionError(f"conv_scan needs equal-length vectors, got {x.shape} and {kernel.shape}")
    y = np.zeros_like(x)
    for k in range(x.shape[0]):
        y[k] = kernel[:k + 1] @ x[k::-1]
    return y


# ---------------------------------------------------------------------------
# selective (input-dependent) scan


@dataclass
class SelectiveSsmParams:
    A_log: DiffTensor     # [D, N]; A = -exp(A_log)
    W_delta: DiffTensor   # [D, D]
    b_delta: DiffTensor   # [D]
    W_B: DiffTensor       # [D, N]
    W_C: DiffTensor       # [D, N]
    skip_d: DiffTensor    # [D]

    @property
    def d_inner(self) -> int:
        return self.A_log.shape[0]

    @property
    def state_size(self) -> int:
        return self.A_log.shape[1]

    @classmethod
    def init(cls, d_inner: int, state_size: int, rng: np.random.Generator,
             dt_range: tuple[float, float] = (1e-3, 1e-1)) -> "SelectiveSsmParams":
        bound = 1.0 / np.sqrt(d_inner)
        a_log = np.tile(np.log(np.arange(1, state_size + 1, dtype=np.float64)), (d_inner, 1))
        dt = np.exp(rng.uniform(np.log(dt_range[0]), np.log(dt_range[1]), d_inner))
        return cls(
            A_log=DiffTensor(a_log, requires_grad=True),
            W_delta=DiffTensor(rng.uniform(-bound, bound, (d_inner, d_inner)), requires_grad=True),
            # inverse softplus so that softplus(b_delta) == dt
            b_delta=DiffTensor(np.log(np.expm1(dt)), requires_grad=True),
            W_B=DiffTensor(rng.uniform(-bound, bound, (d_inner, state_size)), requires_grad=True),
            W_C=DiffTensor(rng.uniform(-bound, bound, (d_inner, state_size)), requires_grad=True),
            skip_d=DiffTensor(np.ones(d_inner), requires_grad=True),
        )

    def named_parameters(self) -> dict[str, DiffTensor]:
        return {"A_log": self.A_log, "W_delta": self.W_delta, "b_delta": self.b_delta,
                "W_B": self.W_B, "W_C": self.W_C, "skip_d": self.skip_d}

    def state_matrix(self) -> DiffTensor:
        return -nd.activation(self.A_log, "exp")


def scan_selective(x: DiffTensor, delta: DiffTensor, A: DiffTensor, B: DiffTensor,
                   C: DiffTensor, h0: np.ndarray | None = None) -> tuple[DiffTensor, np.ndarray]:
    """Run the input-dependent recurrence given realized per-step parameters.

    Shapes: x, delta ``[..., L, D]``; A ``[D, N]``; B, C ``[..., L, N]``.
    Per step: ``h = exp(delta*A) * h + (delta*x) B``, ``y = <C, h>``.
    Returns the output ``[..., L, D]`` and the final state ``[..., D, N]``.
    """
    if x.shape != delta.shape or B.shape != C.shape or x.shape[:-1] != B.shape[:-1]:
        raise DimensionError(f"scan shapes disagree: x {x.shape}, delta {delta.shape}, "
                             f"B {B.shape}, C {C.shape}")
    if A.shape != (x.shape[-1], B.shape[-1]):
        raise DimensionError(f"A must be [D, N] = {(x.shape[-1], B.shape[-1])}, got {A.shape}")
    lead, length = x.shape[:-2], x.shape[-2]
    d, n = A.shape
    a_bar = np.exp(delta.data[..., None] * A.data)
    dx = delta.data * x.data
    u = dx[..., None] * B.data[..., None, :]
    hs = np.empty(lead + (length, d, n))
    h = np.zeros(lead + (d, n)) if h0 is None else np.broadcast_to(np.asarray(h0, dtype=np.float64),
                                                                    lead + (d, n))
    h_init = h
    for t in range(length):
        h = a_bar[..., t, :, :] * h + u[..., t, :, :]
        hs[..., t, :, :] = h
    y = np.einsum("...ldn,...ln->...ld", hs, C.data)

    def _bw(gy):
        g_a = np.empty_like(hs)
        g_u = np.empty_like(hs)
        g_h = np.zeros(lead + (d, n))
        for t in range(length - 1, -1, -1):
            g_h = g_h + gy[..., t, :, None] * C.data[..., t, None, :]
            prev = hs[..., t - 1, :, :] if t > 0 else h_init
            g_a[..., t, :, :] = g_h * prev
            g_u[..., t, :, :] = g_h
            g_h = a_bar[..., t, :, :] * g_h
        g_C = np.einsum("...ld,...ldn->...ln", gy, hs)
        g_pre = g_a * a_bar
        g_dx = np.einsum("...ldn,...ln->...ld", g_u, B.data)
        g_delta = np.einsum("...ldn,dn->...ld", g_pre, A.data) + g_dx * x.data
        g_A = np.einsum("kdn,kd->dn", g_pre.reshape(-1, d, n), delta.data.reshape(-1, d))
        g_B = np.einsum("...ldn,...ld->...ln", g_u, dx)
        return g_dx * delta.data, g_delta, g_A, g_B, g_C

    out = nd.record(y, (x, delta, A, B, C), _bw, "scan_selective")
    return out, h.copy()


def selective_scan(xseq: DiffTensor, p: SelectiveSsmParams, h0: np.ndarray | None = None,
                   return_state: bool = False):
    """Selective SSM over ``xseq [..., L, D]`` with input-dependent (delta, B, C).

    ``delta_t = softplus(x_t W_delta + b_delta)``, ``B_t = x_t W_B``,
    ``C_t = x_t W_C``; the state matrix is ``-exp(A_log)`` and the input map
    is discretized with the first-order rule. A per-channel ``skip_d * x``
    feed-through is added to the scan output.
    """
    if xseq.ndim < 2 or xseq.shape[-1] != p.d_inner:
        raise DimensionError(f"selective_scan expects [..., L, {p.d_inner}], got {xseq.shape}")
    if xseq.shape[-2] < 1:
        raise DimensionError("selective_scan needs at least one step")
    delta = nd.activation(nd.linear(xseq, p.W_delta, p.b_delta), "softplus")
    B = nd.linear(xseq, p.W_B)
    C = nd.linear(xseq, p.W_C)
    y, state = scan_selective(xseq, delta, p.state_matrix(), B, C, h0)
    y = nd.add(y, nd.mul(xseq, p.skip_d))
    return (y, state) if return_state else y
