"""Input-conditioned selective scan over token sequences.

The continuous system  h'(t) = A h(t) + B x(t),  y(t) = C h(t)  is sampled
with a zero-order hold over per-token step sizes:

    a_bar = exp(delta * A)
    b_bar = (delta * A)^-1 (exp(delta * A) - 1) * delta * B
    h_t   = a_bar * h_{t-1} + b_bar * x_t
    y_t   = C_t . h_t  (+ skip * x_t)

A is diagonal per (channel, state) pair and kept strictly negative through
the -exp(a_log) parameterization, so the recurrence is a stable leaky
integrator. delta, B and C are functions of the current token, which is
what makes the scan selective. The recurrence is evaluated sequentially in
one fused op whose reverse pass is derived by hand; `gradients` therefore
sees the whole scan as a single node.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .rng import Rng
from .tensor import (
    Tensor,
    ShapeError,
    _add_macs,
    matmul,
    narrow,
    parameter,
    softplus,
    texp,
)

# Sequences are (batch, length, channels) tensors; a feature map enters the
# scan after flattening its grid in some direction's token order.
ScanSequence = Tensor

# Fault-injection hook for the verification CLI: when set to "zoh" or
# "scan", the corresponding computation is perturbed so the matching oracle
# check must fail. Never set during normal operation.
_FAULT: str | None = None

_SMALL_Z = 1e-6


class DomainError(ValueError):
    """Raised for arguments outside an op's mathematical domain."""


def _phi(z: np.ndarray) -> np.ndarray:
    """(exp(z) - 1) / z with the series limit 1 + z/2 below |z| = 1e-6."""
    small = np.abs(z) < _SMALL_Z
    if not small.any():
        return np.expm1(z) / z
    zs = np.where(small, 1.0, z)
    return np.where(small, 1.0 + 0.5 * z, np.expm1(zs) / zs)


def _phi_prime(z: np.ndarray, exp_z: np.ndarray | None = None) -> np.ndarray:
    # d/dz of (exp(z)-1)/z; series below |z| = 1e-3 avoids cancellation.
    ez = np.exp(z) if exp_z is None else exp_z
    small = np.abs(z) < 1e-3
    if not small.any():
        return ((z - 1.0) * ez + 1.0) / (z * z)
    zs = np.where(small, 1.0, z)
    direct = ((zs - 1.0) * np.where(small, 1.0, ez) + 1.0) / (zs * zs)
    series = 0.5 + z / 3.0 + z * z / 8.0
    return np.where(small, series, direct)


def zoh_discretize(a, b, delta):
    """Zero-order-hold discretization of diagonal dynamics.

    Works elementwise on scalars or broadcastable arrays. Requires
    delta > 0. Returns (a_bar, b_bar).
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    delta = np.asarray(delta, dtype=np.float64)
    if np.any(delta <= 0):
        raise DomainError("zoh_discretize requires delta > 0")
    z = delta * a
    a_bar = np.exp(z)
    b_bar = _phi(z) * delta * b
    if _FAULT == "zoh":
        b_bar = b_bar * (1.0 + 1e-3)
    return a_bar, b_bar


@dataclass
class SsmParams:
    """Per-block selective-scan parameters on d_inner channels.

    a_log parameterizes the diagonal state matrix A = -exp(a_log), which is
    strictly negative by construction. bc_weight maps each token to its
    (B_t, C_t) pair; the low-rank dt pair plus bias produce the per-token
    step size via softplus, so delta > 0 always holds.
    """

    d_inner: int
    d_state: int
    dt_rank: int
    a_log: Tensor
    bc_weight: Tensor
    dt_down: Tensor
    dt_up: Tensor
    dt_bias: Tensor
    skip: Tensor | None

    @staticmethod
    def create(
        d_inner: int,
        d_state: int = 16,
        rng: Rng | None = None,
        use_skip: bool = True,
        dtype=np.float32,
        dt_min: float = 1e-3,
        dt_max: float = 0.1,
    ) -> "SsmParams":
        if d_inner < 1 or d_state < 1:
            raise ValueError("d_inner and d_state must be positive")
        rng = rng or Rng(0)
        dt_rank = max(1, math.ceil(d_inner / 16))
        a_log = np.tile(np.log(np.arange(1, d_state + 1, dtype=np.float64)), (d_inner, 1))
        bc_w = rng.split("bc").truncated_normal((d_inner, 2 * d_state))
        dt_down = rng.split("dt_down").truncated_normal((d_inner, dt_rank))
        dt_up = rng.split("dt_up").truncated_normal((dt_rank, d_inner))
        # Bias chosen so softplus lands in [dt_min, dt_max] at init.
        dt_init = np.exp(
            rng.split("dt_bias").uniform((d_inner,), math.log(dt_min), math.log(dt_max))
        )
        dt_bias = np.log(np.expm1(dt_init))
        return SsmParams(
            d_inner=d_inner,
            d_state=d_state,
            dt_rank=dt_rank,
            a_log=parameter(a_log, "a_log", dtype),
            bc_weight=parameter(bc_w, "bc_weight", dtype),
            dt_down=parameter(dt_down, "dt_down", dtype),
            dt_up=parameter(dt_up, "dt_up", dtype),
            dt_bias=parameter(dt_bias, "dt_bias", dtype),
            skip=parameter(np.ones(d_inner), "skip", dtype) if use_skip else None,
        )

    def params(self, prefix: str = ""):
        yield prefix + "a_log", self.a_log
        yield prefix + "bc_weight", self.bc_weight
        yield prefix + "dt_down", self.dt_down
        yield prefix + "dt_up", self.dt_up
        yield prefix + "dt_bias", self.dt_bias
        if self.skip is not None:
            yield prefix + "skip", self.skip


def _scan_core(u: Tensor, delta: Tensor, a: Tensor, bt: Tensor, ct: Tensor) -> Tensor:
    """Fused sequential recurrence with hand-derived reverse pass.

    u, delta: (B, L, D); a: (D, N); bt, ct: (B, L, N). Returns y (B, L, D).
    Discretization quantities are precomputed for all steps at once; only
    the state carry itself runs step by step, in both directions.
    """
    B, L, D = u.shape
    N = a.shape[1]
    ud, dd, ad, btd, ctd = u.data, delta.data, a.data, bt.data, ct.data
    scan_noise = 1.0 + 1e-3 if _FAULT == "scan" else 1.0

    z = dd[..., None] * ad                       # (B, L, D, N)
    abar = np.exp(z)
    phi = _phi(z)
    w = dd[..., None] * btd[:, :, None, :]
    bx = phi * w * ud[..., None]
    if scan_noise != 1.0:
        bx = bx * scan_noise
    hseq = np.empty((B, L, D, N), dtype=u.dtype)
    h = np.zeros((B, D, N), dtype=u.dtype)
    for t in range(L):
        h = abar[:, t] * h + bx[:, t]
        hseq[:, t] = h
    y = np.einsum("bldn,bln->bld", hseq, ctd)
    _add_macs(6 * B * L * D * N)

    def vjp(g):
        gc = g[..., None] * ctd[:, :, None, :]   # readout pullback per step
        gh = np.empty_like(hseq)
        carry = np.zeros((B, D, N), dtype=g.dtype)
        for t in range(L - 1, -1, -1):
            carry = carry + gc[:, t]
            gh[:, t] = carry
            carry = abar[:, t] * carry
        dct = np.einsum("bldn,bld->bln", hseq, g)
        h_prev = np.concatenate(
            [np.zeros((B, 1, D, N), dtype=hseq.dtype), hseq[:, :-1]], axis=1
        )
        dabar = gh * h_prev
        du = (phi * w * gh).sum(axis=3) * scan_noise
        dbbar = gh * ud[..., None] * scan_noise
        dz = dabar * abar + dbbar * w * _phi_prime(z, exp_z=abar)
        dw = dbbar * phi
        ddelta = (dw * btd[:, :, None, :]).sum(axis=3) + (dz * ad).sum(axis=3)
        dbt = (dw * dd[..., None]).sum(axis=2)
        da = (dz * dd[..., None]).sum(axis=(0, 1))
        return du, ddelta, da, dbt, dct

    return Tensor(y, (u, delta, a, bt, ct), vjp)


def selective_scan(seq: ScanSequence, params: SsmParams) -> ScanSequence:
    """Run the selective scan over a (B, L, D) sequence.

    Per token: project out (B_t, C_t) and the step size delta_t, discretize
    the diagonal dynamics with the zero-order hold, advance the state, and
    read out y_t = C_t . h_t plus the optional per-channel feedthrough.
    Differentiable end to end; an empty sequence yields an empty output.
    """
    if seq.ndim != 3:
        raise ShapeError(f"selective_scan expects (B, L, D), got {seq.shape}")
    if seq.shape[2] != params.d_inner:
        raise ShapeError(f"sequence channels {seq.shape[2]} != d_inner {params.d_inner}")
    n = params.d_state
    bc = matmul(seq, params.bc_weight)
    bt = narrow(bc, 2, 0, n)
    ct = narrow(bc, 2, n, n)
    delta = softplus(matmul(matmul(seq, params.dt_down), params.dt_up) + params.dt_bias)
    a = -texp(params.a_log)
    y = _scan_core(seq, delta, a, bt, ct)
    if params.skip is not None:
        y = y + seq * params.skip
    return y


def ode_oracle(seq: ScanSequence, params: SsmParams, substeps: int = 64) -> ScanSequence:
    """Integrate the continuous dynamics h' = A h + B_t x_t by RK4.

    The input (and its projected B_t, C_t, delta_t) is held constant over
    each token's interval, matching the zero-order-hold assumption, so the
    discrete scan with skip disabled must agree to integration accuracy.
    Evaluation only; no gradients. Excludes the feedthrough term.
    """
    if substeps < 16:
        raise DomainError("ode_oracle requires substeps >= 16")
    x = np.asarray(seq.data, dtype=np.float64)
    B, L, D = x.shape
    n = params.d_state
    bc = x @ params.bc_weight.data.astype(np.float64)
    bt, ct = bc[:, :, :n], bc[:, :, n:]
    pre = x @ params.dt_down.data.astype(np.float64) @ params.dt_up.data.astype(np.float64)
    delta = np.logaddexp(0.0, pre + params.dt_bias.data.astype(np.float64))
    a = -np.exp(params.a_log.data.astype(np.float64))

    y = np.zeros((B, L, D), dtype=np.float64)
    h = np.zeros((B, D, n), dtype=np.float64)
    for t in range(L):
        const = x[:, t, :, None] * bt[:, t, None, :]
        s = (delta[:, t, :, None] / substeps)
        for _ in range(substeps):
            k1 = a * h + const
            k2 = a * (h + 0.5 * s * k1) + const
            k3 = a * (h + 0.5 * s * k2) + const
            k4 = a * (h + s * k3) + const
            h = h + (s / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
        y[:, t] = (h * ct[:, t, None, :]).sum(axis=2)
    return Tensor(y)
