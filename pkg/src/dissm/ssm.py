"""Selective state space scan, its bidirectional wrapper, and cost formulas.

The state matrix is diagonal and negative real, stored as ``a_log = log(-A)``.
Step size, input and output vectors are computed from the current token
(selection), and the continuous system is discretised with a zero-order hold:

    a_bar = exp(delta * a)
    b_bar = (exp(delta * a) - 1) / (delta * a) * delta * b

The recurrence ``h_t = a_bar_t * h_{t-1} + b_bar_t * x_t``,
``y_t = <c_t, h_t> + d * x_t`` runs sequentially over the sequence axis inside
one fused autograd op with a hand-written reverse pass, compiled with numba.
"""

from __future__ import annotations

import math

import numba
import numpy as np

from . import tensor as T
from .nn import Linear, Module, param, trunc_normal, uniform
from .tensor import Tensor

# MAC counter scopes. "ssm_formula" follows the closed form
# 3*J*Din*N + J*Din*N^2, which charges the state transition as a dense N x N
# product per channel; "scan" is what the diagonal implementation performs.
SCOPE_SSM_FORMULA = "ssm_formula"
SCOPE_SCAN = "scan"


def discretize_zoh(a, b, delta):
    """Zero-order-hold discretisation of a scalar (or elementwise diagonal) system.

    Returns ``(a_bar, b_bar)``. At ``a == 0`` the analytic limit ``b_bar = delta*b``
    is used. Works on python floats and numpy arrays alike.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    delta = np.asarray(delta, dtype=np.float64)
    if np.any(delta <= 0):
        raise ValueError("discretisation step delta must be positive")
    da = delta * a
    a_bar = np.exp(da)
    safe = np.where(a == 0, 1.0, a)
    scale = np.where(a == 0, delta, np.expm1(da) / safe)
    b_bar = scale * b
    if a_bar.ndim == 0:
        return float(a_bar), float(b_bar)
    return a_bar, b_bar


def _zoh_tables(delta: np.ndarray, A: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Compact ZOH factors for the kernels.

    Returns ``em1 = expm1(delta*a)``, ``inv_a = 1/a`` (0 where ``a == 0``) and
    a mask of zero entries. The kernels form ``a_bar = em1 + 1`` and
    ``q = em1*inv_a + delta*mask`` so that ``b_bar = q * b``, with the
    ``a == 0`` limit ``q = delta``.
    """
    em1 = np.multiply(delta[..., None], A)
    np.expm1(em1, out=em1)
    zero = A == 0
    inv_a = np.zeros_like(A)
    np.divide(1, A, out=inv_a, where=~zero)
    return em1, inv_a, zero.astype(A.dtype)


@numba.njit(cache=True, fastmath={"reassoc", "contract", "nsz", "arcp"})
def _scan_forward(u, delta, em1, inv_a, zmask, B, C, D, hs, y):  # pragma: no cover - compiled
    # hs[:, 0] is the zero initial state; hs[:, t + 1] is the state after step t
    bt, J, din = u.shape
    n = B.shape[2]
    one = u.dtype.type(1)
    for b in range(bt):
        hs[b, 0] = 0.0
        for t in range(J):
            Bt = B[b, t]
            Ct = C[b, t]
            for d in range(din):
                x = u[b, t, d]
                dl = delta[b, t, d]
                ev = em1[b, t, d]
                ia = inv_a[d]
                zm = zmask[d]
                hp = hs[b, t, d]
                hn = hs[b, t + 1, d]
                acc = D[d] * x
                for k in range(n):
                    qk = ev[k] * ia[k] + dl * zm[k]
                    h = (ev[k] + one) * hp[k] + qk * (Bt[k] * x)
                    hn[k] = h
                    acc += Ct[k] * h
                y[b, t, d] = acc


@numba.njit(cache=True, fastmath={"reassoc", "contract", "nsz", "arcp"})
def _scan_backward(g, u, delta, A, em1, inv_a, zmask, B, C, D, hs,
                   gu, gdelta, s_ab, s_q, s_q0, gB, gC, gD):  # pragma: no cover - compiled
    # The gradient for A is returned in three pieces so the inner loop has no
    # division: gA = s_ab + s_q / a, or s_ab + s_q0 / 2 where a == 0.
    bt, J, din = u.shape
    n = A.shape[1]
    one = u.dtype.type(1)
    carry = np.zeros((din, n), dtype=u.dtype)
    gBt = np.zeros(n, dtype=u.dtype)
    gCt = np.zeros(n, dtype=u.dtype)
    for b in range(bt):
        carry[:, :] = 0.0
        for t in range(J - 1, -1, -1):
            gBt[:] = 0.0
            gCt[:] = 0.0
            Bt = B[b, t]
            Ct = C[b, t]
            for d in range(din):
                gy = g[b, t, d]
                dl = delta[b, t, d]
                x = u[b, t, d]
                gx = gy * D[d]
                gdl = u.dtype.type(0)
                gD[d] += gy * x
                ev = em1[b, t, d]
                ia = inv_a[d]
                zm = zmask[d]
                hp = hs[b, t, d]
                hn = hs[b, t + 1, d]
                Ad = A[d]
                cr = carry[d]
                sa = s_ab[d]
                sq = s_q[d]
                s0 = s_q0[d]
                dl2 = dl * dl
                for k in range(n):
                    ab = ev[k] + one
                    qk = ev[k] * ia[k] + dl * zm[k]
                    gCt[k] += gy * hn[k]
                    gh = gy * Ct[k] + cr[k]
                    g_ab = gh * hp[k]
                    g_bbar = gh * x
                    gBt[k] += g_bbar * qk
                    gq = g_bbar * Bt[k]
                    gx += gh * qk * Bt[k]
                    gdl += (g_ab * Ad[k] + gq) * ab
                    dab = dl * ab
                    sa[k] += g_ab * dab
                    sq[k] += gq * (dab - qk)
                    s0[k] += gq * dl2
                    cr[k] = ab * gh
                gu[b, t, d] = gx
                gdelta[b, t, d] = gdl
            gB[b, t] = gBt
            gC[b, t] = gCt


def scan(u, delta, A, B, C, D) -> Tensor:
    """Fused selective scan.

    Shapes: ``u, delta: [..., J, Din]``, ``A: [Din, N]``, ``B, C: [..., J, N]``,
    ``D: [Din]``. Returns ``y: [..., J, Din]``. ``delta`` must be positive and
    ``A`` non-positive; the initial state is zero.
    """
    u, delta, A, B, C, D = T._coerce(u, delta, A, B, C, D)
    lead = u.shape[:-2]
    J, din = u.shape[-2:]
    n = A.shape[-1]
    if J < 1:
        raise T.DimensionError("scan needs at least one step")
    if delta.shape != u.shape or A.shape != (din, n) or D.shape != (din,):
        raise T.DimensionError(
            f"scan shapes: u {u.shape}, delta {delta.shape}, A {A.shape}, D {D.shape}"
        )
    if B.shape != lead + (J, n) or C.shape != lead + (J, n):
        raise T.DimensionError(f"scan shapes: B {B.shape}, C {C.shape}, expected {lead + (J, n)}")

    bt = int(np.prod(lead, dtype=np.int64))
    c3 = lambda a, *shape: np.ascontiguousarray(a.reshape(shape))
    ud, dd = c3(u.data, bt, J, din), c3(delta.data, bt, J, din)
    Bd, Cd = c3(B.data, bt, J, n), c3(C.data, bt, J, n)
    Ad, Dd = np.ascontiguousarray(A.data), np.ascontiguousarray(D.data)

    em1, inv_a, zmask = _zoh_tables(dd, Ad)
    hs = np.empty((bt, J + 1, din, n), dtype=ud.dtype)
    y = np.empty((bt, J, din), dtype=ud.dtype)
    _scan_forward(ud, dd, em1, inv_a, zmask, Bd, Cd, Dd, hs, y)
    per_step_formula = bt * (3 * din * n + din * n * n)
    per_step_actual = bt * (5 * din * n + din)
    for _ in range(J):
        T.tally(SCOPE_SSM_FORMULA, per_step_formula)
        T.tally(SCOPE_SCAN, per_step_actual)
    finite = np.isfinite(hs[:, 1:]).reshape(bt, J, -1).all(axis=(0, 2))
    if not finite.all():
        raise T.NumericDomainError(f"non-finite scan state at step {int(np.argmin(finite))}")

    def back(g):
        g = np.ascontiguousarray(g.reshape(bt, J, din), dtype=ud.dtype)
        gu = np.empty_like(ud)
        gdelta = np.empty_like(dd)
        s_ab, s_q, s_q0 = np.zeros_like(Ad), np.zeros_like(Ad), np.zeros_like(Ad)
        gB = np.empty_like(Bd)
        gC = np.empty_like(Cd)
        gD = np.zeros_like(Dd)
        _scan_backward(g, ud, dd, Ad, em1, inv_a, zmask, Bd, Cd, Dd, hs, gu, gdelta, s_ab, s_q, s_q0, gB, gC, gD)
        zero = Ad == 0
        gA = s_ab + np.where(zero, 0.5 * s_q0, s_q / np.where(zero, 1, Ad))
        return (gu.reshape(u.shape), gdelta.reshape(delta.shape), gA,
                gB.reshape(B.shape), gC.reshape(C.shape), gD)

    return T._result(y.reshape(u.shape), (u, delta, A, B, C, D), back, "selective_scan")


class SsmDirectionParams(Module):
    """Parameters of one scan direction.

    The step size goes through a rank-``dt_rank`` bottleneck
    (``Din -> dt_rank -> Din`` plus bias) before the softplus.
    """

    def __init__(self, d_inner: int, n_state: int, rng: np.random.Generator,
                 dt_rank: int | None = None, dt_min: float = 1e-3, dt_max: float = 1e-1):
        dt_rank = dt_rank or max(1, math.ceil(d_inner / 32))
        self.d_inner, self.n_state, self.dt_rank = d_inner, n_state, dt_rank
        # A_n = -(n + 1) for every channel
        self.a_log = param(np.log(np.tile(np.arange(1, n_state + 1, dtype=np.float64), (d_inner, 1))))
        # fan-in uniform init as in Mamba; at std 0.02 the scan barely mixes tokens
        fan_in = 1.0 / math.sqrt(d_inner)
        self.delta_down = param(uniform(rng, (d_inner, dt_rank), fan_in))
        self.delta_up = param(uniform(rng, (dt_rank, d_inner), 1.0 / math.sqrt(dt_rank)))
        # softplus(bias) log-uniform in [dt_min, dt_max]
        dt = np.exp(rng.uniform(np.log(dt_min), np.log(dt_max), d_inner))
        self.delta_bias = param(dt + np.log(-np.expm1(-dt)))
        self.b_proj = param(uniform(rng, (d_inner, n_state), fan_in))
        self.c_proj = param(uniform(rng, (d_inner, n_state), fan_in))
        self.d_skip = param(np.ones(d_inner))

    def state_matrix(self) -> Tensor:
        return -T.exp(self.a_log)

    def step_sizes(self, x: Tensor) -> Tensor:
        return T.softplus(T.matmul(T.matmul(x, self.delta_down), self.delta_up) + self.delta_bias)


def selective_scan(x: Tensor, params: SsmDirectionParams) -> Tensor:
    """Run one direction over ``x: [..., J, Din]`` with input-dependent step, B and C."""
    delta = params.step_sizes(x)
    B = T.matmul(x, params.b_proj)
    C = T.matmul(x, params.c_proj)
    return scan(x, delta, params.state_matrix(), B, C, params.d_skip)


def bidirectional_ssm(x: Tensor, fwd: SsmDirectionParams, bwd: SsmDirectionParams,
                      combine: str = "mean") -> Tensor:
    """Forward scan plus a scan over the reversed sequence, re-reversed and combined."""
    y_f = selective_scan(x, fwd)
    y_b = T.flip(selective_scan(T.flip(x, -2), bwd), -2)
    if combine == "mean":
        return (y_f + y_b) * 0.5
    if combine == "sum":
        return y_f + y_b
    raise ValueError(f"unknown direction combine mode {combine!r}")


def flops_ssm(J: int, D: int, N: int) -> int:
    """3*J*(2D)*N + J*(2D)*N^2 with expansion factor 2."""
    for v in (J, D, N):
        if not isinstance(v, (int, np.integer)) or v <= 0:
            raise ValueError("flops_ssm expects positive integers")
    J, D, N = int(J), int(D), int(N)
    return 3 * J * (2 * D) * N + J * (2 * D) * N * N


def flops_attention(J: int, D: int) -> int:
    """4*J*D^2 + 2*J^2*D for single-head self-attention with Q/K/V/O projections."""
    for v in (J, D):
        if not isinstance(v, (int, np.integer)) or v <= 0:
            raise ValueError("flops_attention expects positive integers")
    J, D = int(J), int(D)
    return 4 * J * D * D + 2 * J * J * D


class AttentionParams(Module):
    def __init__(self, d: int, rng: np.random.Generator):
        self.w_q = param(trunc_normal(rng, (d, d)))
        self.w_k = param(trunc_normal(rng, (d, d)))
        self.w_v = param(trunc_normal(rng, (d, d)))
        self.w_o = param(trunc_normal(rng, (d, d)))


def attention_reference(x: Tensor, params: AttentionParams) -> Tensor:
    """Single-head scaled dot-product self-attention over ``x: [..., J, D]``.

    Only used as the quadratic baseline for cost comparisons; bias-free so the
    multiply-accumulate count is exactly ``4*J*D^2 + 2*J^2*D``.
    """
    d = x.shape[-1]
    q = T.matmul(x, params.w_q)
    k = T.matmul(x, params.w_k)
    v = T.matmul(x, params.w_v)
    scores = T.matmul(q, T.transpose(k)) * (1.0 / math.sqrt(d))
    return T.matmul(T.matmul(T.softmax_last(scores), v), params.w_o)
