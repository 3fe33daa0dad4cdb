"""Operator-invocable oracle suite; also the home of the naive references.

Every mathematical claim the library makes is re-checked here against an
independent implementation: the scan against a scalar double-loop
recurrence, the discretization against extended-precision evaluation, the
recurrence against direct RK4 integration of the continuous system,
permutations against exhaustive enumeration, analytic gradients against
central differences, and the closed-form parameter/MAC accounting against
brute-force enumeration and instrumented execution.

`run_checks` prints one line per check and reports failure through the
exit code, so the claims are checkable from an installed package, not only
from the test suite. Fault injection (`--break`) deliberately corrupts one
computation to demonstrate the matching check catches it.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass

import numpy as np

from . import layers as layers_mod
from . import ssm as ssm_mod
from .layers import (
    GroupMambaLayerParams,
    ScanDirection,
    VsssParams,
    affinity,
    cam_modulate,
    channel_stat,
    modulated_group_mamba,
    scan_permutation,
    vsss_forward,
)
from .losses import DistillLossInput, cross_entropy, distilled_loss
from .model import build, count_flops, count_params, forward, micro_config
from .rng import Rng
from .ssm import SsmParams, ode_oracle, selective_scan, zoh_discretize
from .tensor import Tensor, count_macs, grad_check, gradients, parameter

FAULT_TARGETS = ("zoh", "scan", "perm")


def set_fault(target: str | None) -> None:
    if target is not None and target not in FAULT_TARGETS:
        raise ValueError(f"unknown fault target {target!r}; choose from {FAULT_TARGETS}")
    ssm_mod._FAULT = target if target in ("zoh", "scan") else None
    layers_mod._FAULT = target if target == "perm" else None


# -- independent reference implementations ---------------------------------------


def naive_selective_scan(
    x: np.ndarray, params: SsmParams, use_skip: bool = True
) -> np.ndarray:
    """Scalar double-loop recurrence, coded independently of the fused path.

    Recomputes the projections and the zero-order hold per element with
    plain Python floats.
    """
    x = np.asarray(x, dtype=np.float64)
    bsz, length, d = x.shape
    n = params.d_state
    a_log = params.a_log.data.astype(np.float64)
    bc_w = params.bc_weight.data.astype(np.float64)
    down = params.dt_down.data.astype(np.float64)
    up = params.dt_up.data.astype(np.float64)
    bias = params.dt_bias.data.astype(np.float64)
    skip = params.skip.data.astype(np.float64) if (params.skip is not None and use_skip) else None

    y = np.zeros((bsz, length, d))
    for b in range(bsz):
        h = [[0.0] * n for _ in range(d)]
        for t in range(length):
            xt = x[b, t]
            bt = [sum(xt[i] * bc_w[i, j] for i in range(d)) for j in range(n)]
            ct = [sum(xt[i] * bc_w[i, n + j] for i in range(d)) for j in range(n)]
            low = [sum(xt[i] * down[i, r] for i in range(d)) for r in range(len(up))]
            for di in range(d):
                pre = sum(low[r] * up[r, di] for r in range(len(up))) + bias[di]
                delta = math.log1p(math.exp(-abs(pre))) + max(pre, 0.0)
                acc = 0.0
                for j in range(n):
                    a = -math.exp(a_log[di, j])
                    z = delta * a
                    abar = math.exp(z)
                    if abs(z) < 1e-6:
                        phi = 1.0 + 0.5 * z
                    else:
                        phi = (math.exp(z) - 1.0) / z
                    bbar = phi * delta * bt[j]
                    h[di][j] = abar * h[di][j] + bbar * xt[di]
                    acc += ct[j] * h[di][j]
                if skip is not None:
                    acc += skip[di] * xt[di]
                y[b, t, di] = acc
    return y


def naive_scan_states(x: np.ndarray, params: SsmParams) -> np.ndarray:
    """State trajectory (B, L, D, N) of the naive recurrence."""
    x = np.asarray(x, dtype=np.float64)
    bsz, length, d = x.shape
    n = params.d_state
    out = np.zeros((bsz, length, d, n))
    a_log = params.a_log.data.astype(np.float64)
    bc_w = params.bc_weight.data.astype(np.float64)
    down = params.dt_down.data.astype(np.float64)
    up = params.dt_up.data.astype(np.float64)
    bias = params.dt_bias.data.astype(np.float64)
    for b in range(bsz):
        h = np.zeros((d, n))
        for t in range(length):
            xt = x[b, t]
            btv = xt @ bc_w[:, :n]
            delta = np.logaddexp(0.0, xt @ down @ up + bias)
            z = delta[:, None] * (-np.exp(a_log))
            abar = np.exp(z)
            phi = np.where(np.abs(z) < 1e-6, 1.0 + 0.5 * z, np.expm1(np.where(np.abs(z) < 1e-6, 1.0, z)) / np.where(np.abs(z) < 1e-6, 1.0, z))
            h = abar * h + phi * delta[:, None] * btv[None, :] * xt[:, None]
            out[b, t] = h
    return out


def naive_matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Triple-loop matrix product."""
    m, k = a.shape
    k2, n = b.shape
    assert k == k2
    out = np.zeros((m, n), dtype=np.float64)
    for i in range(m):
        for j in range(n):
            s = 0.0
            for t in range(k):
                s += float(a[i, t]) * float(b[t, j])
            out[i, j] = s
    return out


# -- check registry ------------------------------------------------------------


@dataclass
class CheckResult:
    name: str
    ok: bool
    detail: str
    seconds: float


def _random_ssm(rng: Rng, d: int, n: int, use_skip: bool = True) -> SsmParams:
    p = SsmParams.create(d, n, rng, use_skip=use_skip, dtype=np.float64)
    # Randomize beyond the structured init so checks cover generic values.
    p.a_log.data = rng.split("a").uniform((d, n), -1.0, math.log(n + 1))
    p.bc_weight.data = rng.split("b").normal((d, 2 * n), std=0.5)
    p.dt_down.data = rng.split("c").normal((d, p.dt_rank), std=0.5)
    p.dt_up.data = rng.split("d").normal((p.dt_rank, d), std=0.5)
    if p.skip is not None:
        p.skip.data = rng.split("e").normal((d,), std=1.0)
    return p


def check_zoh_scalar(seed: int) -> tuple[bool, str]:
    ld = np.longdouble
    a_bar, b_bar = zoh_discretize(-1.0, 1.0, 0.1)
    ref_a = float(np.exp(ld(-0.1)))
    ref_b = float((np.exp(ld(-0.1)) - 1.0) / ld(-0.1) * ld(0.1))
    err = max(abs(float(a_bar) - ref_a), abs(float(b_bar) - ref_b))
    if err > 1e-14:
        return False, f"scalar case err={err:.3e}"
    a_bar, b_bar = zoh_discretize(0.0, 1.0, 0.1)
    if abs(float(a_bar) - 1.0) > 1e-15 or abs(float(b_bar) - 0.1) > 1e-15:
        return False, f"A=0 limit broken: {float(a_bar)}, {float(b_bar)}"
    a_bar, b_bar = zoh_discretize(-1.0, 1.0, 1e-12)
    if abs(float(a_bar) - 1.0) > 1e-9 or abs(float(b_bar) - 1e-12) > 1e-21:
        return False, "delta->0 limit broken"
    try:
        zoh_discretize(-1.0, 1.0, 0.0)
        return False, "delta=0 accepted"
    except ssm_mod.DomainError:
        pass
    return True, "scalar oracle, limits, domain"


def check_scan_vs_naive(seed: int) -> tuple[bool, str]:
    rng = Rng(seed)
    worst = 0.0
    for case in range(20):
        r = rng.split(case)
        d = int(r.split("d").integers(1, 5))
        n = int(r.split("n").integers(1, 9))
        length = int(r.split("l").integers(1, 11))
        b = int(r.split("b").integers(1, 3))
        p = _random_ssm(r.split("p"), d, n)
        x = r.split("x").normal((b, length, d), std=1.0)
        got = selective_scan(Tensor(x), p).data
        want = naive_selective_scan(x, p)
        worst = max(worst, float(np.abs(got - want).max()))
    return worst < 1e-10, f"max |fused - naive| = {worst:.3e} over 20 cases"


def check_scan_vs_ode(seed: int) -> tuple[bool, str]:
    rng = Rng(seed)
    worst = 0.0
    for case in range(10):
        r = rng.split(case)
        d = int(r.split("d").integers(1, 4))
        n = int(r.split("n").integers(1, 6))
        length = int(r.split("l").integers(1, 8))
        p = _random_ssm(r.split("p"), d, n, use_skip=False)
        x = r.split("x").normal((1, length, d), std=1.0)
        got = selective_scan(Tensor(x), p).data
        want = ode_oracle(Tensor(x), p, substeps=64).data
        worst = max(worst, float(np.abs(got - want).max()))
    return worst < 1e-6, f"max |scan - rk4| = {worst:.3e} over 10 cases"


def check_scan_stability(seed: int) -> tuple[bool, str]:
    rng = Rng(seed)
    p = _random_ssm(rng.split("p"), 4, 8)
    x = rng.split("x").normal((2, 40, 4), std=2.0)
    states = naive_scan_states(x, p)
    # Geometric-series bound from the realized per-step quantities.
    xs = np.asarray(x)
    a_log = p.a_log.data
    down, up, bias = p.dt_down.data, p.dt_up.data, p.dt_bias.data
    delta = np.logaddexp(0.0, xs @ down @ up + bias)
    z = delta[..., None] * (-np.exp(a_log))
    abar_max = float(np.exp(z).max())
    bt = xs @ p.bc_weight.data[:, : p.d_state]
    phi = np.where(np.abs(z) < 1e-6, 1.0 + 0.5 * z, np.expm1(z) / np.where(z == 0, 1.0, z))
    bx = phi * delta[..., None] * bt[:, :, None, :] * xs[..., None]
    bound = float(np.abs(bx).max()) / (1.0 - abar_max)
    peak = float(np.abs(states).max())
    return peak <= bound * (1 + 1e-12), f"max |h| = {peak:.4f} <= bound {bound:.4f}"


def check_scan_causality(seed: int) -> tuple[bool, str]:
    rng = Rng(seed)
    p = _random_ssm(rng.split("p"), 3, 4)
    x = rng.split("x").normal((1, 9, 3), std=1.0)
    y1 = selective_scan(Tensor(x.copy()), p).data
    x2 = x.copy()
    x2[0, 5] += 1.0
    y2 = selective_scan(Tensor(x2), p).data
    prefix_same = np.array_equal(y1[:, :5], y2[:, :5])
    suffix_diff = not np.array_equal(y1[:, 5:], y2[:, 5:])
    return prefix_same and suffix_diff, "prefix bit-unchanged, suffix responds"


def check_permutations(seed: int) -> tuple[bool, str]:
    for h in range(1, 9):
        for w in range(1, 9):
            lr = scan_permutation(ScanDirection.LR, h, w)
            rl = scan_permutation(ScanDirection.RL, h, w)
            tb = scan_permutation(ScanDirection.TB, h, w)
            bt = scan_permutation(ScanDirection.BT, h, w)
            expected_lr = np.arange(h * w)
            expected_tb = np.array([r * w + c for c in range(w) for r in range(h)])
            if not np.array_equal(lr.forward, expected_lr):
                return False, f"LR wrong at {h}x{w}"
            if not np.array_equal(tb.forward, expected_tb):
                return False, f"TB wrong at {h}x{w}"
            if not np.array_equal(rl.forward, expected_lr[::-1]):
                return False, f"RL is not reversed LR at {h}x{w}"
            if not np.array_equal(bt.forward, expected_tb[::-1]):
                return False, f"BT is not reversed TB at {h}x{w}"
            for p in (lr, rl, tb, bt):
                if not np.array_equal(p.forward[p.inverse], np.arange(h * w)):
                    return False, f"{p.direction} not a bijection at {h}x{w}"
                if not np.array_equal(p.inverse[p.forward], np.arange(h * w)):
                    return False, f"{p.direction} inverse wrong at {h}x{w}"
    return True, "all H, W <= 8 exhaustively"


def check_grad_scan(seed: int) -> tuple[bool, str]:
    rng = Rng(seed)
    p = _random_ssm(rng.split("p"), 3, 4)
    x = parameter(rng.split("x").normal((1, 6, 3), std=1.0), dtype=np.float64)
    weights = parameter(rng.split("w").normal((1, 6, 3), std=1.0), dtype=np.float64)

    def f():
        return (selective_scan(x, p) * weights).sum()

    report = grad_check(f, [("x", x), *p.params()], eps=1e-5, samples_per_param=4, seed=seed)
    return report.ok(1e-4), f"max rel err {report.max_rel_error:.3e}"


def check_grad_vsss(seed: int) -> tuple[bool, str]:
    rng = Rng(seed)
    p = VsssParams.create(8, rng.split("p"), dtype=np.float64)
    x = parameter(rng.split("x").normal((1, 16, 8), std=1.0), dtype=np.float64)
    weights = rng.split("w").normal((1, 16, 8), std=1.0)

    def f():
        return (vsss_forward(x, p) * Tensor(weights)).sum()

    report = grad_check(f, [("x", x), *p.params()], eps=1e-5, samples_per_param=3, seed=seed)
    return report.ok(1e-4), f"max rel err {report.max_rel_error:.3e}"


def check_grad_micro(seed: int) -> tuple[bool, str]:
    rng = Rng(seed)
    model = build(micro_config(), rng.split("m"), dtype=np.float64)
    x = rng.split("x").uniform((1, 32, 32, 3))
    labels = np.array([3])

    def f():
        return cross_entropy(forward(model, x), labels, smoothing=0.1)

    report = grad_check(f, model.named_params(), eps=1e-5, samples_per_param=1, seed=seed)
    return report.ok(1e-4), f"max rel err {report.max_rel_error:.3e} over {len(report.rel_errors)} buffers"


def check_loss_identities(seed: int) -> tuple[bool, str]:
    rng = Rng(seed)
    k = 7
    uniform = Tensor(np.zeros((3, k)))
    ce = cross_entropy(uniform, np.array([0, 3, 6]))
    if abs(ce.item() - math.log(k)) > 1e-12:
        return False, f"uniform CE {ce.item()} != ln {k}"
    zs = Tensor(rng.split("s").normal((4, 5), std=2.0))
    zt = rng.split("t").normal((4, 5), std=2.0)
    y = rng.split("y").integers(0, 5, (4,))
    l0 = distilled_loss(DistillLossInput(zs, zt, y, 0.0)).item()
    l1 = distilled_loss(DistillLossInput(zs, zt, y, 1.0)).item()
    for alpha in (0.0, 0.25, 0.5, 0.75, 1.0):
        la = distilled_loss(DistillLossInput(zs, zt, y, alpha)).item()
        if abs(la - (alpha * l1 + (1 - alpha) * l0)) > 1e-12:
            return False, f"linearity broken at alpha={alpha}"
    s = Tensor(np.array([[1.0, 0.0]]))
    t = np.array([[0.0, 2.0]])
    val = distilled_loss(DistillLossInput(s, t, np.array([0]), 0.5)).item()
    want = 0.5 * math.log(1 + math.exp(-1)) + 0.5 * math.log(1 + math.exp(1))
    if abs(val - want) > 1e-12:
        return False, f"hand case {val} != {want}"
    return True, "uniform CE, alpha linearity, hand value"


def check_param_accounting(seed: int) -> tuple[bool, str]:
    cfg = micro_config()
    model = build(cfg, Rng(seed))
    closed = count_params(cfg)["total"]
    brute = model.param_count()
    if closed != brute:
        return False, f"micro closed-form {closed} != enumerated {brute}"
    return True, f"micro: {closed} parameters, closed-form == enumeration"


def check_flop_accounting(seed: int) -> tuple[bool, str]:
    cfg = micro_config()
    model = build(cfg, Rng(seed))
    x = Rng(seed).split("x").uniform((1, 32, 32, 3))
    with count_macs() as counter:
        forward(model, x)
    analytic = count_flops(cfg, 32, 32)["macs"]
    if counter.macs != analytic:
        return False, f"instrumented {counter.macs} != analytic {analytic}"
    return True, f"micro @32x32: {analytic} MACs, instrumented == analytic"


def check_layer_shapes(seed: int) -> tuple[bool, str]:
    rng = Rng(seed)
    for c in (4, 8, 16):
        p = GroupMambaLayerParams.create(c, rng.split(f"p{c}"), dtype=np.float64)
        x = Tensor(rng.split(f"x{c}").normal((2, 4, 6, c), std=1.0))
        out = modulated_group_mamba(x, p)
        if out.shape != x.shape:
            return False, f"shape {out.shape} != {x.shape} at C={c}"
        aff = affinity(x, p.cam).data
        if not ((aff > 0) & (aff < 1)).all():
            return False, "affinity escaped (0, 1)"
        same = cam_modulate(Tensor(x.data), Tensor(np.ones_like(aff))).data
        if not np.array_equal(same, x.data):
            return False, "unit affinity is not identity"
    return True, "shape preservation and affinity range at C in {4, 8, 16}"


CHECKS = [
    ("zoh_scalar_oracle", check_zoh_scalar),
    ("scan_vs_naive_recurrence", check_scan_vs_naive),
    ("scan_vs_rk4_ode", check_scan_vs_ode),
    ("scan_stability_bound", check_scan_stability),
    ("scan_causality", check_scan_causality),
    ("scan_permutations_exhaustive", check_permutations),
    ("grad_selective_scan", check_grad_scan),
    ("grad_vsss_block", check_grad_vsss),
    ("grad_full_micro_model", check_grad_micro),
    ("loss_identities", check_loss_identities),
    ("param_count_closed_form", check_param_accounting),
    ("flop_count_instrumented", check_flop_accounting),
    ("layer_shapes_and_affinity", check_layer_shapes),
]


def run_checks(seed: int = 0, fault: str | None = None, emit=print) -> int:
    """Run every check; returns 0 on success, 1 if any failed."""
    set_fault(fault)
    failures = 0
    try:
        for name, fn in CHECKS:
            t0 = time.perf_counter()
            try:
                ok, detail = fn(seed)
            except Exception as exc:  # noqa: BLE001 - report, don't crash the suite
                ok, detail = False, f"raised {type(exc).__name__}: {exc}"
            dt = time.perf_counter() - t0
            emit(f"{'PASS' if ok else 'FAIL'} {name} ({detail}) [{dt:.2f}s]")
            failures += 0 if ok else 1
    finally:
        set_fault(None)
    emit(f"{len(CHECKS) - failures}/{len(CHECKS)} checks passed")
    return 0 if failures == 0 else 1
