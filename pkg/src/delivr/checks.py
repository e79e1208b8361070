"""Executable property suites behind ``delivr check``.

Each suite returns a list of :class:`CheckResult` holding the worst measured
error next to its tolerance, so a report line reads the same whether it
passes or not.
"""
from __future__ import annotations

import math
import time
from dataclasses import dataclass

import numpy as np

from . import so2
from .bias import BiasParams, build_bias_stack, fused_bounds, to_tokens
from .coords import build_grid


@dataclass
class CheckResult:
    name: str
    error: float
    tol: float
    seconds: float = 0.0

    @property
    def passed(self) -> bool:
        return bool(np.isfinite(self.error)) and self.error <= self.tol

    def line(self) -> str:
        tag = "PASS" if self.passed else "FAIL"
        return f"{tag} {self.name}: error={self.error:.3e} tol={self.tol:.1e} ({self.seconds:.2f}s)"


def _timed(name, tol, fn):
    t0 = time.perf_counter()
    err = float(fn())
    return CheckResult(name, err, tol, time.perf_counter() - t0)


# -- group law ----------------------------------------------------------------

def group_suite(seed: int = 0, n: int = 10_000) -> list:
    rng = np.random.default_rng(seed)
    lo, hi = -math.pi + 1e-6, math.pi - 1e-6
    th = rng.uniform(lo, hi, n)
    a, b, c = (rng.uniform(lo, hi, 1000) for _ in range(3))

    def round_trip():
        return max(abs(so2.log_so2(so2.exp_so2(t).matrix) - t) for t in th)

    def homomorphism():
        return max(np.abs(so2.exp_so2(x).matrix @ so2.exp_so2(y).matrix
                          - so2.exp_so2(so2.wrap_angle(x + y)).matrix).max() for x, y in zip(a, b))

    def displacement():
        worst = 0.0
        for x, y, z in zip(a, b, c):
            Rx, Ry, Rz = so2.Rotation2(x), so2.Rotation2(y), so2.Rotation2(z)
            tab = so2.log_so2(Rx.matrix.T @ Ry.matrix)
            tbc = so2.log_so2(Ry.matrix.T @ Rz.matrix)
            worst = max(worst, abs(so2.angular_diff(Rx, Rz) - abs(so2.wrap_angle(tab + tbc))))
        return worst

    def validity():
        worst = 0.0
        for w in rng.normal(0, 5, n):
            R = so2.exp_so2(so2.bounded_angle(w, 0.35)).matrix
            worst = max(worst, np.abs(R.T @ R - np.eye(2)).max(), abs(np.linalg.det(R) - 1.0))
        return worst

    return [
        _timed("exp/log round trip", 1e-12, round_trip),
        _timed("homomorphism", 1e-12, homomorphism),
        _timed("displacement consistency", 1e-12, displacement),
        _timed("rotation validity", 1e-12, validity),
    ]


# -- gradients ----------------------------------------------------------------

def _grad_fixture(seed):
    from .config import BiasConfig, ModelConfig
    from .model import DelivrModel

    rng = np.random.default_rng([seed, 7])
    cfg = ModelConfig(frames=3, patch_size=4, width=8, heads=2, layers=1, dtype="float64",
                      theta_max=0.35, ablation="full")
    model = DelivrModel(cfg, BiasConfig(alpha=1.0, kappa=0.5, tau=1.5, delta=1), (8, 8, 1), seed=seed)
    for p in model.params.values():
        p.data = p.data + rng.normal(0, 0.1, p.shape)
    # an active head so the tanh/exp-map path carries gradient
    model.params["head.w2"].data = rng.normal(0, 2.0, model.params["head.w2"].shape)
    clip = rng.uniform(0, 1, (2, 3, 8, 8, 1))
    # frame-dependent tilt so the head sees clearly different frames
    tilt = np.linspace(-1, 1, 8)[None, :, None] * (np.arange(3) - 1.0)[:, None, None, None]
    clip = clip + 0.5 * tilt * np.array([1.0, -0.7])[:, None, None, None, None]
    target = rng.uniform(0, 1, (2, 8, 8, 1))
    return model, clip, target


def _loss_value(model, clip, target, omega=None):
    from .engine import no_grad
    from .trainer import loss_tensor
    with no_grad():
        res = model.forward(clip, omega_override=omega)
        return float(loss_tensor(res, target, 0.02, 0.02, 0.5)[0].item())


def grad_suite_error(seed: int = 0, n_samples: int = 120, h: float = 1e-6):
    """Max relative error of backprop vs central differences over the full loss.

    Parameters are sampled from every tensor (head included). The omega leaf is
    checked too by driving the head output through ``omega_override``.
    Returns ``(max_rel_err, n_checked)``.
    """
    from .engine import Tensor
    from .trainer import loss_tensor

    model, clip, target = _grad_fixture(seed)
    res = model.forward(clip)
    ang = res.angles.data
    diffs = np.abs(ang[:, :, None] - ang[:, None, :])[:, ~np.eye(3, dtype=bool)]
    vdiff = np.abs(np.diff(np.abs(np.diff(ang, axis=1)), axis=1))
    if diffs.min() < 1e-3 or vdiff.min() < 1e-3:
        raise RuntimeError("gradient fixture sits too close to an |.| kink; pick another seed")
    loss, _ = loss_tensor(res, target, 0.02, 0.02, 0.5)
    loss.backward()

    rng = np.random.default_rng([seed, 11])
    names = list(model.params)
    picks = [(nm, tuple(rng.integers(0, s) for s in model.params[nm].shape)) for nm in names]
    while len(picks) < n_samples:
        nm = names[rng.integers(len(names))]
        picks.append((nm, tuple(rng.integers(0, s) for s in model.params[nm].shape)))

    def rel(a, n):
        return abs(a - n) / max(abs(a), abs(n), 1e-6)

    worst = 0.0
    for nm, idx in picks:
        p = model.params[nm].data
        old = p[idx]
        p[idx] = old + h
        fp = _loss_value(model, clip, target)
        p[idx] = old - h
        fm = _loss_value(model, clip, target)
        p[idx] = old
        worst = max(worst, rel(float(model.params[nm].grad[idx]), (fp - fm) / (2 * h)))

    omega = Tensor(res.omega.data.copy(), requires_grad=True)
    out = model.forward(clip, omega_override=omega)
    loss_tensor(out, target, 0.02, 0.02, 0.5)[0].backward()
    for idx in np.ndindex(omega.shape):
        w = omega.data.copy()
        w[idx] += h
        fp = _loss_value(model, clip, target, Tensor(w))
        w[idx] -= 2 * h
        fm = _loss_value(model, clip, target, Tensor(w))
        worst = max(worst, rel(float(omega.grad[idx]), (fp - fm) / (2 * h)))
    return worst, len(picks) + omega.size


def grad_suite(seed: int = 0) -> list:
    t0 = time.perf_counter()
    err, n = grad_suite_error(seed)
    return [CheckResult(f"full-forward gradient ({n} entries, float64)", err, 1e-4,
                        time.perf_counter() - t0)]


# -- bias ---------------------------------------------------------------------

def bias_suite(seed: int = 0, n_configs: int = 20) -> list:
    rng = np.random.default_rng(seed)
    worst = dict(sym=0.0, bounds=0.0, invariance=0.0, structure=0.0, constancy=0.0, band=0.0)
    t0 = time.perf_counter()
    for _ in range(n_configs):
        T = int(rng.integers(1, 7))
        grid = build_grid((int(rng.integers(1, 5)), int(rng.integers(1, 5))), float(rng.uniform(0.2, 2)))
        N = grid.n_tokens
        p = BiasParams(alpha=float(rng.uniform(0, 3)), kappa=float(rng.uniform(0.2, 4)),
                       tau=float(rng.uniform(0.3, 5)), delta=int(rng.integers(0, T + 1)))
        ang = rng.uniform(-math.pi, math.pi, T)
        s = build_bias_stack(grid, ang, p)
        for m in s.matrices().values():
            worst["sym"] = max(worst["sym"], np.abs(m - m.T).max())
        lo, hi = fused_bounds(p.alpha, p.kappa)
        ok = ~s.blocked
        over = max(np.abs(s.b_space).max() - 1.0,
                   lo - s.b_total[ok].min() if ok.any() else 0.0,
                   s.b_total[ok].max() - hi if ok.any() else 0.0, 0.0)
        worst["bounds"] = max(worst["bounds"], over)
        s2 = build_bias_stack(grid, ang + rng.uniform(-math.pi, math.pi), p)
        worst["invariance"] = max(worst["invariance"], np.abs(s2.b_space - s.b_space).max(),
                                  np.abs(s2.b_time - s.b_time).max())
        structural = max(np.abs(np.diag(s.b_time)).max(), max(s.b_time.max(), 0.0),
                         np.abs(np.diag(s.decay) - 1).max(), float(np.any(s.decay <= 0)),
                         float(np.any((s.mask != 0) & (s.mask != 1))))
        worst["structure"] = max(worst["structure"], structural)
        add = s.b_total - s.b_space * to_tokens(s.decay * s.mask, N)
        blocks = add.reshape(T, N, T, N)
        worst["constancy"] = max(worst["constancy"], np.ptp(blocks, axis=(1, 3)).max())
        s0 = build_bias_stack(grid, ang, BiasParams(delta=0))
        worst["band"] = max(worst["band"], abs(int(s0.blocked.sum()) - T * (T - 1) * N * N))
    dt = (time.perf_counter() - t0) / 6
    return [
        CheckResult("bias symmetry", worst["sym"], 1e-12, dt),
        CheckResult("b_space / fused bounds", worst["bounds"], 1e-12, dt),
        CheckResult("global-rotation invariance", worst["invariance"], 1e-9, dt),
        CheckResult("b_time / decay / mask structure", worst["structure"], 0.0, dt),
        CheckResult("fused block constancy", worst["constancy"], 1e-12, dt),
        CheckResult("delta=0 blocked-pair count", worst["band"], 0.0, dt),
    ]


SUITES = {"group": group_suite, "grad": grad_suite, "bias": bias_suite}


def run(suite: str = "all", seed: int = 0, out=print) -> bool:
    names = list(SUITES) if suite == "all" else [suite]
    ok = True
    for name in names:
        for res in SUITES[name](seed):
            out(res.line())
            ok &= res.passed
    return ok
