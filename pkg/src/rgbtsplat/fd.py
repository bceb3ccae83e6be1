"""Central finite differences over named parameter arrays.

Used by the gradcheck command and throughout the test suite to validate
every hand-derived backward map. All checks run in float64 with the step
fixed at 1e-4; the pass rule is

    |analytic - fd| <= abs_floor + rel_tol * max(|analytic|, |fd|)

with a small absolute floor that sits well above central-difference
rounding noise (~1e-12 of the loss scale) and well below real gradients.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

FD_STEP = 1e-4
ABS_FLOOR = 1e-9


def central_diff(fn, arr: np.ndarray, step: float = FD_STEP) -> np.ndarray:
    """Gradient of the scalar fn(arr) by central differences, elementwise."""
    grad = np.zeros_like(arr, dtype=np.float64)
    flat = arr.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + step
        f_plus = fn()
        flat[i] = orig - step
        f_minus = fn()
        flat[i] = orig
        gflat[i] = (f_plus - f_minus) / (2.0 * step)
    return grad


@dataclass
class CheckResult:
    name: str
    max_abs_err: float
    max_rel_err: float
    worst_index: int
    n_checked: int
    passed: bool

    def __str__(self) -> str:
        status = "ok" if self.passed else "FAIL"
        return (f"{status:4s} {self.name:28s} n={self.n_checked:<6d} "
                f"max_rel={self.max_rel_err:.3e} max_abs={self.max_abs_err:.3e}")


def compare_grads(name: str, analytic: np.ndarray, fd: np.ndarray,
                  rel_tol: float, abs_floor: float = ABS_FLOOR) -> CheckResult:
    a = np.asarray(analytic, dtype=np.float64).reshape(-1)
    f = np.asarray(fd, dtype=np.float64).reshape(-1)
    if a.shape != f.shape:
        raise ValueError(f"{name}: gradient shape mismatch {a.shape} vs {f.shape}")
    diff = np.abs(a - f)
    denom = np.maximum(np.abs(a), np.abs(f))
    # elementwise pass; rel err only meaningful above the absolute floor
    ok = diff <= abs_floor + rel_tol * denom
    rel = np.where(denom > 0, diff / np.maximum(denom, 1e-300), 0.0)
    meaningful = diff > abs_floor
    rel_masked = np.where(meaningful, rel, 0.0)
    worst = int(np.argmax(rel_masked)) if a.size else 0
    return CheckResult(name=name,
                       max_abs_err=float(diff.max()) if a.size else 0.0,
                       max_rel_err=float(rel_masked.max()) if a.size else 0.0,
                       worst_index=worst,
                       n_checked=int(a.size),
                       passed=bool(np.all(ok)))


def check_gradients(loss_fn, params: dict[str, np.ndarray],
                    analytic: dict[str, np.ndarray], rel_tol: float,
                    step: float = FD_STEP,
                    abs_floor: float = ABS_FLOOR) -> list[CheckResult]:
    """FD-check dL/dp for every named array in params against analytic.

    loss_fn takes no arguments and must read the (mutated in place) arrays.
    """
    results = []
    for name, arr in params.items():
        if name not in analytic:
            raise KeyError(f"no analytic gradient supplied for {name}")
        fd = central_diff(loss_fn, arr, step=step)
        results.append(compare_grads(name, analytic[name], fd, rel_tol, abs_floor))
    return results
