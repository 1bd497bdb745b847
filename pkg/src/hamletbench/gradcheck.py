"""Central finite-difference gradient verification harness.

Runs in float64.  Failures are reported, never raised, so negative tests can
inspect the report.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .tensor import Tape, Tensor, backward


@dataclass
class GradCheckReport:
    max_rel_err: float
    failing: list = field(default_factory=list)  # (coord index, analytic, numeric)
    tol: float = 1e-4

    @property
    def passed(self) -> bool:
        return self.max_rel_err < self.tol


def grad_check(fn, point: np.ndarray, h: float = 1e-5, tol: float = 1e-4) -> GradCheckReport:
    """Compare fn's analytic gradient at ``point`` against central differences.

    ``fn`` maps a Tensor to a scalar Tensor. ``point`` is flattened coordinate
    by coordinate; relative error uses max(|analytic|, |numeric|, 1e-6) as the
    denominator so near-zero coordinates compare on an absolute scale.
    """
    x64 = np.asarray(point, dtype=np.float64)
    p = Tensor(x64.copy(), requires_grad=True)
    with Tape() as tape:
        loss = fn(p)
    backward(loss, tape)
    analytic = p.grad.copy() if p.grad is not None else np.zeros_like(x64)

    numeric = np.zeros_like(x64)
    flat = x64.reshape(-1)
    nflat = numeric.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = fn(Tensor(x64.copy())).item()
        flat[i] = orig - h
        fm = fn(Tensor(x64.copy())).item()
        flat[i] = orig
        nflat[i] = (fp - fm) / (2.0 * h)

    a = analytic.reshape(-1)
    n = numeric.reshape(-1)
    denom = np.maximum(np.maximum(np.abs(a), np.abs(n)), 1e-6)
    rel = np.abs(a - n) / denom
    failing = [(int(i), float(a[i]), float(n[i])) for i in np.nonzero(rel >= tol)[0]]
    return GradCheckReport(max_rel_err=float(rel.max()) if rel.size else 0.0,
                           failing=failing, tol=tol)


def grad_check_params(build_loss, params: dict[str, Tensor], h: float = 1e-5,
                      tol: float = 1e-3) -> dict[str, GradCheckReport]:
    """grad_check over every tensor in ``params`` w.r.t. a shared loss.

    ``build_loss()`` must rebuild the forward pass from the current parameter
    data each call (parameters are perturbed in place).
    """
    with Tape() as tape:
        loss = build_loss()
    backward(loss, tape)
    analytic = {k: (t.grad.copy() if t.grad is not None else np.zeros_like(t.data))
                for k, t in params.items()}
    for t in params.values():
        t.grad = None

    reports = {}
    for key, t in params.items():
        flat = t.data.reshape(-1)
        numeric = np.zeros_like(flat)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            fp = build_loss().item()
            flat[i] = orig - h
            fm = build_loss().item()
            flat[i] = orig
            numeric[i] = (fp - fm) / (2.0 * h)
        a = analytic[key].reshape(-1)
        denom = np.maximum(np.maximum(np.abs(a), np.abs(numeric)), 1e-6)
        rel = np.abs(a - numeric) / denom
        failing = [(int(i), float(a[i]), float(numeric[i]))
                   for i in np.nonzero(rel >= tol)[0]]
        reports[key] = GradCheckReport(max_rel_err=float(rel.max()) if rel.size else 0.0,
                                       failing=failing, tol=tol)
    return reports
