"""Memory banks and optimal-transport losses between the normal and abnormal feature populations."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
from torch import nn

from .errors import NumericError, ParameterError, ShapeError, StateError

CDC_KEYS = ("q_A", "q_B", "dis_A", "dis_B", "ot")


class MemoryBank(nn.Module):
    """Ring buffer of J detached pooled features with an EMA centroid."""

    def __init__(self, size: int = 64, dim: int = 32, omega: float = 0.01):
        super().__init__()
        if not 0.0 < omega <= 1.0:
            raise ParameterError(f"omega must lie in (0, 1], got {omega}")
        self.omega = omega
        self.register_buffer("rows", torch.zeros(size, dim))
        self.register_buffer("centroid", torch.zeros(dim))
        self.register_buffer("cursor", torch.zeros((), dtype=torch.long))
        self.register_buffer("fill", torch.zeros((), dtype=torch.long))

    @property
    def size(self) -> int:
        return self.rows.shape[0]

    @property
    def dim(self) -> int:
        return self.rows.shape[1]

    @torch.no_grad()
    def push(self, pooled: torch.Tensor) -> None:
        """Overwrite the oldest row with ``pooled`` (a d-vector, or B x d pushed in order)."""
        pooled = pooled.detach()
        if pooled.ndim == 1:
            pooled = pooled[None]
        if pooled.shape[1] != self.dim:
            raise ShapeError(f"bank holds {self.dim}-d features, got {pooled.shape[1]}")
        if not torch.isfinite(pooled).all():
            raise NumericError("non-finite feature pushed into memory bank")
        for v in pooled.to(self.rows.dtype):
            self.rows[self.cursor] = v
            if int(self.fill) == 0:
                self.centroid.copy_(v)
            else:
                self.centroid.copy_((1.0 - self.omega) * self.centroid + self.omega * v)
            self.cursor.fill_((int(self.cursor) + 1) % self.size)
            self.fill.fill_(min(int(self.fill) + 1, self.size))

    def valid_rows(self) -> torch.Tensor:
        return self.rows[: int(self.fill)]

    def recent_order(self) -> torch.Tensor:
        """Row indices from most to least recent push."""
        f = int(self.fill)
        return (int(self.cursor) - 1 - torch.arange(f)) % self.size if f == self.size else torch.arange(f - 1, -1, -1)

    def view_with(self, current: torch.Tensor) -> torch.Tensor:
        """Valid rows with the most recent ones replaced by ``current`` (gradient-carrying).

        ``current[-1]`` stands in for the newest stored row, ``current[-2]`` for the one before.
        """
        if current.ndim == 1:
            current = current[None]
        f = int(self.fill)
        b = min(current.shape[0], f)
        newest = self.recent_order()[:b]
        view = self.rows.detach().to(current.dtype).index_put((newest,), current.flip(0)[:b])
        return view[:f]


def sort_match(a, b):
    """Per-dimension monotone matching of two J x d sample sets.

    Returns ``(perm, cost)`` where ``perm[j, i]`` is the row of ``b`` matched to
    row ``j`` of ``a`` in dimension ``i``, and ``cost`` is the summed squared
    difference over all matched pairs. Torch inputs keep their graph (the
    permutation is treated as constant).
    """
    as_numpy = not isinstance(a, torch.Tensor)
    ta = torch.as_tensor(np.asarray(a, dtype=np.float64)) if as_numpy else a
    tb = torch.as_tensor(np.asarray(b, dtype=np.float64)) if not isinstance(b, torch.Tensor) else b
    if ta.ndim == 1:
        ta = ta[:, None]
    if tb.ndim == 1:
        tb = tb[:, None]
    if ta.shape != tb.shape:
        raise ShapeError(f"bank shapes differ: {tuple(ta.shape)} vs {tuple(tb.shape)}")
    sa, ia = torch.sort(ta, dim=0, stable=True)
    sb, ib = torch.sort(tb, dim=0, stable=True)
    cost = ((sa - sb) ** 2).sum()
    perm = torch.empty_like(ia)
    perm.scatter_(0, ia, ib)
    if as_numpy:
        return perm.numpy(), float(cost)
    return perm, cost


@dataclass
class TransportPlan:
    plan: np.ndarray
    cost: float
    marginal_error: float
    converged: bool
    iterations: int


def _lse(x: np.ndarray, axis: int) -> np.ndarray:
    m = x.max(axis=axis, keepdims=True)
    return (m + np.log(np.exp(x - m).sum(axis=axis, keepdims=True))).squeeze(axis)


def _sinkhorn_sweeps(c, log_a, log_b, eps, f, g, max_iters, tol, check_every=10):
    err = np.inf
    it = 0
    for it in range(1, max_iters + 1):
        f = eps * (log_a - _lse((g[None, :] - c) / eps, axis=1))
        g = eps * (log_b - _lse((f[:, None] - c) / eps, axis=0))
        if it % check_every == 0 or it == max_iters:
            if not (np.all(np.isfinite(f)) and np.all(np.isfinite(g))):
                raise NumericError("Sinkhorn scaling produced non-finite potentials")
            # columns are exact after the g-step; rows carry the residual
            row = np.exp(_lse((f[:, None] + g[None, :] - c) / eps, axis=1))
            err = float(np.abs(row - np.exp(log_a)).max())
            if err <= tol:
                break
    return f, g, it, err


def sinkhorn(cost_matrix, a=None, b=None, eps: float = 0.05, max_iters: int = 200, tol: float = 1e-6,
             eps_scaling: bool = True) -> TransportPlan:
    """Log-domain Sinkhorn for entropic OT between marginals ``a`` and ``b``.

    With ``eps_scaling`` the potentials are warm-started by a halving schedule
    from the largest cost down to ``eps``; every sweep counts toward ``max_iters``.
    """
    c = np.asarray(cost_matrix, dtype=np.float64)
    if c.ndim != 2:
        raise ShapeError("cost matrix must be 2-D")
    n, m = c.shape
    a = np.full(n, 1.0 / n) if a is None else np.asarray(a, dtype=np.float64)
    b = np.full(m, 1.0 / m) if b is None else np.asarray(b, dtype=np.float64)
    if eps <= 0:
        raise ParameterError("eps must be positive")
    if a.shape != (n,) or b.shape != (m,):
        raise ShapeError("marginals do not match the cost matrix")
    if np.any(a <= 0) or np.any(b <= 0) or abs(a.sum() - 1) > 1e-9 or abs(b.sum() - 1) > 1e-9:
        raise ParameterError("marginals must be positive and sum to 1")
    if not np.all(np.isfinite(c)):
        raise NumericError("cost matrix is not finite")

    log_a, log_b = np.log(a), np.log(b)
    f = np.zeros(n)
    g = np.zeros(m)
    used = 0
    stage_eps = float(c.max()) * 0.5 if eps_scaling else eps
    while eps_scaling and stage_eps > eps and used < max_iters:
        f, g, it, _ = _sinkhorn_sweeps(c, log_a, log_b, stage_eps, f, g, min(200, max_iters - used), tol)
        used += it
        stage_eps *= 0.5
    f, g, it, _ = _sinkhorn_sweeps(c, log_a, log_b, eps, f, g, max(max_iters - used, 1), tol)
    used += it
    plan = np.exp((f[:, None] + g[None, :] - c) / eps)
    if not np.all(np.isfinite(plan)):
        raise NumericError("Sinkhorn plan is not finite")
    err = max(float(np.abs(plan.sum(1) - a).max()), float(np.abs(plan.sum(0) - b).max()))
    return TransportPlan(plan=plan, cost=float((plan * c).sum()), marginal_error=err,
                         converged=err <= tol, iterations=used)


def sinkhorn_cost(a: torch.Tensor, b: torch.Tensor, eps: float = 0.05, max_iters: int = 200,
                  tol: float = 1e-9) -> torch.Tensor:
    """Per-dimension entropic counterpart of ``sort_match`` cost, differentiable in ``a`` and ``b``.

    Each dimension gets its own Sinkhorn plan on the squared-difference cost
    between the two columns; the plan is held constant and the loss is
    J times the plan-weighted cost (uniform marginals put mass 1/J per row).
    """
    if a.shape != b.shape:
        raise ShapeError(f"bank shapes differ: {tuple(a.shape)} vs {tuple(b.shape)}")
    j = a.shape[0]
    total = a.new_zeros(())
    for i in range(a.shape[1]):
        diff = (a[:, i][:, None] - b[:, i][None, :]) ** 2
        tp = sinkhorn(diff.detach().double().numpy(), eps=eps, max_iters=max_iters, tol=tol)
        total = total + j * (torch.as_tensor(tp.plan, dtype=a.dtype) * diff).sum()
    return total


def ot_loss(bank_a: MemoryBank, bank_b: MemoryBank, current_a: torch.Tensor, current_b: torch.Tensor,
            solver: str = "sort", eps: float = 0.05, max_iters: int = 200) -> torch.Tensor:
    """Transport distance between the two banks with current features substituted for their newest rows."""
    fill = min(int(bank_a.fill), int(bank_b.fill))
    if fill < 2:
        raise StateError(f"banks need at least 2 rows, have {int(bank_a.fill)} and {int(bank_b.fill)}")
    va = bank_a.view_with(current_a)
    vb = bank_b.view_with(current_b)
    # restrict to the most recent `fill` rows of each
    if va.shape[0] > fill:
        va = va[bank_a.recent_order()[:fill]]
    if vb.shape[0] > fill:
        vb = vb[bank_b.recent_order()[:fill]]
    if solver == "sort":
        return sort_match(va, vb)[1]
    if solver == "sinkhorn":
        return sinkhorn_cost(va, vb, eps=eps, max_iters=max_iters)
    raise ParameterError(f"unknown OT solver {solver!r}")


def dis_loss(pooled: torch.Tensor, centroid: torch.Tensor) -> torch.Tensor:
    """Squared distance to the (detached) bank centroid, averaged over a leading batch axis."""
    if pooled.shape[-1] != centroid.shape[-1]:
        raise ShapeError(f"pooled dim {pooled.shape[-1]} vs centroid dim {centroid.shape[-1]}")
    return ((pooled - centroid.detach().to(pooled.dtype)) ** 2).sum(-1).mean()


def hinge(ot: torch.Tensor | float, margin: float):
    if isinstance(ot, torch.Tensor):
        return torch.clamp(margin - ot, min=0.0)
    return max(0.0, margin - ot)


def cdc_loss(q_a, q_b, dis_a, dis_b, ot, w_ot: float = 1.0, margin: float = 10.0):
    """Combine the codebook losses of both directions.

    ``ot`` may be None when the banks are not yet filled; the separation term
    is then skipped and reported as absent (NaN). Returns ``(total, report)``.
    """
    if any(t is None for t in (q_a, q_b, dis_a, dis_b)):
        raise StateError("codebook loss needs both the normal and the abnormal direction")
    total = q_a + q_b + dis_a + dis_b
    if ot is not None:
        total = total + w_ot * hinge(ot, margin)
    val = lambda t: float(t.detach()) if isinstance(t, torch.Tensor) else float(t)
    report = {
        "q_A": val(q_a), "q_B": val(q_b), "dis_A": val(dis_a), "dis_B": val(dis_b),
        "ot": val(ot) if ot is not None else float("nan"),
    }
    return total, report
