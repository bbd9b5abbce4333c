"""Minibatch optimal-transport distances between chunked feature embeddings.

Batches are ``(N, L)`` torch tensors (N vectors of length L).  The cost is
cosine distance, the soft matching comes from log-domain Sinkhorn (compiled
kernel, see :mod:`clotvc.kernels`), and the distance is ``Tr[M C^T]``.
By default the plan is a constant for autograd, so gradients reach the
embeddings only through the cost matrix.
"""

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from . import kernels

NORM_EPS = 1e-8
N_CHUNKS = 4


@dataclass(frozen=True)
class SinkhornConfig:
    reg: float = 0.1
    max_iters: int = 200
    marginal_tol: float = 1e-6
    # over-relaxation factor for the potential updates; 1.0 is plain Sinkhorn
    relaxation: float = 1.0
    grad_mode: str = "fixed_plan"

    def __post_init__(self):
        if self.reg <= 0:
            raise ValueError("reg must be positive")
        if self.max_iters < 1:
            raise ValueError("max_iters must be >= 1")
        if not 0 < self.relaxation < 2:
            raise ValueError("relaxation must lie in (0, 2)")
        if self.grad_mode not in ("fixed_plan", "unrolled"):
            raise ValueError(f"unknown grad_mode {self.grad_mode!r}")


@dataclass
class TransportPlan:
    M: np.ndarray
    n_iter: int
    marginal_error: float
    converged: bool


@dataclass
class SinkhornStats:
    """Accumulates solver calls and iterations across one training step."""

    calls: int = 0
    iterations: int = 0
    unconverged: int = 0
    dumps: list = field(default_factory=list)

    def record(self, plan):
        self.calls += 1
        self.iterations += plan.n_iter
        self.unconverged += int(not plan.converged)


def chunk_embedding(e, n_chunks=N_CHUNKS):
    """Split a flat embedding into ``n_chunks`` contiguous equal vectors."""
    e = torch.as_tensor(e).reshape(-1)
    if e.numel() % n_chunks:
        raise ValueError(f"embedding length {e.numel()} not divisible by {n_chunks}")
    return e.reshape(n_chunks, -1)


def cosine_cost(A, B, eps=NORM_EPS):
    A = torch.as_tensor(A)
    B = torch.as_tensor(B)
    if A.shape[-1] != B.shape[-1]:
        raise ValueError(f"vector lengths differ: {A.shape[-1]} vs {B.shape[-1]}")
    An = A / A.norm(dim=-1, keepdim=True).clamp_min(eps)
    Bn = B / B.norm(dim=-1, keepdim=True).clamp_min(eps)
    return (1.0 - An @ Bn.T).clamp(0.0, 2.0)


def sinkhorn_plan(C, cfg=SinkhornConfig()):
    C = C.detach().cpu().double().numpy() if torch.is_tensor(C) else np.asarray(C, dtype=np.float64)
    if not np.all(np.isfinite(C)):
        raise ValueError("cost matrix contains non-finite entries")
    M, n_iter, err, ok = kernels.sinkhorn_log(C, cfg.reg, cfg.max_iters, cfg.marginal_tol, cfg.relaxation)
    return TransportPlan(M, int(n_iter), float(err), bool(ok))


def _sinkhorn_torch(C, cfg):
    """Differentiable log-domain Sinkhorn (used by ``grad_mode='unrolled'``)."""
    n, m = C.shape
    log_a = -torch.log(torch.tensor(float(n), dtype=C.dtype))
    log_b = -torch.log(torch.tensor(float(m), dtype=C.dtype))
    f = C.new_zeros(n)
    g = C.new_zeros(m)
    for _ in range(cfg.max_iters):
        f = cfg.reg * log_a - cfg.reg * torch.logsumexp((g[None, :] - C) / cfg.reg, dim=1)
        g = cfg.reg * log_b - cfg.reg * torch.logsumexp((f[:, None] - C) / cfg.reg, dim=0)
    return torch.exp((f[:, None] + g[None, :] - C) / cfg.reg)


def ot_distance(A, B, cfg=SinkhornConfig(), stats=None, dump_path=None):
    """``W_c(A, B) = Tr[M C^T]`` with M the Sinkhorn soft matching."""
    C = cosine_cost(A, B)
    if cfg.grad_mode == "unrolled":
        M = _sinkhorn_torch(C, cfg)
        if stats is not None:
            stats.calls += 1
            stats.iterations += cfg.max_iters
    else:
        plan = sinkhorn_plan(C, cfg)
        if stats is not None:
            stats.record(plan)
        M = torch.as_tensor(plan.M, dtype=C.dtype, device=C.device)
    if dump_path is not None:
        dump_matrices(C, M, dump_path)
    return torch.sum(M * C)


def dump_matrices(C, M, path):
    """Write a cost/plan pair as JSON text for inspection."""
    rec = {
        "cost": C.detach().cpu().double().tolist(),
        "plan": torch.as_tensor(M).detach().cpu().double().tolist(),
    }
    with open(Path(path), "a") as fh:
        fh.write(json.dumps(rec) + "\n")


LOSS_FORMS = ("as_written", "symmetric")


def disc_ot_loss(X, X2, Y, Y2, cfg=SinkhornConfig(), form="as_written", stats=None):
    """Discriminator OT loss over real batches X, X2 and generated batches Y, Y2.

    ``as_written``:  W(X,X2) + W(X,Y2) + W(X2,Y) + W(X2,Y2) - 2W(X,X2) - 2W(Y,Y2)
    ``symmetric``:   W(X,Y)  + W(X,Y2) + W(X2,Y) + W(X2,Y2) - 2W(X,X2) - 2W(Y,Y2)
    """
    if form not in LOSS_FORMS:
        raise ValueError(f"form must be one of {LOSS_FORMS}")
    W = lambda a, b: ot_distance(a, b, cfg, stats)  # noqa: E731
    w_xx = W(X, X2)
    first = w_xx if form == "as_written" else W(X, Y)
    return first + W(X, Y2) + W(X2, Y) + W(X2, Y2) - 2 * w_xx - 2 * W(Y, Y2)

