"""Entropic optimal transport between spatial response distributions.

Pipeline: raw score maps -> spatial softmax -> flattened marginals p, q
on an H x W grid -> Sinkhorn scaling against a ground-cost matrix over
pixel coordinates -> transport plan and its cost ``<P, C>``.

Two solver paths are provided. The standard path iterates the scaling
updates ``u <- p / (K v)``, ``v <- q / (K^T u)`` on the Gibbs kernel
``K = exp(-C / eps)`` directly; it fails by under/overflow when ``eps``
is small relative to the cost range. The log-domain path performs the
identical updates on ``log u``, ``log v`` via logsumexp and works at any
regularization. Gradients are exact reverse-mode derivatives of the
finitely-iterated computation (unrolled through however many iterations
actually ran), checkable against central differences.

For squared-Euclidean and Manhattan costs on a grid the kernel
factorizes over the two axes, so each logsumexp update touches
``h*w*(h+w)`` entries instead of ``(h*w)^2``; both paths exploit this.
"""

from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
from scipy.optimize import linprog

from .numerics import ShapeError, logsumexp_last

L2SQ = "l2sq"
L1 = "l1"
ONE_MINUS_COS = "one_minus_cos"
_METRICS = (L2SQ, L1, ONE_MINUS_COS)


class UnderflowError(ArithmeticError):
    """Standard-mode scalings degenerated; rerun with log_domain=True."""


class ConvergenceError(RuntimeError):
    """Dual variables became non-finite; regularization is degenerate."""


@dataclass
class ProbabilityGrid:
    """Nonnegative H x W mass map summing to one."""

    h: int
    w: int
    mass: np.ndarray

    def __post_init__(self):
        self.mass = np.asarray(self.mass, dtype=np.float64)
        if self.mass.shape != (self.h, self.w):
            raise ShapeError(f"mass shape {self.mass.shape} != ({self.h}, {self.w})")
        if np.any(self.mass < 0):
            raise ValueError("probability grid has negative mass")
        if abs(self.mass.sum() - 1.0) > 1e-12:
            raise ValueError(f"probability grid sums to {self.mass.sum()!r}, not 1")

    @property
    def flat(self) -> np.ndarray:
        return self.mass.ravel()


def spatial_softmax(scores) -> ProbabilityGrid:
    """Normalize a raw score map into a probability grid.

    The max is subtracted before exponentiation; this is mandatory for
    stability and leaves the result mathematically unchanged.
    """
    s = np.asarray(scores, dtype=np.float64)
    if s.ndim != 2:
        raise ShapeError("score map must be 2-D")
    if not np.all(np.isfinite(s)):
        raise ValueError("score map contains non-finite entries")
    e = np.exp(s - s.max())
    return ProbabilityGrid(s.shape[0], s.shape[1], e / e.sum())


def dirac(h: int, w: int, cell: tuple) -> ProbabilityGrid:
    """Point mass at ``cell = (row, col)``."""
    m = np.zeros((h, w))
    m[cell] = 1.0
    return ProbabilityGrid(h, w, m)


def kl_divergence(p: ProbabilityGrid, q: ProbabilityGrid) -> float:
    """KL(p || q) with the 0 log 0 = 0 convention; +inf off q's support."""
    pf, qf = p.flat, q.flat
    sup = pf > 0
    if np.any(qf[sup] == 0):
        return float("inf")
    return float(np.sum(pf[sup] * (np.log(pf[sup]) - np.log(qf[sup]))))


@dataclass
class CostMatrix:
    """Ground cost between grid cells, indexed in row-major flat order."""

    h: int
    w: int
    metric: str
    cost: np.ndarray
    normalized: bool = False
    # per-axis costs when the metric separates over rows/columns
    axis_y: np.ndarray = field(default=None, repr=False)
    axis_x: np.ndarray = field(default=None, repr=False)

    @property
    def n(self) -> int:
        return self.h * self.w

    @property
    def separable(self) -> bool:
        return self.axis_y is not None


def build_cost(h: int, w: int, metric: str = L2SQ, normalized: bool = False) -> CostMatrix:
    """Pairwise movement cost between pixel coordinates of an h x w grid.

    Coordinates are 0-based integer pixel indices by default; with
    ``normalized=True`` they are rescaled to [0, 1] per axis, which keeps
    the cost range of order one independent of grid size.

    Metrics: squared Euclidean, Manhattan, and one-minus-cosine of the
    coordinate vectors. For the cosine metric the origin cell has
    similarity 1 to itself (cost 0 on the diagonal) and similarity 0 to
    every other cell.
    """
    if h < 1 or w < 1:
        raise ValueError("grid dimensions must be at least 1")
    if metric not in _METRICS:
        raise ValueError(f"unknown cost metric {metric!r}")
    ay = np.arange(h, dtype=np.float64)
    ax = np.arange(w, dtype=np.float64)
    if normalized:
        ay = ay / max(h - 1, 1)
        ax = ax / max(w - 1, 1)
    if metric == L2SQ:
        dy = (ay[:, None] - ay[None, :]) ** 2
        dx = (ax[:, None] - ax[None, :]) ** 2
        cost = (dy[:, None, :, None] + dx[None, :, None, :]).reshape(h * w, h * w)
        return CostMatrix(h, w, metric, cost, normalized, axis_y=dy, axis_x=dx)
    if metric == L1:
        dy = np.abs(ay[:, None] - ay[None, :])
        dx = np.abs(ax[:, None] - ax[None, :])
        cost = (dy[:, None, :, None] + dx[None, :, None, :]).reshape(h * w, h * w)
        return CostMatrix(h, w, metric, cost, normalized, axis_y=dy, axis_x=dx)
    # one minus cosine similarity of the 2-D coordinate vectors
    yy, xx = np.meshgrid(ay, ax, indexing="ij")
    coords = np.stack([yy.ravel(), xx.ravel()], axis=1)
    norms = np.sqrt((coords**2).sum(axis=1))
    dots = coords @ coords.T
    with np.errstate(invalid="ignore", divide="ignore"):
        cos = dots / np.outer(norms, norms)
    zero = norms == 0
    cos[zero, :] = 0.0
    cos[:, zero] = 0.0
    cos[np.ix_(zero, zero)] = 1.0
    np.fill_diagonal(cos, 1.0)
    cost = np.clip(1.0 - cos, 0.0, None)
    return CostMatrix(h, w, metric, cost, normalized)


@dataclass
class SinkhornConfig:
    epsilon: float = 1e-2
    max_iters: int = 100
    marginal_tol: float = 1e-9
    log_domain: bool = False

    def __post_init__(self):
        if self.epsilon <= 0:
            raise ValueError("epsilon must be positive")
        if self.max_iters < 1:
            raise ValueError("max_iters must be at least 1")


@dataclass
class TransportPlan:
    """Entropic OT solution with its diagnostics.

    ``u`` and ``v`` are the positive diagonal scalings in standard mode;
    in log-domain mode they hold log u and log v instead (flagged by
    ``log_scalings``).
    """

    plan: np.ndarray
    u: np.ndarray
    v: np.ndarray
    iterations_run: int
    marginal_err: float
    converged: bool
    log_scalings: bool = False


class _Kernel:
    """Applies x -> LSE_j(t_j - C_ij/eps) and its reverse-mode adjoint.

    The separable grid costs route through two per-axis reductions; the
    general route materializes the full n x n exponent. The cost matrices
    produced by build_cost are symmetric, which the adjoint relies on.
    """

    def __init__(self, cost: CostMatrix, eps: float):
        self.h, self.w = cost.h, cost.w
        self.eps = eps
        if cost.separable:
            self.dy = cost.axis_y / eps
            self.dx = cost.axis_x / eps
            self.D = None
        else:
            self.D = cost.cost / eps

    def lse(self, t: np.ndarray) -> np.ndarray:
        """r_i = LSE_j(t_j - D_ij) for flat t of length h*w."""
        if self.D is not None:
            return logsumexp_last(t[None, :] - self.D)
        t2 = t.reshape(self.h, self.w)
        s = logsumexp_last(t2[:, None, :] - self.dx[None, :, :])  # (y', x)
        r = logsumexp_last(s.T[:, None, :] - self.dy[None, :, :])  # (x, y)
        return r.T.ravel()

    def lse_adjoint(self, t: np.ndarray, r: np.ndarray, dr: np.ndarray) -> np.ndarray:
        """dt_j = sum_i dr_i * exp(t_j - D_ij - r_i).

        Exact adjoint of ``lse``; the exponent is the softmax weight of
        entry j inside row i, so it never exceeds one.
        """
        if self.D is not None:
            expo = t[None, :] - self.D - r[:, None]
            wgt = np.where(np.isfinite(r)[:, None], np.exp(expo), 0.0)
            return wgt.T @ dr
        h, w = self.h, self.w
        t2 = t.reshape(h, w)
        r2 = r.reshape(h, w)
        dr2 = dr.reshape(h, w)
        ta = t2[:, None, :] - self.dx[None, :, :]  # (y', x, x')
        s = logsumexp_last(ta)  # (y', x)
        wa = np.where(np.isfinite(s)[..., None], np.exp(ta - s[..., None]), 0.0)
        tb = s.T[:, None, :] - self.dy[None, :, :]  # (x, y, y')
        wb = np.where(
            np.isfinite(r2.T)[..., None], np.exp(tb - r2.T[..., None]), 0.0
        )
        ds = np.einsum("xyk,yx->kx", wb, dr2)  # (y', x)
        dt2 = np.einsum("yxz,yx->yz", wa, ds)  # (y', x')
        return dt2.ravel()


def _gibbs_apply(cost: CostMatrix, eps: float, vec: np.ndarray) -> np.ndarray:
    """(K vec) for K = exp(-C/eps), using the per-axis factors when present."""
    if cost.separable:
        ky = np.exp(-cost.axis_y / eps)
        kx = np.exp(-cost.axis_x / eps)
        return (ky @ vec.reshape(cost.h, cost.w) @ kx.T).ravel()
    return np.exp(-cost.cost / eps) @ vec


def _run_standard(p, q, cost, cfg, keep_history):
    n = cost.n
    K = np.exp(-cost.cost / cfg.epsilon)
    u = np.ones(n)
    v = np.ones(n)
    hist = []
    converged = False
    iterations = 0
    for it in range(cfg.max_iters):
        a = K @ v
        if it > 0:
            err = np.abs(u * a - p).max()
            if err <= cfg.marginal_tol:
                converged = True
                break
        with np.errstate(divide="ignore", invalid="ignore", over="ignore"):
            u_new = p / a
            b = K.T @ u_new
            v_new = q / b
        bad = not (np.all(np.isfinite(u_new)) and np.all(np.isfinite(v_new)))
        if not bad:
            # zero where the marginal itself is zero is fine; elsewhere it
            # means the kernel row underflowed away
            bad = np.any((u_new == 0) & (p > 0)) or np.any((v_new == 0) & (q > 0))
        if bad:
            raise UnderflowError(
                f"standard Sinkhorn scalings degenerated at iteration {it + 1} "
                f"(eps={cfg.epsilon:g}); rerun with log_domain=True"
            )
        if keep_history:
            hist.append((u_new, v_new, v, a, b))
        u, v = u_new, v_new
        iterations = it + 1
    plan = u[:, None] * K * v[None, :]
    err = max(np.abs(plan.sum(axis=1) - p).max(), np.abs(plan.sum(axis=0) - q).max())
    return TransportPlan(plan, u, v, iterations, float(err), converged), hist


def _run_log(p, q, cost, cfg, keep_history):
    n = cost.n
    kern = _Kernel(cost, cfg.epsilon)
    with np.errstate(divide="ignore"):
        logp = np.where(p > 0, np.log(np.where(p > 0, p, 1.0)), -np.inf)
        logq = np.where(q > 0, np.log(np.where(q > 0, q, 1.0)), -np.inf)
    phi = np.zeros(n)  # log u
    psi = np.zeros(n)  # log v
    hist = []
    converged = False
    iterations = 0
    for it in range(cfg.max_iters):
        r = kern.lse(psi)
        if it > 0:
            with np.errstate(invalid="ignore"):
                rows = np.where(np.isfinite(phi) | np.isfinite(r), np.exp(phi + r), 0.0)
            err = np.abs(rows - p).max()
            if err <= cfg.marginal_tol:
                converged = True
                break
        psi_prev = psi
        phi = logp - r
        psi = logq - kern.lse(phi)
        if np.any(np.isnan(phi)) or np.any(np.isnan(psi)):
            raise ConvergenceError(
                f"log-domain duals became non-finite at iteration {it + 1} "
                f"(eps={cfg.epsilon:g})"
            )
        if keep_history:
            hist.append((phi, psi, psi_prev))
        iterations = it + 1
    expo = phi[:, None] + psi[None, :] - cost.cost / cfg.epsilon
    with np.errstate(invalid="ignore"):
        plan = np.where(np.isneginf(expo), 0.0, np.exp(expo))
    err = max(np.abs(plan.sum(axis=1) - p).max(), np.abs(plan.sum(axis=0) - q).max())
    return (
        TransportPlan(plan, phi, psi, iterations, float(err), converged, log_scalings=True),
        hist,
    )


def sinkhorn(
    p: ProbabilityGrid, q: ProbabilityGrid, cost: CostMatrix, cfg: SinkhornConfig
) -> TransportPlan:
    """Solve entropic OT between two grids by diagonal scaling.

    Runs ``u <- p/(K v)``, ``v <- q/(K^T u)`` from ``v = 1`` for up to
    ``cfg.max_iters`` rounds, stopping early once the worst marginal
    violation drops to ``cfg.marginal_tol``. The returned plan is
    ``diag(u) K diag(v)``; its actual violation is reported in
    ``marginal_err``.
    """
    if (p.h, p.w) != (cost.h, cost.w) or (q.h, q.w) != (cost.h, cost.w):
        raise ShapeError("marginal grids do not match the cost grid")
    runner = _run_log if cfg.log_domain else _run_standard
    plan, _ = runner(p.flat, q.flat, cost, cfg, keep_history=False)
    return plan


def saot_loss(plan: TransportPlan, cost: CostMatrix) -> float:
    """Transport cost ``<P, C>`` of a computed plan."""
    if plan.plan.shape != cost.cost.shape:
        raise ShapeError(
            f"plan shape {plan.plan.shape} != cost shape {cost.cost.shape}"
        )
    return float((plan.plan * cost.cost).sum())


@dataclass
class SaotBackward:
    loss: float
    grad: np.ndarray  # d loss / d student scores, (h, w)
    plan: TransportPlan


def saot_backward(
    r_stu, r_tea, cost: CostMatrix, cfg: SinkhornConfig
) -> SaotBackward:
    """Loss and exact gradient of ``<P, C>`` w.r.t. raw student scores.

    Differentiates the computation actually performed: spatial softmax of
    the student map, the finitely-many Sinkhorn scaling rounds that ran,
    and the final inner product. The teacher map is a constant. Follows
    the solver mode selected in ``cfg``, so the derivative matches the
    forward path bit-for-bit in structure.
    """
    r_stu = np.asarray(r_stu, dtype=np.float64)
    r_tea = np.asarray(r_tea, dtype=np.float64)
    if r_stu.shape != (cost.h, cost.w) or r_tea.shape != (cost.h, cost.w):
        raise ShapeError("response maps do not match the cost grid")
    p = spatial_softmax(r_tea)
    q = spatial_softmax(r_stu)
    runner = _run_log if cfg.log_domain else _run_standard
    plan, hist = runner(p.flat, q.flat, cost, cfg, keep_history=True)
    if not hist:
        raise ConvergenceError("no Sinkhorn iterations ran; gradient undefined")
    loss = float((plan.plan * cost.cost).sum())
    if cfg.log_domain:
        dq = _backward_log(p.flat, q.flat, cost, cfg, plan, hist)
    else:
        dq = _backward_standard(p.flat, q.flat, cost, cfg, plan, hist)
    if not np.all(np.isfinite(dq)):
        raise ArithmeticError("non-finite gradient out of the unrolled solver")
    qf = q.flat
    ds = qf * (dq - float(dq @ qf))
    return SaotBackward(loss, ds.reshape(cost.h, cost.w), plan)


def _backward_standard(p, q, cost, cfg, plan, hist):
    K = np.exp(-cost.cost / cfg.epsilon)
    M = K * cost.cost
    u, v = plan.u, plan.v
    du = M @ v
    dv = M.T @ u
    dq = np.zeros_like(q)
    for u_l, v_l, v_prev, a_l, b_l in reversed(hist):
        with np.errstate(divide="ignore", invalid="ignore"):
            dq += np.where(b_l > 0, dv / b_l, 0.0)
            db = -np.where(b_l > 0, dv * v_l / b_l, 0.0)
        du += K @ db
        with np.errstate(divide="ignore", invalid="ignore"):
            da = -np.where(a_l > 0, du * u_l / a_l, 0.0)
        dv = K.T @ da
        du = np.zeros_like(du)
    return dq


def _backward_log(p, q, cost, cfg, plan, hist):
    kern = _Kernel(cost, cfg.epsilon)
    with np.errstate(divide="ignore"):
        logp = np.where(p > 0, np.log(np.where(p > 0, p, 1.0)), -np.inf)
        logq = np.where(q > 0, np.log(np.where(q > 0, q, 1.0)), -np.inf)
    mc = plan.plan * cost.cost
    dphi = mc.sum(axis=1)
    dpsi = mc.sum(axis=0)
    dlogq = np.zeros_like(q)
    for phi_l, psi_l, psi_prev in reversed(hist):
        # psi_l = logq - s_l with s_l = LSE_i(phi_l_i - D_ij)
        dlogq += dpsi
        s_l = logq - psi_l
        dphi += kern.lse_adjoint(phi_l, s_l, -dpsi)
        # phi_l = logp - r_l with r_l = LSE_j(psi_prev_j - D_ij)
        r_l = logp - phi_l
        dpsi = kern.lse_adjoint(psi_prev, r_l, -dphi)
        dphi = np.zeros_like(dphi)
    # remaining dpsi targets the constant initialization psi_0 = 0
    with np.errstate(divide="ignore", invalid="ignore"):
        return np.where(q > 0, dlogq / q, 0.0)


EXACT_OT_CELL_LIMIT = 64


def exact_ot(
    p: ProbabilityGrid,
    q: ProbabilityGrid,
    cost: CostMatrix,
    limit: int = EXACT_OT_CELL_LIMIT,
    return_plan: bool = False,
):
    """Unregularized optimal transport cost, solved exactly as a linear
    program (HiGHS dual simplex). Deterministic for fixed inputs.

    Guarded by ``limit`` because the LP has n^2 variables; callers that
    knowingly want a larger instance pass a bigger limit.
    """
    n = cost.n
    if n > limit:
        raise ValueError(
            f"exact_ot limited to {limit} cells, got {n}; raise `limit` explicitly "
            "if the instance size is intentional"
        )
    if (p.h, p.w) != (cost.h, cost.w) or (q.h, q.w) != (cost.h, cost.w):
        raise ShapeError("marginal grids do not match the cost grid")
    rows = sp.kron(sp.eye(n), np.ones((1, n)), format="csr")
    cols = sp.kron(np.ones((1, n)), sp.eye(n), format="csr")
    # last column constraint is implied by the rest; dropping it keeps HiGHS
    # away from the rank-deficient equality system
    a_eq = sp.vstack([rows, cols[:-1]], format="csr")
    b_eq = np.concatenate([p.flat, q.flat[:-1]])
    res = linprog(cost.cost.ravel(), A_eq=a_eq, b_eq=b_eq, bounds=(0, None), method="highs")
    if res.status != 0:
        raise RuntimeError(f"exact OT solve failed: {res.message}")
    value = float(res.fun)
    if return_plan:
        return value, res.x.reshape(n, n)
    return value
