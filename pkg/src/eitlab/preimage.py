"""Initial reconstruction: one-step linearization with TV regularization.

Solves min_s 0.5*||J s - b||^2 + lambda*TV(s) for the per-element
conductivity change, with the Jacobian linearized at the homogeneous
background.  The total-variation term is handled by a primal-dual interior
point method: dual variables live on TV edges with |x| <= 1, the
complementarity condition is smoothed by an annealed parameter, and Newton
steps are damped by a backtracking line search on the exact merit value.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.linalg as sla
import scipy.sparse as sp

from .errors import ContractError, NumericalError
from .fem import KIND_DIFFERENCE, ForwardSolver, MeasurementFrame, StimulationProtocol
from .mesh import Mesh


@dataclass(frozen=True)
class TVOperator:
    """Signed difference operator with edge weights folded in.

    Rows carry +w and -w on the two fields sharing an edge, so a constant
    field maps to exactly zero and sum(|L s|) is the anisotropic TV value.
    """

    matrix: sp.csr_matrix

    @property
    def n_edges(self) -> int:
        return self.matrix.shape[0]

    @property
    def n_fields(self) -> int:
        return self.matrix.shape[1]

    @staticmethod
    def from_mesh(mesh: Mesh) -> "TVOperator":
        """Element-adjacency differences weighted by shared edge length."""
        owners: dict[tuple[int, int], list[int]] = {}
        for e, tri in enumerate(mesh.elements):
            for a, b in ((tri[0], tri[1]), (tri[1], tri[2]), (tri[2], tri[0])):
                key = (min(a, b), max(a, b))
                owners.setdefault(key, []).append(e)
        rows, cols, vals = [], [], []
        r = 0
        for (a, b), elems in sorted(owners.items()):
            if len(elems) != 2:
                continue  # boundary edge
            w = float(np.linalg.norm(mesh.nodes[a] - mesh.nodes[b]))
            rows += [r, r]
            cols += [elems[0], elems[1]]
            vals += [w, -w]
            r += 1
        mat = sp.coo_matrix(
            (vals, (rows, cols)), shape=(r, mesh.n_elements)
        ).tocsr()
        return TVOperator(mat)

    @staticmethod
    def from_grid(grid: int, mask: np.ndarray | None = None) -> "TVOperator":
        """Unit-weight 4-neighborhood differences between in-mask pixels."""
        if mask is None:
            mask = np.ones((grid, grid), dtype=bool)
        idx = -np.ones((grid, grid), dtype=np.int64)
        idx[mask] = np.arange(int(mask.sum()))
        rows, cols, vals = [], [], []
        r = 0
        for i in range(grid):
            for j in range(grid):
                if not mask[i, j]:
                    continue
                for di, dj in ((0, 1), (1, 0)):
                    ii, jj = i + di, j + dj
                    if ii < grid and jj < grid and mask[ii, jj]:
                        rows += [r, r]
                        cols += [idx[i, j], idx[ii, jj]]
                        vals += [1.0, -1.0]
                        r += 1
        mat = sp.coo_matrix((vals, (rows, cols)), shape=(r, int(mask.sum()))).tocsr()
        return TVOperator(mat)


def tv_value(values: np.ndarray, op: TVOperator) -> float:
    values = np.asarray(values, dtype=np.float64)
    if values.shape != (op.n_fields,):
        raise ContractError("field length does not match TV operator")
    return float(np.abs(op.matrix @ values).sum())


@dataclass
class PdipmOpts:
    beta_smooth: float = 1e-8  # smoothing floor
    mu0: float = 1e-4  # initial smoothing weight
    mu_decay: float = 0.5
    max_outer: int = 40
    tol: float = 1e-9
    max_backtracks: int = 40
    max_ridge_retries: int = 4


@dataclass
class PdipmState:
    sigma: np.ndarray
    dual: np.ndarray
    mu: float
    iteration: int = 0


@dataclass
class PdipmResult:
    sigma: np.ndarray
    merits: list[float] = field(default_factory=list)  # accepted merit values
    gap: float = float("inf")
    iterations: int = 0
    converged: bool = False
    dual: np.ndarray | None = None


def _merit(jac, b, lam, op, sigma):
    r = jac @ sigma - b
    return 0.5 * float(r @ r) + lam * float(np.abs(op.matrix @ sigma).sum())


def pdipm_solve_full(
    jac: np.ndarray,
    b: np.ndarray | MeasurementFrame,
    lam: float,
    op: TVOperator,
    opts: PdipmOpts | None = None,
) -> PdipmResult:
    """Primal-dual interior point TV solve; see the module docstring.

    Newton system on (sigma, dual x) with smoothed complementarity
    eta - x*sqrt(eta^2 + beta) = 0, eta = L sigma:
        [J'J + lam*L' diag(f/E) L] d_sigma = -(J'(J sigma - b) + lam*L'(eta/E))
        d_x = eta/E - x + diag(f/E) L d_sigma,     f = 1 - x*eta/E
    The dual step uses a 0.99 fraction-to-boundary rule; the primal step
    backtracks until the exact merit does not increase.
    """
    if isinstance(b, MeasurementFrame):
        b = b.values
    b = np.asarray(b, dtype=np.float64)
    jac = np.asarray(jac, dtype=np.float64)
    if jac.ndim != 2 or jac.shape[0] != b.shape[0]:
        raise ContractError("Jacobian and data shapes are inconsistent")
    if jac.shape[1] != op.n_fields:
        raise ContractError("Jacobian columns do not match TV operator")
    if lam <= 0:
        raise ContractError("regularization weight must be > 0")
    opts = opts or PdipmOpts()

    n = jac.shape[1]
    l_mat = op.matrix
    jtj = jac.T @ jac
    jtb = jac.T @ b
    state = PdipmState(
        sigma=np.zeros(n), dual=np.zeros(op.n_edges), mu=opts.mu0
    )
    result = PdipmResult(sigma=state.sigma)
    merit = _merit(jac, b, lam, op, state.sigma)
    result.merits.append(merit)
    scale = 1.0 + merit

    for k in range(opts.max_outer):
        state.iteration = k
        beta = max(opts.beta_smooth, state.mu)
        eta = l_mat @ state.sigma
        e_smooth = np.sqrt(eta * eta + beta)
        f = 1.0 - state.dual * eta / e_smooth
        d_weights = f / e_smooth

        grad = jtj @ state.sigma - jtb + lam * (l_mat.T @ (eta / e_smooth))
        h = jtj + lam * (l_mat.multiply(d_weights[:, None]).T @ l_mat).toarray()
        step = _solve_spd(h, -grad, opts)

        if not np.all(np.isfinite(step)):
            raise NumericalError("non-finite Newton step in TV solve")

        # dual update with fraction-to-boundary step length
        d_dual = eta / e_smooth - state.dual + d_weights * (l_mat @ step)
        t_dual = _fraction_to_boundary(state.dual, d_dual)
        state.dual = np.clip(state.dual + t_dual * d_dual, -1.0, 1.0)

        # primal backtracking on the exact merit
        t, accepted = 1.0, False
        for _ in range(opts.max_backtracks):
            cand = state.sigma + t * step
            cand_merit = _merit(jac, b, lam, op, cand)
            if cand_merit <= merit + 1e-12 * abs(merit):
                state.sigma = cand
                merit = min(merit, cand_merit)
                accepted = True
                break
            t *= 0.5
        if accepted:
            result.merits.append(merit)

        state.mu *= opts.mu_decay

        eta = l_mat @ state.sigma
        comp_gap = lam * float(np.abs(eta).sum() - state.dual @ eta)
        grad_res = jtj @ state.sigma - jtb + lam * (l_mat.T @ state.dual)
        result.gap = comp_gap + float(np.linalg.norm(grad_res))
        step_small = float(np.abs(step).max(initial=0.0)) <= opts.tol * (
            1.0 + float(np.abs(state.sigma).max(initial=0.0))
        )
        if result.gap <= opts.tol * scale or (not accepted and step_small):
            result.converged = True
            result.iterations = k + 1
            break
    else:
        result.iterations = opts.max_outer

    result.sigma = state.sigma
    result.dual = state.dual
    return result


def _solve_spd(h: np.ndarray, rhs: np.ndarray, opts: PdipmOpts) -> np.ndarray:
    """Cholesky solve with escalating ridge on failure."""
    ridge = 1e-12 * np.trace(h) / h.shape[0]
    for _ in range(opts.max_ridge_retries):
        try:
            chol = sla.cho_factor(
                h + ridge * np.eye(h.shape[0]), lower=True, check_finite=False
            )
            return sla.cho_solve(chol, rhs, check_finite=False)
        except np.linalg.LinAlgError:
            ridge *= 100.0
    raise NumericalError("TV Newton system not positive definite")


def _fraction_to_boundary(x: np.ndarray, dx: np.ndarray, frac: float = 0.99) -> float:
    """Largest t <= 1 keeping |x + frac-scaled t*dx| <= 1."""
    with np.errstate(divide="ignore", invalid="ignore"):
        t_up = np.where(dx > 0, (1.0 - x) / dx, np.inf)
        t_dn = np.where(dx < 0, (-1.0 - x) / dx, np.inf)
    t_max = min(float(np.min(t_up)), float(np.min(t_dn)))
    return min(1.0, frac * t_max)


def default_lambda(jac: np.ndarray, b: np.ndarray) -> float:
    """Scale-relative default weight: 1e-3 * max|J'b|."""
    return 1e-3 * float(np.abs(jac.T @ b).max())


def pdipm_solve(
    jac: np.ndarray,
    b: np.ndarray | MeasurementFrame,
    lam: float,
    op: TVOperator,
    opts: PdipmOpts | None = None,
) -> np.ndarray:
    return pdipm_solve_full(jac, b, lam, op, opts).sigma


class PreimageSolver:
    """Caches the linearized Jacobian and maps frames to initial images."""

    def __init__(
        self,
        mesh: Mesh,
        protocol: StimulationProtocol | None = None,
        contact_impedance: float = 1e-2,
        background_sigma: float = 0.6,
        grid: int = 64,
        tv_lambda: float | None = None,
        max_outer: int = 40,
        opts: PdipmOpts | None = None,
    ):
        self.mesh = mesh
        self.grid = grid
        self.tv_lambda = tv_lambda
        self.opts = opts or PdipmOpts(max_outer=max_outer)
        solver = ForwardSolver(mesh, protocol, contact_impedance)
        sigma_ref = np.full(mesh.n_elements, background_sigma)
        self.jacobian = solver.jacobian(sigma_ref)
        self.tv_op = TVOperator.from_mesh(mesh)

    def solve_field(self, frame: MeasurementFrame) -> np.ndarray:
        """Per-element conductivity change for one time-difference frame."""
        if frame.kind != KIND_DIFFERENCE:
            raise ContractError("pre-imaging expects a time-difference frame")
        lam = self.tv_lambda
        if lam is None:
            lam = default_lambda(self.jacobian, frame.values)
            if lam <= 0.0:  # all-zero frame; weight is arbitrary
                lam = 1.0
        return pdipm_solve(self.jacobian, frame.values, lam, self.tv_op, self.opts)

    def reconstruct(self, frame: MeasurementFrame):
        from .phantoms import rasterize_idw

        return rasterize_idw(self.solve_field(frame), self.mesh, self.grid)


def preimage(
    frame: MeasurementFrame,
    mesh: Mesh,
    protocol: StimulationProtocol | None = None,
    contact_impedance: float = 1e-2,
    background_sigma: float = 0.6,
    grid: int = 64,
    tv_lambda: float | None = None,
):
    """One-shot initial reconstruction; see :class:`PreimageSolver`."""
    solver = PreimageSolver(
        mesh,
        protocol=protocol,
        contact_impedance=contact_impedance,
        background_sigma=background_sigma,
        grid=grid,
        tv_lambda=tv_lambda,
    )
    return solver.reconstruct(frame)
