"""Second-order cone programming layer.

Represents problems of the form

    minimize    c'x + sum_j q_j x_j^2        (q_j >= 0)
    subject to  A x = b                      (equality rows with stable ids)
                lb <= x <= ub                (box bounds, +-inf allowed)
                ||u_k(x)||_2 <= w_k(x)       (SOC, affine u rows and bound)
                ||u_k(x)||^2 <= w1_k(x) w2_k(x)   (rotated SOC)

and solves them with CVXOPT's cone LP solver after lowering rotated cones
and the quadratic objective to plain second-order cones (an alternate path
uses the native quadratic cone solver; it exists to cross-check the
lowering, not for production use, since only the LP form returns
infeasibility certificates).

Dual conventions, fixed here for every downstream module:

* equality duals: eq_duals[i] = d(optimal value)/d(rhs_i). Equivalently the
  Lagrangian is f(x) + sum_i lam_i (b_i - a_i.x).
* box duals: mu_lo, mu_hi >= 0 with terms mu_hi (x - ub) + mu_lo (lb - x).
* SOC duals: pair (z, z0) with ||z|| <= z0 and term z'u - z0 w.
* RSOC duals: triple (z, w1_dual, w2_dual) with ||z||^2 <= 4 w1_dual w2_dual
  and term z'u - w1_dual w1 - w2_dual w2.

With these orientations the Lagrangian lower-bounds the objective over the
feasible set and `kkt_residuals` can verify stationarity/complementarity
independently of the backend.
"""

from __future__ import annotations

import io
from contextlib import redirect_stdout
from dataclasses import dataclass, field
from typing import Hashable

import numpy as np
import cvxopt
import cvxopt.solvers

OPTIMAL = "optimal"
INFEASIBLE = "infeasible"
UNBOUNDED = "unbounded"
NUMERICAL = "numerical-failure"

DEFAULT_TOL = 1e-8


class ConicError(ValueError):
    """Raised for malformed programs or unusable solver output."""


# An affine row is a ({var_id: coef}, constant) pair.
Affine = tuple[dict[Hashable, float], float]


@dataclass(frozen=True)
class _Row:
    """Compiled affine row over column indices."""

    cols: np.ndarray
    coefs: np.ndarray
    const: float

    def value(self, x: np.ndarray) -> float:
        return float(self.coefs @ x[self.cols] + self.const)


@dataclass(frozen=True)
class _Soc:
    id: Hashable
    u: tuple[_Row, ...]
    w: _Row


@dataclass(frozen=True)
class _Rsoc:
    id: Hashable
    u: tuple[_Row, ...]
    w1: _Row
    w2: _Row


@dataclass(frozen=True)
class SocDual:
    z: np.ndarray
    z0: float


@dataclass(frozen=True)
class RsocDual:
    z: np.ndarray
    w1_dual: float
    w2_dual: float


class ConicProgram:
    """Immutable compiled program. Use ConicProgramBuilder to create one."""

    def __init__(self, builder: "ConicProgramBuilder"):
        self.var_ids: list[Hashable] = list(builder._var_ids)
        self.index: dict[Hashable, int] = dict(builder._index)
        n = len(self.var_ids)
        self.num_vars = n
        self.c = np.array(builder._lin, dtype=float)
        self.qcoef = np.array(builder._quad, dtype=float)
        self.obj_const = builder._obj_const
        self.lb = np.array(builder._lb, dtype=float)
        self.ub = np.array(builder._ub, dtype=float)
        self.eq_ids: list[Hashable] = [eid for eid, _, _ in builder._eqs]
        self.eq_rows: list[_Row] = [row for _, row, _ in builder._eqs]
        self.eq_rhs = np.array([rhs for _, _, rhs in builder._eqs], dtype=float)
        self.socs: list[_Soc] = list(builder._socs)
        self.rsocs: list[_Rsoc] = list(builder._rsocs)
        if len(set(self.eq_ids)) != len(self.eq_ids):
            raise ConicError("duplicate equality ids")
        cone_ids = [c.id for c in self.socs] + [c.id for c in self.rsocs]
        if len(set(cone_ids)) != len(cone_ids):
            raise ConicError("duplicate cone ids")

    @property
    def num_eqs(self) -> int:
        return len(self.eq_rows)

    def objective_at(self, x: np.ndarray) -> float:
        return float(self.c @ x + self.qcoef @ (x * x) + self.obj_const)

    def dump(self) -> str:
        """Human-readable sparse listing for external cross-checks."""
        out = [f"vars {self.num_vars} eqs {self.num_eqs} "
               f"soc {len(self.socs)} rsoc {len(self.rsocs)}"]
        out.append("min " + " + ".join(
            ([f"{self.c[j]:+g}*x{j}" for j in range(self.num_vars) if self.c[j]]
             + [f"{self.qcoef[j]:+g}*x{j}^2" for j in range(self.num_vars) if self.qcoef[j]])
            or ["0"]))
        for eid, row, rhs in zip(self.eq_ids, self.eq_rows, self.eq_rhs):
            terms = " + ".join(f"{c:+g}*x{j}" for j, c in zip(row.cols, row.coefs))
            out.append(f"eq {eid}: {terms} {row.const:+g} == {rhs:g}")
        for j in range(self.num_vars):
            if np.isfinite(self.lb[j]) or np.isfinite(self.ub[j]):
                out.append(f"box x{j} ({self.var_ids[j]}): [{self.lb[j]:g}, {self.ub[j]:g}]")

        def _aff(row: _Row) -> str:
            terms = " ".join(f"{c:+g}*x{j}" for j, c in zip(row.cols, row.coefs))
            return f"({terms} {row.const:+g})"

        for cone in self.socs:
            out.append(f"soc {cone.id}: ||" + ", ".join(_aff(r) for r in cone.u)
                       + f"|| <= {_aff(cone.w)}")
        for cone in self.rsocs:
            out.append(f"rsoc {cone.id}: ||" + ", ".join(_aff(r) for r in cone.u)
                       + f"||^2 <= {_aff(cone.w1)} * {_aff(cone.w2)}")
        return "\n".join(out)


class ConicProgramBuilder:
    """Incrementally assemble a ConicProgram."""

    def __init__(self):
        self._var_ids: list[Hashable] = []
        self._index: dict[Hashable, int] = {}
        self._lin: list[float] = []
        self._quad: list[float] = []
        self._obj_const = 0.0
        self._lb: list[float] = []
        self._ub: list[float] = []
        self._eqs: list[tuple[Hashable, _Row, float]] = []
        self._eq_ids: set[Hashable] = set()
        self._socs: list[_Soc] = []
        self._rsocs: list[_Rsoc] = []
        self._cone_ids: set[Hashable] = set()

    def add_var(self, var_id: Hashable, lb: float = -np.inf, ub: float = np.inf) -> int:
        if var_id in self._index:
            raise ConicError(f"duplicate variable {var_id!r}")
        # crossed bounds are legal here: they make the program infeasible,
        # and infeasibility is the solver's verdict, not the builder's
        col = len(self._var_ids)
        self._index[var_id] = col
        self._var_ids.append(var_id)
        self._lin.append(0.0)
        self._quad.append(0.0)
        self._lb.append(float(lb))
        self._ub.append(float(ub))
        return col

    def set_bounds(self, var_id: Hashable, lb: float | None = None, ub: float | None = None) -> None:
        col = self._col(var_id)
        if lb is not None:
            self._lb[col] = float(lb)
        if ub is not None:
            self._ub[col] = float(ub)

    def set_objective(self, var_id: Hashable, lin: float = 0.0, quad: float = 0.0) -> None:
        """Add lin*x + quad*x^2 to the objective (accumulates)."""
        if quad < 0:
            raise ConicError(f"negative quadratic coefficient on {var_id!r}")
        col = self._col(var_id)
        self._lin[col] += float(lin)
        self._quad[col] += float(quad)

    def add_objective_const(self, value: float) -> None:
        self._obj_const += float(value)

    def add_eq(self, eq_id: Hashable, terms: dict[Hashable, float], rhs: float) -> None:
        if eq_id in self._eq_ids:
            raise ConicError(f"duplicate equality id {eq_id!r}")
        row = self._row((terms, 0.0))  # validates variable names before the id is claimed
        self._eq_ids.add(eq_id)
        self._eqs.append((eq_id, row, float(rhs)))

    def add_soc(self, cone_id: Hashable, u: list[Affine], w: Affine) -> None:
        """Constrain ||u(x)||_2 <= w(x)."""
        self._claim_cone(cone_id)
        self._socs.append(_Soc(cone_id, tuple(self._row(a) for a in u), self._row(w)))

    def add_rsoc(self, cone_id: Hashable, u: list[Affine], w1: Affine, w2: Affine) -> None:
        """Constrain ||u(x)||^2 <= w1(x)*w2(x) with w1, w2 >= 0."""
        self._claim_cone(cone_id)
        self._rsocs.append(
            _Rsoc(cone_id, tuple(self._row(a) for a in u), self._row(w1), self._row(w2))
        )

    def build(self) -> ConicProgram:
        return ConicProgram(self)

    def _claim_cone(self, cone_id: Hashable) -> None:
        if cone_id in self._cone_ids:
            raise ConicError(f"duplicate cone id {cone_id!r}")
        self._cone_ids.add(cone_id)

    def _col(self, var_id: Hashable) -> int:
        try:
            return self._index[var_id]
        except KeyError:
            raise ConicError(f"unknown variable {var_id!r}") from None

    def _row(self, affine: Affine) -> _Row:
        terms, const = affine
        cols = np.array([self._col(v) for v in terms], dtype=int)
        coefs = np.array([float(c) for c in terms.values()], dtype=float)
        return _Row(cols, coefs, float(const))


@dataclass
class ConicSolution:
    status: str
    objective_value: float | None = None
    primal: dict[Hashable, float] = field(default_factory=dict)
    eq_duals: dict[Hashable, float] = field(default_factory=dict)
    cone_duals: dict[Hashable, SocDual | RsocDual] = field(default_factory=dict)
    bound_duals: dict[Hashable, tuple[float, float]] = field(default_factory=dict)
    x: np.ndarray | None = None
    solver_stats: dict = field(default_factory=dict)

    def value(self, var_id: Hashable) -> float:
        return self.primal[var_id]


# ---------------------------------------------------------------------------
# backend
# ---------------------------------------------------------------------------


def _sparse_from_rows(rows: list[tuple[int, int, float]], nrows: int, ncols: int):
    if rows:
        ri, ci, vv = zip(*rows)
    else:
        ri, ci, vv = (), (), ()
    return cvxopt.spmatrix(list(vv), list(ri), list(ci), (nrows, ncols))


def solve(
    program: ConicProgram,
    tol: float = DEFAULT_TOL,
    backend: str = "auto",
) -> ConicSolution:
    """Solve a program; returns primal and all dual multipliers.

    backend "conelp" lowers quadratic objectives and rotated cones to SOC
    form and provides infeasibility/unboundedness certificates; "coneqp"
    keeps the quadratic objective native (sharper duals) but cannot
    distinguish infeasible from unbounded. The default "auto" uses coneqp
    for quadratic objectives and falls back to conelp whenever coneqp does
    not return optimal, so statuses stay certificate-backed.
    """
    if backend == "auto":
        if np.any(program.qcoef > 0):
            sol = _solve_backend(program, tol, "coneqp")
            if sol.status == OPTIMAL:
                return sol
        return _solve_backend(program, tol, "conelp")
    return _solve_backend(program, tol, backend)


def _solve_backend(program: ConicProgram, tol: float, backend: str) -> ConicSolution:
    if backend not in ("conelp", "coneqp"):
        raise ConicError(f"unknown backend {backend!r}")
    n = program.num_vars
    has_quad = bool(np.any(program.qcoef > 0))
    use_epigraph = has_quad and backend == "conelp"
    ncols = n + 1 if use_epigraph else n

    # inequality rows: nonnegative orthant first, then one block per cone
    lin_rows: list[tuple[int, int, float]] = []  # (row, col, coef) of G
    lin_h: list[float] = []
    bound_tags: list[tuple[str, int]] = []  # ("ub"|"lb", var col) per row
    for j in range(n):
        if np.isfinite(program.ub[j]):
            lin_rows.append((len(lin_h), j, 1.0))
            lin_h.append(program.ub[j])
            bound_tags.append(("ub", j))
        if np.isfinite(program.lb[j]):
            lin_rows.append((len(lin_h), j, -1.0))
            lin_h.append(-program.lb[j])
            bound_tags.append(("lb", j))
    n_lin = len(lin_h)

    soc_rows: list[tuple[int, int, float]] = []
    soc_h: list[float] = []
    soc_dims: list[int] = []

    def _push_row(row: _Row, sign: float = 1.0) -> None:
        # cone slack s = h - Gx must equal sign*(row expr)
        r = len(soc_h)
        for col, coef in zip(row.cols, row.coefs):
            soc_rows.append((r, int(col), -sign * coef))
        soc_h.append(sign * row.const)

    def _push_scaled(row: _Row, scale: float) -> None:
        r = len(soc_h)
        for col, coef in zip(row.cols, row.coefs):
            soc_rows.append((r, int(col), -scale * coef))
        soc_h.append(scale * row.const)

    def _push_diff(a: _Row, b: _Row) -> None:
        # slack row equal to a(x) - b(x)
        r = len(soc_h)
        for col, coef in zip(a.cols, a.coefs):
            soc_rows.append((r, int(col), -coef))
        for col, coef in zip(b.cols, b.coefs):
            soc_rows.append((r, int(col), coef))
        soc_h.append(a.const - b.const)

    def _push_sum(a: _Row, b: _Row) -> None:
        r = len(soc_h)
        for col, coef in zip(a.cols, a.coefs):
            soc_rows.append((r, int(col), -coef))
        for col, coef in zip(b.cols, b.coefs):
            soc_rows.append((r, int(col), -coef))
        soc_h.append(a.const + b.const)

    for cone in program.socs:
        _push_row(cone.w)
        for u in cone.u:
            _push_row(u)
        soc_dims.append(len(cone.u) + 1)
    for cone in program.rsocs:
        # ||u||^2 <= w1 w2  <=>  ||(2u, w1 - w2)|| <= w1 + w2
        _push_sum(cone.w1, cone.w2)
        for u in cone.u:
            _push_scaled(u, 2.0)
        _push_diff(cone.w1, cone.w2)
        soc_dims.append(len(cone.u) + 2)

    quad_cols = np.nonzero(program.qcoef > 0)[0]
    if use_epigraph:
        # sum_j q_j x_j^2 <= s  lowered to  ||(2 sqrt(q) x, s - 1)|| <= s + 1
        s_col = n
        r = len(soc_h)
        soc_rows.append((r, s_col, -1.0))
        soc_h.append(1.0)
        for j in quad_cols:
            r = len(soc_h)
            soc_rows.append((r, int(j), -2.0 * np.sqrt(program.qcoef[j])))
            soc_h.append(0.0)
        r = len(soc_h)
        soc_rows.append((r, s_col, -1.0))
        soc_h.append(-1.0)
        soc_dims.append(len(quad_cols) + 2)

    all_rows = lin_rows + [(n_lin + r, c, v) for (r, c, v) in soc_rows]
    G = _sparse_from_rows(all_rows, n_lin + len(soc_h), ncols)
    h = cvxopt.matrix(np.array(lin_h + soc_h, dtype=float))
    dims = {"l": n_lin, "q": soc_dims, "s": []}

    eq_triplets: list[tuple[int, int, float]] = []
    for i, row in enumerate(program.eq_rows):
        for col, coef in zip(row.cols, row.coefs):
            eq_triplets.append((i, int(col), coef))
        # constants inside equality rows fold into the rhs
    A = _sparse_from_rows(eq_triplets, program.num_eqs, ncols)
    b = cvxopt.matrix(
        np.array(
            [rhs - row.const for row, rhs in zip(program.eq_rows, program.eq_rhs)],
            dtype=float,
        )
    )

    c_vec = np.zeros(ncols)
    c_vec[:n] = program.c
    if use_epigraph:
        c_vec[n] = 1.0
    c = cvxopt.matrix(c_vec)

    options = {
        "show_progress": False,
        "abstol": 0.1 * tol,
        "reltol": 0.1 * tol,
        "feastol": tol,
        "maxiters": 200,
    }
    buf = io.StringIO()
    try:
        with redirect_stdout(buf):
            if backend == "conelp":
                raw = cvxopt.solvers.conelp(c, G, h, dims, A, b, options=options)
            else:
                P_np = np.zeros((ncols, ncols))
                P_np[np.arange(n), np.arange(n)] = 2.0 * program.qcoef
                raw = cvxopt.solvers.coneqp(
                    cvxopt.matrix(P_np), c, G, h, dims, A, b, options=options
                )
    except (ValueError, ArithmeticError, ZeroDivisionError) as exc:
        return ConicSolution(status=NUMERICAL, solver_stats={"error": str(exc)})

    raw_status = raw.get("status", "unknown")
    stats = {
        "backend": raw_status,
        "iterations": raw.get("iterations"),
        "gap": raw.get("gap"),
        "primal_objective": raw.get("primal objective"),
        "dual_objective": raw.get("dual objective"),
    }
    if raw_status == "optimal":
        status = OPTIMAL
    elif raw_status == "primal infeasible":
        return ConicSolution(status=INFEASIBLE, solver_stats=stats)
    elif raw_status == "dual infeasible":
        return ConicSolution(status=UNBOUNDED, solver_stats=stats)
    else:
        return ConicSolution(status=NUMERICAL, solver_stats=stats)

    x_full = np.array(raw["x"]).ravel()
    x = x_full[:n]
    y = np.array(raw["y"]).ravel() if program.num_eqs else np.zeros(0)
    z = np.array(raw["z"]).ravel()

    # eq duals: optimal-value sensitivity to rhs is -y under cvxopt's
    # Lagrangian orientation
    eq_duals = {eid: -y[i] for i, eid in enumerate(program.eq_ids)}

    bound_duals = {vid: (0.0, 0.0) for vid in program.var_ids}
    for (kind, j), zi in zip(bound_tags, z[:n_lin]):
        vid = program.var_ids[j]
        lo, hi = bound_duals[vid]
        if kind == "ub":
            bound_duals[vid] = (lo, float(zi))
        else:
            bound_duals[vid] = (float(zi), hi)

    cone_duals: dict[Hashable, SocDual | RsocDual] = {}
    offset = n_lin
    for cone in program.socs:
        m = len(cone.u)
        z0 = float(z[offset])
        zbar = -z[offset + 1 : offset + 1 + m]
        cone_duals[cone.id] = SocDual(np.array(zbar), z0)
        offset += m + 1
    for cone in program.rsocs:
        m = len(cone.u)
        z0 = float(z[offset])
        zbar = -z[offset + 1 : offset + 1 + m + 1]
        zu, zlast = zbar[:m], float(zbar[m])
        cone_duals[cone.id] = RsocDual(2.0 * np.array(zu), z0 - zlast, z0 + zlast)
        offset += m + 2

    return ConicSolution(
        status=OPTIMAL,
        objective_value=program.objective_at(x),
        primal={vid: float(x[j]) for j, vid in enumerate(program.var_ids)},
        eq_duals=eq_duals,
        cone_duals=cone_duals,
        bound_duals=bound_duals,
        x=x,
        solver_stats=stats,
    )


# ---------------------------------------------------------------------------
# independent KKT verification
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class KktReport:
    stationarity: float
    primal_eq: float
    primal_ineq: float
    dual_feas: float
    complementarity: float

    @property
    def max_residual(self) -> float:
        return max(
            self.stationarity,
            self.primal_eq,
            self.primal_ineq,
            self.dual_feas,
            self.complementarity,
        )


def kkt_residuals(program: ConicProgram, solution: ConicSolution) -> KktReport:
    """Recompute KKT residuals from program data, independent of the backend.

    Uses the module's dual conventions; all residuals are absolute
    infinity-norms.
    """
    if solution.status != OPTIMAL:
        raise ConicError("kkt_residuals requires an optimal solution")
    x = solution.x
    if x is None:
        x = np.array([solution.primal[v] for v in program.var_ids])
    n = program.num_vars

    grad = program.c + 2.0 * program.qcoef * x
    primal_eq = 0.0
    for row, rhs, eid in zip(program.eq_rows, program.eq_rhs, program.eq_ids):
        lam = solution.eq_duals[eid]
        primal_eq = max(primal_eq, abs(row.value(x) - rhs))
        # term lam*(b - a.x): gradient contribution -lam * a
        np.add.at(grad, row.cols, -lam * row.coefs)

    primal_ineq = 0.0
    dual_feas = 0.0
    comp = 0.0
    for j, vid in enumerate(program.var_ids):
        mu_lo, mu_hi = solution.bound_duals.get(vid, (0.0, 0.0))
        dual_feas = max(dual_feas, -mu_lo, -mu_hi)
        grad[j] += mu_hi - mu_lo
        if np.isfinite(program.ub[j]):
            primal_ineq = max(primal_ineq, x[j] - program.ub[j])
            comp = max(comp, abs(mu_hi * (program.ub[j] - x[j])))
        if np.isfinite(program.lb[j]):
            primal_ineq = max(primal_ineq, program.lb[j] - x[j])
            comp = max(comp, abs(mu_lo * (x[j] - program.lb[j])))

    for cone in program.socs:
        dual = solution.cone_duals[cone.id]
        uv = np.array([r.value(x) for r in cone.u])
        wv = cone.w.value(x)
        primal_ineq = max(primal_ineq, np.linalg.norm(uv) - wv)
        dual_feas = max(dual_feas, np.linalg.norm(dual.z) - dual.z0)
        comp = max(comp, abs(dual.z @ uv - dual.z0 * wv))
        for r, zi in zip(cone.u, dual.z):
            np.add.at(grad, r.cols, zi * r.coefs)
        np.add.at(grad, cone.w.cols, -dual.z0 * cone.w.coefs)

    for cone in program.rsocs:
        dual = solution.cone_duals[cone.id]
        uv = np.array([r.value(x) for r in cone.u])
        w1, w2 = cone.w1.value(x), cone.w2.value(x)
        primal_ineq = max(primal_ineq, uv @ uv - w1 * w2, -w1, -w2)
        dual_feas = max(
            dual_feas,
            dual.z @ dual.z - 4.0 * dual.w1_dual * dual.w2_dual,
            -dual.w1_dual,
            -dual.w2_dual,
        )
        comp = max(comp, abs(dual.z @ uv - dual.w1_dual * w1 - dual.w2_dual * w2))
        for r, zi in zip(cone.u, dual.z):
            np.add.at(grad, r.cols, zi * r.coefs)
        np.add.at(grad, cone.w1.cols, -dual.w1_dual * cone.w1.coefs)
        np.add.at(grad, cone.w2.cols, -dual.w2_dual * cone.w2.coefs)

    return KktReport(
        stationarity=float(np.max(np.abs(grad))) if n else 0.0,
        primal_eq=primal_eq,
        primal_ineq=max(primal_ineq, 0.0),
        dual_feas=max(dual_feas, 0.0),
        complementarity=comp,
    )
