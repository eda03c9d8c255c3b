"""Polynomial constraint programs over [0,1]-bounded variables.

Programs collect the constraints emitted by the tableau: polynomial
(in)equalities of degree at most two with rational coefficients.  The solver
runs in layers: an exact presolve (constant propagation, aliasing, safe
substitution), an exact rational path for linear residual systems (Gaussian
elimination plus Fourier-Motzkin feasibility), and a multi-start projected
gradient descent with Gauss-Newton polishing for the nonlinear case.
Unsatisfiability is only ever claimed by the exact layers; the numeric layer
reports Unknown on failure.

Strict inequalities x > c are solved as x >= c + eps_strict; numeric solvers
cannot represent open sets and the calculus only needs any positive value.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field
from decimal import Decimal
from fractions import Fraction
from typing import Callable, Iterable, Mapping, Optional, Sequence, Union

import numpy as np

from .formula import FormulaSet, pp

__all__ = [
    "ActionVar", "FormulaVar", "NamedVar", "Var", "to_fraction",
    "Polynomial", "Constraint", "ConstraintProgram",
    "ResidualRow", "ResidualReport", "check",
    "SolveOptions", "Solution", "Unsat", "Unknown", "solve",
    "NameMaps", "export_program", "import_program",
]


# ---------------------------------------------------------------------------
# Variables

@dataclass(frozen=True)
class ActionVar:
    """Probability of choosing an action at a policy state; global per
    (mode, state, action), not indexed by tableau nodes."""
    mode: int
    state: int
    action: int


@dataclass(frozen=True)
class FormulaVar:
    """Probability of a formula set holding at a policy state, indexed by the
    tableau node that introduced it."""
    node: int
    mode: int
    state: int
    fset: FormulaSet


@dataclass(frozen=True)
class NamedVar:
    """Opaque variable used when re-importing exported programs."""
    name: str


Var = Union[ActionVar, FormulaVar, NamedVar]


def var_key(v: Var):
    if isinstance(v, ActionVar):
        return (0, v.mode, v.state, v.action)
    if isinstance(v, FormulaVar):
        return (1, v.node, v.mode, v.state)
    return (2, v.name)


def to_fraction(x) -> Fraction:
    """Exact rational from ints, Fractions, or floats (read as the decimal
    they print as, so model probabilities like 0.1 stay tidy)."""
    if isinstance(x, Fraction):
        return x
    if isinstance(x, int):
        return Fraction(x)
    return Fraction(Decimal(repr(float(x))))


# ---------------------------------------------------------------------------
# Polynomials and constraints

Monomial = tuple  # tuple of Vars, sorted by var_key; () is the constant term


class Polynomial:
    """Sum of rational-coefficient monomials in [0,1] variables."""

    __slots__ = ("terms", "_key")

    def __init__(self, terms: Optional[Mapping[Monomial, Fraction]] = None):
        clean = {m: c for m, c in (terms or {}).items() if c != 0}
        self.terms = clean
        self._key = None

    @staticmethod
    def const(c) -> "Polynomial":
        c = to_fraction(c)
        return Polynomial({(): c} if c else {})

    @staticmethod
    def var(v: Var, coeff=1) -> "Polynomial":
        return Polynomial({(v,): to_fraction(coeff)})

    @staticmethod
    def monomial(vs: Sequence[Var], coeff=1) -> "Polynomial":
        key = tuple(sorted(vs, key=var_key))
        return Polynomial({key: to_fraction(coeff)})

    def __add__(self, other: "Polynomial") -> "Polynomial":
        out = dict(self.terms)
        for m, c in other.terms.items():
            out[m] = out.get(m, Fraction(0)) + c
        return Polynomial(out)

    def __sub__(self, other: "Polynomial") -> "Polynomial":
        out = dict(self.terms)
        for m, c in other.terms.items():
            out[m] = out.get(m, Fraction(0)) - c
        return Polynomial(out)

    def __neg__(self) -> "Polynomial":
        return Polynomial({m: -c for m, c in self.terms.items()})

    def scale(self, c) -> "Polynomial":
        c = to_fraction(c)
        return Polynomial({m: c * k for m, k in self.terms.items()})

    def __mul__(self, other: "Polynomial") -> "Polynomial":
        out: dict[Monomial, Fraction] = {}
        for m1, c1 in self.terms.items():
            for m2, c2 in other.terms.items():
                m = tuple(sorted(m1 + m2, key=var_key))
                out[m] = out.get(m, Fraction(0)) + c1 * c2
        return Polynomial(out)

    def variables(self) -> list[Var]:
        seen: dict[Var, None] = {}
        for m in self.terms:
            for v in m:
                seen.setdefault(v, None)
        return list(seen)

    def degree(self) -> int:
        return max((len(m) for m in self.terms), default=0)

    def constant(self) -> Fraction:
        return self.terms.get((), Fraction(0))

    def is_constant(self) -> bool:
        return all(m == () for m in self.terms)

    def evaluate(self, assignment: Mapping[Var, float]) -> float:
        total = 0.0
        for m, c in self.terms.items():
            t = float(c)
            for v in m:
                t *= assignment[v]
            total += t
        return total

    def evaluate_exact(self, assignment: Mapping[Var, Fraction]) -> Fraction:
        total = Fraction(0)
        for m, c in self.terms.items():
            t = c
            for v in m:
                t *= assignment[v]
            total += t
        return total

    def substitute(self, subst: Mapping[Var, "Polynomial"]) -> "Polynomial":
        out = Polynomial()
        for m, c in self.terms.items():
            p = Polynomial.const(c)
            for v in m:
                p = p * (subst[v] if v in subst else Polynomial.var(v))
            out = out + p
        return out

    def key(self):
        if self._key is None:
            self._key = tuple(sorted(
                ((tuple(var_key(v) for v in m), c) for m, c in self.terms.items())))
        return self._key

    def __eq__(self, other) -> bool:
        return isinstance(other, Polynomial) and self.key() == other.key()

    def __hash__(self) -> int:
        return hash(self.key())

    def __repr__(self) -> str:
        return f"Polynomial({self.terms!r})"


RELATIONS = ("<", "<=", ">", ">=", "=")


@dataclass(frozen=True)
class Constraint:
    lhs: Polynomial
    rel: str
    rhs: Polynomial

    def __post_init__(self):
        if self.rel not in RELATIONS:
            raise ValueError(f"bad relation {self.rel!r}")

    def normalized(self) -> tuple[Polynomial, str]:
        """(poly, rel) meaning `poly rel 0` with rel in {=, >=, >}."""
        diff = self.lhs - self.rhs
        if self.rel == "<":
            return -diff, ">"
        if self.rel == "<=":
            return -diff, ">="
        return diff, self.rel

    def variables(self) -> list[Var]:
        seen: dict[Var, None] = {}
        for v in self.lhs.variables():
            seen.setdefault(v, None)
        for v in self.rhs.variables():
            seen.setdefault(v, None)
        return list(seen)

    def degree(self) -> int:
        return max(self.lhs.degree(), self.rhs.degree())


@dataclass
class ConstraintProgram:
    """An ordered, duplicate-free collection of constraints.  Every variable
    is implicitly bounded in [0,1]."""

    constraints: tuple[Constraint, ...]
    variables: tuple[Var, ...] = ()

    @staticmethod
    def from_constraints(constraints: Iterable[Constraint]) -> "ConstraintProgram":
        uniq: dict[Constraint, None] = {}
        for c in constraints:
            uniq.setdefault(c, None)
        ordered = tuple(uniq)
        seen: dict[Var, None] = {}
        for c in ordered:
            for v in c.variables():
                seen.setdefault(v, None)
        return ConstraintProgram(ordered, tuple(seen))

    def degree(self) -> int:
        return max((c.degree() for c in self.constraints), default=0)

    def is_linear(self) -> bool:
        return self.degree() <= 1


# ---------------------------------------------------------------------------
# Residual checking

@dataclass
class ResidualRow:
    constraint: Constraint
    value: float       # lhs - rhs (after <,<= flip)
    violation: float   # 0 when satisfied at the eps_strict margin


@dataclass
class ResidualReport:
    rows: list[ResidualRow]
    max_violation: float


def check(program: ConstraintProgram, assignment: Mapping[Var, float],
          eps_strict: float = 1e-6) -> ResidualReport:
    """Per-constraint violations of an assignment; strict inequalities are
    measured at the eps_strict margin."""
    rows = []
    worst = 0.0
    for c in program.constraints:
        poly, rel = c.normalized()
        d = poly.evaluate(assignment)
        if rel == "=":
            viol = abs(d)
        elif rel == ">=":
            viol = max(0.0, -d)
        else:  # ">"
            viol = max(0.0, eps_strict - d)
        rows.append(ResidualRow(c, d, viol))
        worst = max(worst, viol)
    for v in program.variables:
        x = assignment[v]
        worst = max(worst, -x, x - 1.0)
    return ResidualReport(rows, worst)


# ---------------------------------------------------------------------------
# Solver

@dataclass
class SolveOptions:
    tol: float = 1e-8
    eps_strict: float = 1e-6
    restarts: int = 64
    seed: int = 0
    iterations: int = 700
    polish_iterations: int = 60
    seed_point: Optional[dict[Var, float]] = None
    fm_var_limit: int = 16
    fm_row_limit: int = 600


@dataclass
class Solution:
    assignment: dict[Var, float]
    residual: float

    @property
    def status(self) -> str:
        return "sat"


@dataclass
class Unsat:
    reason: str

    @property
    def status(self) -> str:
        return "unsat"


@dataclass
class Unknown:
    reason: str

    @property
    def status(self) -> str:
        return "unknown"


SolveResult = Union[Solution, Unsat, Unknown]


class _Contradiction(Exception):
    pass


class _Presolve:
    """Exact simplification: constant propagation, variable aliasing, safe
    single-definition substitution, interval tightening, and detection of
    trivial contradictions.  Every step preserves the solution set."""

    def __init__(self, program: ConstraintProgram, eps_strict: Fraction):
        self.eps = eps_strict
        self.trail: list[tuple[Var, Polynomial]] = []
        self.intervals: dict[Var, list[Fraction]] = {
            v: [Fraction(0), Fraction(1)] for v in program.variables}
        self.work: list[tuple[Polynomial, str]] = []
        for c in program.constraints:
            poly, rel = c.normalized()
            if rel == ">":
                poly, rel = poly - Polynomial.const(self.eps), ">="
            self.work.append((poly, rel))
        self.subst: dict[Var, Polynomial] = {}

    def interval(self, v: Var) -> list[Fraction]:
        return self.intervals.setdefault(v, [Fraction(0), Fraction(1)])

    def bind(self, v: Var, e: Polynomial) -> None:
        lo, hi = self.interval(v)
        if e.is_constant():
            c = e.constant()
            if not (lo <= c <= hi):
                raise _Contradiction(f"{v} pinned to {c} outside [{lo},{hi}]")
        else:
            if lo > 0:
                self.work.append((e - Polynomial.const(lo), ">="))
            if hi < 1:
                self.work.append((Polynomial.const(hi) - e, ">="))
            self.work.append((e, ">="))
            self.work.append((Polynomial.const(1) - e, ">="))
        self.subst[v] = e
        self.trail.append((v, e))

    def tighten(self, v: Var, bound: Fraction, lower: bool) -> None:
        iv = self.interval(v)
        if lower:
            iv[0] = max(iv[0], bound)
        else:
            iv[1] = min(iv[1], bound)
        if iv[0] > iv[1]:
            raise _Contradiction(f"empty interval for {v}")

    def run(self) -> None:
        for _ in range(80):
            if not self._pass():
                break

    def _pass(self) -> bool:
        changed = False
        kept: list[tuple[Polynomial, str]] = []
        for poly, rel in self.work:
            if self.subst:
                poly = poly.substitute(self.subst)
            if poly.is_constant():
                c = poly.constant()
                if rel == "=" and c != 0:
                    raise _Contradiction(f"constant {c} = 0")
                if rel == ">=" and c < 0:
                    raise _Contradiction(f"constant {c} >= 0")
                changed = True
                continue
            mono_vars = poly.variables()
            if len(mono_vars) == 1 and poly.degree() == 1:
                v = mono_vars[0]
                c1 = poly.terms.get((v,), Fraction(0))
                c0 = poly.constant()
                if rel == "=":
                    self.bind(v, Polynomial.const(-c0 / c1))
                else:
                    self.tighten(v, -c0 / c1, lower=c1 > 0)
                changed = True
                continue
            kept.append((poly, rel))
        self.work = kept
        if changed:
            return True

        # alias merging: v - w = 0
        for idx, (poly, rel) in enumerate(self.work):
            if rel != "=" or poly.degree() != 1 or poly.constant() != 0:
                continue
            items = list(poly.terms.items())
            if len(items) != 2:
                continue
            (m1, c1), (m2, c2) = items
            if c1 != -c2:
                continue
            v, w = m1[0], m2[0]
            if var_key(v) < var_key(w):
                v, w = w, v  # replace the later variable by the earlier
            self.del_work(idx)
            self.bind(v, Polynomial.var(w))
            return True

        # safe single-definition substitution: v = e with v linear everywhere
        deg2_vars: set[Var] = set()
        for poly, _ in self.work:
            for m in poly.terms:
                if len(m) >= 2:
                    deg2_vars.update(m)
        for idx, (poly, rel) in enumerate(self.work):
            if rel != "=":
                continue
            for v in poly.variables():
                if v in deg2_vars:
                    continue
                c1 = poly.terms.get((v,))
                if not c1:
                    continue
                rest = Polynomial({m: c for m, c in poly.terms.items() if m != (v,)})
                if v in rest.variables():
                    continue
                e = rest.scale(Fraction(-1) / c1)
                if e.degree() > 1:
                    continue
                self.del_work(idx)
                self.bind(v, e)
                return True
        return False

    def del_work(self, idx: int) -> None:
        self.work = self.work[:idx] + self.work[idx + 1:]

    def extract(self, reduced_assignment: dict[Var, Fraction]) -> dict[Var, Fraction]:
        out = dict(reduced_assignment)
        for v, e in reversed(self.trail):
            out[v] = e.evaluate_exact(out)
        return out


def _pick_in_interval(lo: Fraction, hi: Fraction) -> Fraction:
    return (lo + hi) / 2


def _solve_linear_exact(work, intervals, opts: SolveOptions):
    """Gaussian elimination over the equalities, then Fourier-Motzkin over
    the inequalities and box bounds.  Returns a Fraction assignment over the
    variables of `work`+intervals, or Unsat, or None (give up)."""
    variables: dict[Var, None] = {}
    for poly, _ in work:
        for v in poly.variables():
            variables.setdefault(v, None)
    for v in intervals:
        variables.setdefault(v, None)
    var_order = sorted(variables, key=var_key)

    # eliminate equalities
    pivots: dict[Var, Polynomial] = {}  # v -> expression over free vars

    def reduce_poly(poly: Polynomial) -> Polynomial:
        while True:
            hit = None
            for m in poly.terms:
                if len(m) == 1 and m[0] in pivots:
                    hit = m[0]
                    break
            if hit is None:
                return poly
            c = poly.terms[(hit,)]
            poly = Polynomial({m: k for m, k in poly.terms.items() if m != (hit,)})
            poly = poly + pivots[hit].scale(c)

    ineqs: list[Polynomial] = []  # poly >= 0
    for poly, rel in work:
        if rel != "=":
            continue
        poly = reduce_poly(poly)
        vars_here = [v for v in var_order if (v,) in poly.terms and poly.terms[(v,)] != 0]
        if not vars_here:
            if poly.constant() != 0:
                return Unsat("inconsistent linear equalities")
            continue
        pv = vars_here[0]
        c = poly.terms[(pv,)]
        expr = Polynomial({m: -k / c for m, k in poly.terms.items() if m != (pv,)})
        for u, e in list(pivots.items()):
            pivots[u] = e.substitute({pv: expr})
        pivots[pv] = expr
    for poly, rel in work:
        if rel == "=":
            continue
        ineqs.append(reduce_poly(poly))

    free = [v for v in var_order if v not in pivots]
    # box bounds through the pivot expressions
    for v in var_order:
        lo, hi = intervals.get(v, (Fraction(0), Fraction(1)))
        expr = pivots.get(v, Polynomial.var(v))
        ineqs.append(expr - Polynomial.const(lo))
        ineqs.append(Polynomial.const(hi) - expr)

    if len(free) > opts.fm_var_limit:
        return None

    assignment = _fourier_motzkin(ineqs, free, opts)
    if assignment is None:
        return None
    if isinstance(assignment, Unsat):
        return assignment
    for v in var_order:
        if v in pivots:
            assignment[v] = pivots[v].evaluate_exact(assignment)
    return assignment


def _fourier_motzkin(ineqs: list[Polynomial], free: list[Var], opts: SolveOptions):
    """Feasibility of linear `poly >= 0` constraints; returns an interior-ish
    Fraction assignment, Unsat, or None when the elimination grows too big."""
    simplified = []
    for p in ineqs:
        if p.is_constant():
            if p.constant() < 0:
                return Unsat("inconsistent linear inequalities")
            continue
        simplified.append(p)

    def eliminate(polys: list[Polynomial], order: list[Var]):
        if not order:
            for p in polys:
                if p.constant() < 0:
                    return Unsat("inconsistent linear inequalities")
            return {}
        v = order[-1]
        lowers, uppers, rest = [], [], []
        for p in polys:
            c = p.terms.get((v,), Fraction(0))
            body = Polynomial({m: k for m, k in p.terms.items() if m != (v,)})
            if c == 0:
                rest.append(p)
            elif c > 0:
                lowers.append(body.scale(Fraction(-1) / c))  # v >= expr
            else:
                uppers.append(body.scale(Fraction(-1) / c))  # v <= expr
        combined = list(rest)
        for lo in lowers:
            for up in uppers:
                combined.append(up - lo)
        if len(combined) > opts.fm_row_limit:
            return None
        sub = eliminate(combined, order[:-1])
        if sub is None or isinstance(sub, Unsat):
            return sub
        lo_val = max((p.evaluate_exact(sub) for p in lowers), default=Fraction(0))
        hi_val = min((p.evaluate_exact(sub) for p in uppers), default=Fraction(1))
        if lo_val > hi_val:
            return Unsat("inconsistent linear inequalities")
        sub[v] = _pick_in_interval(lo_val, hi_val)
        return sub

    return eliminate(simplified, list(free))


class _Compiled:
    """Float view of a normalized constraint list for the numeric layer."""

    def __init__(self, work, variables: list[Var], eps: float):
        self.variables = variables
        self.index = {v: i for i, v in enumerate(variables)}
        n = len(variables)
        term_c, term_i, term_j, term_row = [], [], [], []
        consts = []
        self.is_eq = []
        for row, (poly, rel) in enumerate(work):
            consts.append(float(poly.constant()))
            self.is_eq.append(rel == "=")
            for m, c in poly.terms.items():
                if m == ():
                    continue
                if len(m) == 1:
                    term_i.append(self.index[m[0]]); term_j.append(-1)
                elif len(m) == 2:
                    term_i.append(self.index[m[0]]); term_j.append(self.index[m[1]])
                else:  # degree > 2 never arises from the calculus
                    raise ValueError("numeric layer supports degree <= 2 only")
                term_c.append(float(c))
                term_row.append(row)
        self.term_c = np.array(term_c)
        self.term_i = np.array(term_i, dtype=int)
        self.term_j = np.array(term_j, dtype=int)
        self.term_row = np.array(term_row, dtype=int)
        self.consts = np.array(consts)
        self.eq_mask = np.array(self.is_eq, dtype=bool)
        self.n_rows = len(work)
        self.n_vars = n

    def values(self, X: np.ndarray) -> np.ndarray:
        """Constraint values d (R, C) for points X (R, n): each row is
        poly(x); satisfaction means d==0 (eq) or d>=0 (ineq)."""
        R = X.shape[0]
        d = np.tile(self.consts, (R, 1))
        if len(self.term_row):
            xi = X[:, self.term_i]
            xj = np.ones((R, len(self.term_j)))
            pos = self.term_j >= 0
            if pos.any():
                xj[:, pos] = X[:, self.term_j[pos]]
            vals = self.term_c * xi * xj
            np.add.at(d.transpose(), self.term_row, vals.transpose())
        return d

    def violations(self, d: np.ndarray) -> np.ndarray:
        v = np.where(self.eq_mask, np.abs(d), np.maximum(0.0, -d))
        return v

    def grad_weights(self, d: np.ndarray) -> np.ndarray:
        # derivative of squared violation wrt d
        return np.where(self.eq_mask, 2.0 * d, 2.0 * np.minimum(d, 0.0))

    def gradient(self, X: np.ndarray, w: np.ndarray) -> np.ndarray:
        R = X.shape[0]
        g = np.zeros_like(X)
        if not len(self.term_row):
            return g
        wrow = w[:, self.term_row]
        xi = X[:, self.term_i]
        pos = self.term_j >= 0
        xj = np.ones((R, len(self.term_j)))
        xj[:, pos] = X[:, self.term_j[pos]]
        contrib_i = wrow * self.term_c * xj
        np.add.at(g.transpose(), self.term_i, contrib_i.transpose())
        contrib_j = (wrow * self.term_c * xi)[:, pos]
        np.add.at(g.transpose(), self.term_j[pos], contrib_j.transpose())
        return g


def _numeric_search(work, intervals, variables, opts: SolveOptions):
    comp = _Compiled(work, variables, opts.eps_strict)
    n = comp.n_vars
    lo = np.zeros(n)
    hi = np.ones(n)
    for v, (l, h) in intervals.items():
        if v in comp.index:
            lo[comp.index[v]] = float(l)
            hi[comp.index[v]] = float(h)
    rng = np.random.default_rng(opts.seed)
    R = max(1, opts.restarts)
    X = lo + (hi - lo) * rng.random((R, n))

    if opts.seed_point:
        for v, val in opts.seed_point.items():
            if v in comp.index:
                X[0, comp.index[v]] = min(max(val, lo[comp.index[v]]),
                                          hi[comp.index[v]])

    if n == 0:
        d = comp.values(X[:1])
        if comp.violations(d).max(initial=0.0) <= opts.tol:
            return {}
        return None

    # Adam on the sum of squared violations
    m_t = np.zeros_like(X)
    v_t = np.zeros_like(X)
    lr = 0.08
    for t in range(1, opts.iterations + 1):
        d = comp.values(X)
        w = comp.grad_weights(d)
        g = comp.gradient(X, w)
        m_t = 0.9 * m_t + 0.1 * g
        v_t = 0.999 * v_t + 0.001 * g * g
        mhat = m_t / (1 - 0.9 ** t)
        vhat = v_t / (1 - 0.999 ** t)
        X = X - lr * mhat / (np.sqrt(vhat) + 1e-12)
        np.clip(X, lo, hi, out=X)
        if t == opts.iterations // 2:
            lr *= 0.3

    d = comp.values(X)
    maxviol = comp.violations(d).max(axis=1) if comp.n_rows else np.zeros(R)
    order = np.argsort(maxviol, kind="stable")

    for ridx in order[:8]:
        x = X[ridx].copy()
        x = _polish(comp, x, lo, hi, opts)
        d1 = comp.values(x[None, :])
        mv = comp.violations(d1).max(initial=0.0)
        if mv <= opts.tol:
            return {v: float(x[comp.index[v]]) for v in variables}
    return None


def _polish(comp: _Compiled, x: np.ndarray, lo, hi, opts: SolveOptions) -> np.ndarray:
    """Gauss-Newton on the active residuals with step damping."""
    n = comp.n_vars
    for _ in range(opts.polish_iterations):
        d = comp.values(x[None, :])[0]
        res = np.where(comp.eq_mask, d, np.minimum(d, 0.0))
        active = comp.eq_mask | (d < opts.tol)
        if not active.any():
            break
        rows = np.nonzero(active)[0]
        J = np.zeros((len(rows), n))
        row_pos = {r: k for k, r in enumerate(rows)}
        if len(comp.term_row):
            xi = x[comp.term_i]
            pos = comp.term_j >= 0
            xj = np.ones(len(comp.term_j))
            xj[pos] = x[comp.term_j[pos]]
            for t in range(len(comp.term_row)):
                r = comp.term_row[t]
                if r in row_pos:
                    J[row_pos[r], comp.term_i[t]] += comp.term_c[t] * xj[t]
                    if comp.term_j[t] >= 0:
                        J[row_pos[r], comp.term_j[t]] += comp.term_c[t] * xi[t]
        r_vec = res[rows]
        if np.abs(r_vec).max(initial=0.0) <= opts.tol * 0.1:
            break
        step, *_ = np.linalg.lstsq(J, -r_vec, rcond=None)
        best = x
        best_val = float(np.square(res).sum())
        for damping in (1.0, 0.5, 0.25, 0.1):
            cand = np.clip(x + damping * step, lo, hi)
            dc = comp.values(cand[None, :])[0]
            rc = np.where(comp.eq_mask, dc, np.minimum(dc, 0.0))
            val = float(np.square(rc).sum())
            if val < best_val:
                best, best_val = cand, val
                break
        if best is x:
            break
        x = best
    return x


def _seeded_completion(work, intervals, variables, opts: SolveOptions):
    """Fix the seeded variables exactly and solve the induced system when it
    is linear in the remaining ones; used to honor known policies."""
    seed = opts.seed_point or {}
    fixed = {v: to_fraction(val) for v, val in seed.items() if v in set(variables)}
    if not fixed:
        return None
    sub = {v: Polynomial.const(c) for v, c in fixed.items()}
    reduced = [(poly.substitute(sub), rel) for poly, rel in work]
    if any(p.degree() > 1 for p, _ in reduced):
        return None
    red_intervals = {v: iv for v, iv in intervals.items() if v not in fixed}
    for v, c in fixed.items():
        lo, hi = intervals.get(v, (Fraction(0), Fraction(1)))
        if not (lo <= c <= hi):
            return None
    result = _solve_linear_exact(reduced, red_intervals, opts)
    if result is None or isinstance(result, Unsat):
        return None
    result.update(fixed)
    return result


def solve(program: ConstraintProgram, options: Optional[SolveOptions] = None) -> SolveResult:
    """Solve a constraint program.

    Solutions carry residual <= options.tol.  Unsat is only reported when
    proven by the exact layers; the numeric layer yields Unknown on failure.
    """
    opts = options or SolveOptions()
    eps = to_fraction(opts.eps_strict)

    pre = _Presolve(program, eps)
    try:
        pre.run()
    except _Contradiction as exc:
        return Unsat(str(exc))

    work = pre.work
    intervals = {v: tuple(iv) for v, iv in pre.intervals.items()}

    def finish(reduced: dict[Var, Fraction]) -> Solution:
        bound = {v for v, _ in pre.trail}
        needed = set(program.variables)
        for _, e in pre.trail:
            needed.update(e.variables())
        full = dict(reduced)
        for v in needed:
            if v not in full and v not in bound:
                lo, hi = intervals.get(v, (Fraction(0), Fraction(1)))
                full[v] = _pick_in_interval(lo, hi)
        full = pre.extract(full)
        floats = {v: float(full[v]) for v in program.variables}
        report = check(program, floats, eps_strict=opts.eps_strict)
        return Solution(floats, report.max_violation)

    linear = all(p.degree() <= 1 for p, _ in work)
    if linear:
        result = _solve_linear_exact(work, dict(intervals), opts)
        if isinstance(result, Unsat):
            return result
        if result is not None:
            sol = finish(result)
            if sol.residual <= opts.tol:
                return sol
            return Unknown("exact solution failed the residual check")
        # fall through to the numeric layer without an Unsat claim

    if opts.seed_point:
        seeded = _seeded_completion(work, dict(intervals), _work_vars(work, intervals), opts)
        if seeded is not None:
            sol = finish(seeded)
            if sol.residual <= opts.tol:
                return sol

    variables = _work_vars(work, intervals)
    reduced = _numeric_search(work, intervals, variables, opts)
    if reduced is None:
        return Unknown("numeric search exhausted its restart budget")
    sol = finish({v: to_fraction(x) for v, x in reduced.items()})
    if sol.residual <= opts.tol:
        return sol
    return Unknown("numeric candidate failed the residual check")


def _work_vars(work, intervals) -> list[Var]:
    seen: dict[Var, None] = {}
    for poly, _ in work:
        for v in poly.variables():
            seen.setdefault(v, None)
    return sorted(seen, key=var_key)


# ---------------------------------------------------------------------------
# Export / import

@dataclass
class NameMaps:
    modes: tuple[str, ...] = ()
    states: tuple[str, ...] = ()
    actions: tuple[str, ...] = ()

    def mode(self, i: int) -> str:
        return self.modes[i] if i < len(self.modes) else str(i)

    def state(self, i: int) -> str:
        return self.states[i] if i < len(self.states) else str(i)

    def action(self, i: int) -> str:
        return self.actions[i] if i < len(self.actions) else str(i)


def _fset_hash(fset: FormulaSet) -> str:
    text = "|".join(pp(f) for f in fset)
    return hashlib.sha1(text.encode()).hexdigest()[:8]


def var_name(v: Var, names: Optional[NameMaps] = None) -> str:
    names = names or NameMaps()
    if isinstance(v, ActionVar):
        return f"a_{names.mode(v.mode)}_{names.state(v.state)}_{names.action(v.action)}"
    if isinstance(v, FormulaVar):
        return (f"x_{v.node}_{names.mode(v.mode)}_{names.state(v.state)}"
                f"__{_fset_hash(v.fset)}")
    return v.name


def _num_str(c: Fraction) -> str:
    if c.denominator == 1:
        return str(c.numerator)
    return f"(/ {c.numerator} {c.denominator})"


def _poly_sexp(poly: Polynomial, name_of) -> str:
    parts = []
    for m, c in sorted(poly.terms.items(),
                       key=lambda kv: tuple(var_key(v) for v in kv[0])):
        factors = [_num_str(c)] + [name_of(v) for v in m]
        if len(factors) == 1:
            parts.append(factors[0])
        else:
            parts.append("(* " + " ".join(factors) + ")")
    if not parts:
        return "0"
    if len(parts) == 1:
        return parts[0]
    return "(+ " + " ".join(parts) + ")"


_REL_SEXP = {"=": "=", ">=": ">=", ">": ">"}


def export_program(program: ConstraintProgram, fmt: str = "text",
                   names: Optional[NameMaps] = None) -> str:
    """Serialize a program; fmt "text" is the smtlib-like form, "human" a
    one-constraint-per-line rendering with a variable legend."""
    names = names or NameMaps()
    name_of = lambda v: var_name(v, names)
    ordered_vars = sorted(program.variables, key=var_key)
    if fmt == "text":
        lines = ["; pctlstar constraint program",
                 f"; variables: {len(ordered_vars)} constraints: {len(program.constraints)}"]
        for v in ordered_vars:
            if isinstance(v, FormulaVar):
                lines.append(f"; {name_of(v)} : node {v.node} at "
                             f"({names.mode(v.mode)},{names.state(v.state)}) set {v.fset!r}")
        for v in ordered_vars:
            n = name_of(v)
            lines.append(f"(declare-const {n} Real)")
            lines.append(f"(assert (>= {n} 0))")
            lines.append(f"(assert (<= {n} 1))")
        for c in program.constraints:
            poly, rel = c.normalized()
            lines.append(f"(assert ({_REL_SEXP[rel]} {_poly_sexp(poly, name_of)} 0))")
        lines.append("(check-sat)")
        return "\n".join(lines) + "\n"
    if fmt == "human":
        lines = [f"constraint program: {len(ordered_vars)} variables, "
                 f"{len(program.constraints)} constraints (all in [0,1])"]
        for c in program.constraints:
            poly, rel = c.normalized()
            terms = []
            for m, k in sorted(poly.terms.items(),
                               key=lambda kv: tuple(var_key(v) for v in kv[0])):
                coeff = "" if (k == 1 and m) else f"{float(k):g}"
                body = "*".join(name_of(v) for v in m)
                terms.append(coeff + ("*" if coeff and body else "") + body if body
                             else f"{float(k):g}")
            rel_str = {"=": "=", ">=": ">=", ">": ">"}[rel]
            lines.append("  " + " + ".join(terms) + f" {rel_str} 0")
        return "\n".join(lines) + "\n"
    raise ValueError(f"unknown export format {fmt!r}")


def _tokenize_sexp(text: str) -> list[str]:
    return text.replace("(", " ( ").replace(")", " ) ").split()


def _parse_sexp(tokens: list[str], pos: int):
    tok = tokens[pos]
    if tok == "(":
        items = []
        pos += 1
        while tokens[pos] != ")":
            item, pos = _parse_sexp(tokens, pos)
            items.append(item)
        return items, pos + 1
    return tok, pos + 1


def _sexp_to_poly(node) -> Polynomial:
    if isinstance(node, str):
        try:
            return Polynomial.const(Fraction(node))
        except ValueError:
            return Polynomial.var(NamedVar(node))
    head = node[0]
    args = node[1:]
    if head == "+":
        out = Polynomial()
        for a in args:
            out = out + _sexp_to_poly(a)
        return out
    if head == "*":
        out = Polynomial.const(1)
        for a in args:
            out = out * _sexp_to_poly(a)
        return out
    if head == "/":
        return Polynomial.const(Fraction(int(args[0]), int(args[1])))
    if head == "-":
        if len(args) == 1:
            return -_sexp_to_poly(args[0])
        out = _sexp_to_poly(args[0])
        for a in args[1:]:
            out = out - _sexp_to_poly(a)
        return out
    raise ValueError(f"bad expression head {head!r}")


def import_program(text: str) -> ConstraintProgram:
    """Parse the smtlib-like export back into a program over NamedVars.
    Variable box bounds are recognized and dropped (they are implicit)."""
    constraints = []
    for line in text.splitlines():
        line = line.strip()
        if not line.startswith("(assert"):
            continue
        tokens = _tokenize_sexp(line)
        node, _ = _parse_sexp(tokens, 0)
        rel_node = node[1]
        rel, lhs, rhs = rel_node[0], rel_node[1], rel_node[2]
        lp, rp = _sexp_to_poly(lhs), _sexp_to_poly(rhs)
        # skip the box bounds emitted per variable
        if rel in (">=", "<=") and (
                (len(lp.terms) == 1 and lp.degree() == 1 and rp.is_constant()
                 and rp.constant() in (0, 1)
                 and list(lp.terms.values())[0] == 1)):
            continue
        constraints.append(Constraint(lp, rel, rp))
    return ConstraintProgram.from_constraints(constraints)
