"""The sequent/tableau engine.

A derivation is grown from a root sequent by always applying the
highest-preference applicable rule.  Don't-know rules (the probability-
quantifier case split and the action guesses) consult a choice callback, so
construction and committing to alternatives happen in one pass; union
branching expands all children.  The probability-quantifier rule triggers
recursive sub-derivations which join the same forest and share the global
variable store.

Each node carries the constraints added by the inference that created it;
the union over a tree's nodes is exactly the union of the branch stores at
its leaves.  Conclusions of pivot-preserving rules (the case split, action
guesses, and the distribution constraint) reuse the premise's variable.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Iterable, Optional

from .formula import (
    And, Atom, FormulaSet, Next, Not, Prob, TrueF, Until,
    classical_eval, complement, is_classical, is_state_formula, pp,
    push_negation, rewrite_p,
)
from .model import Mdp, PolicySkeleton
from .program import (
    ActionVar, Constraint, FormulaVar, Polynomial, to_fraction,
)

__all__ = [
    "Node", "Tree", "Tableau", "BudgetExceeded", "EngineError",
    "yes_blocked", "no_blocked", "forest_to_dot",
    "INNER", "LEAF_X", "LEAF_CHECK", "LEAF_YES", "LEAF_NO",
]

INNER = "inner"
LEAF_X = "leaf_x"          # crossed-out leaf, probability 0
LEAF_CHECK = "leaf_check"  # checked leaf, probability 1
LEAF_YES = "leaf_yes"      # yes-loop leaf
LEAF_NO = "leaf_no"        # no-loop leaf

PLUS_LINK = "plus"
X_LINK = "x"


class EngineError(RuntimeError):
    pass


class BudgetExceeded(EngineError):
    pass


@dataclass
class Node:
    nid: int
    mode: int
    state: int
    fset: FormulaSet
    parent: Optional[int]
    edge: str                      # link kind from the parent
    var: FormulaVar
    status: str = INNER
    rule: str = ""                 # rule applied at this node (inner nodes)
    children: list[int] = field(default_factory=list)
    backlink: Optional[int] = None
    constraints: tuple[Constraint, ...] = ()
    marks: dict = field(default_factory=dict)  # additions on this node only
    choice: Optional[tuple] = None

    @property
    def pair(self) -> tuple[int, int]:
        return (self.mode, self.state)

    @property
    def is_poised(self) -> bool:
        return self.status == INNER and self.fset.is_poised

    @property
    def is_leaf(self) -> bool:
        return self.status != INNER


@dataclass
class Tree:
    root: int
    node_ids: list[int] = field(default_factory=list)


def _pvar(poly_var) -> Polynomial:
    return Polynomial.var(poly_var)


_REL_NORM = {">=": (">=", True), "<": (">=", False),
             ">": (">", True), "<=": (">", False)}


class Tableau:
    """Derivation engine over a shared node store.

    `choose(kind, key)` resolves don't-know branching: kind "A" with key
    (mode, state, action) returns True to prescribe the action; kind "P"
    with key (mode, state, body, rel, bound) returns the guessed truth of
    the normalized comparison.
    """

    def __init__(self, mdp: Mdp, skeleton: PolicySkeleton,
                 choose: Callable[[str, tuple], bool],
                 deterministic: bool = False, budget: int = 10 ** 6):
        self.mdp = mdp
        self.skeleton = skeleton
        self.choose = choose
        self.deterministic = deterministic
        self.budget = budget
        self.nodes: list[Node] = []
        self.trees: list[Tree] = []
        self.p_memo: dict[tuple, FormulaVar] = {}
        self._current_tree: Optional[Tree] = None

    # -- node plumbing ------------------------------------------------------

    def node(self, nid: int) -> Node:
        return self.nodes[nid]

    def _new_node(self, mode, state, fset, parent, edge, var=None,
                  constraints=(), marks=None, status=INNER,
                  backlink=None, choice=None) -> Node:
        if len(self.nodes) >= self.budget:
            raise BudgetExceeded(
                f"node budget {self.budget} exhausted; the calculus "
                f"terminates, so this signals an engine bug or a tiny budget")
        nid = len(self.nodes)
        if var is None:
            var = FormulaVar(nid, mode, state, fset)
        n = Node(nid, mode, state, fset, parent, edge, var,
                 status=status, constraints=tuple(constraints),
                 marks=marks or {}, backlink=backlink, choice=choice)
        self.nodes.append(n)
        if parent is not None:
            self.nodes[parent].children.append(nid)
        self._current_tree.node_ids.append(nid)
        return n

    def mark(self, node: Node, key):
        while True:
            if key in node.marks:
                return node.marks[key]
            if node.parent is None:
                return None
            node = self.nodes[node.parent]

    def ancestors(self, node: Node):
        while node.parent is not None:
            node = self.nodes[node.parent]
            yield node

    # -- derivations --------------------------------------------------------

    def derive(self, phi) -> Tree:
        """Top-level derivation: the root store forces phi to be true at the
        initial policy state."""
        s0 = self.mdp.initial
        m0 = self.skeleton.start[s0]
        fset = FormulaSet([phi])
        root_var = FormulaVar(len(self.nodes), m0, s0, fset)
        init = (Constraint(_pvar(root_var), "=", Polynomial.const(1)),)
        return self.expand_tree(m0, s0, fset, init)

    def expand_tree(self, mode: int, state: int, fset: FormulaSet,
                    init_constraints: Iterable[Constraint] = ()) -> Tree:
        """Expand a full tree from `init ⊢ (mode,state): fset`."""
        tree = Tree(root=len(self.nodes))
        outer = self._current_tree
        self._current_tree = tree
        try:
            root = self._new_node(mode, state, fset, None, PLUS_LINK,
                                  constraints=tuple(init_constraints))
            todo = [root.nid]
            while todo:
                nid = todo.pop()
                n = self.nodes[nid]
                if n.is_leaf:
                    continue
                children = self._apply_rule(n)
                todo.extend(c.nid for c in reversed(children) if not c.is_leaf)
        finally:
            self._current_tree = outer
        self.trees.append(tree)
        return tree

    # -- rule dispatch, in decreasing order of preference --------------------

    def _apply_rule(self, u: Node) -> list[Node]:
        mdp = self.mdp
        labels = mdp.labels[u.state]
        fset = u.fset

        classical_true = None
        classical_false = None
        for psi in fset:
            if is_classical(psi):
                if classical_eval(labels, psi):
                    if classical_true is None:
                        classical_true = psi
                elif classical_false is None:
                    classical_false = psi

        if classical_true is not None:
            return self._gamma_one(u, "TOP", fset.remove(classical_true))
        if classical_false is not None:
            return self._pseudo(u, "CROSS", LEAF_X, value=0)
        if len(fset) == 0:
            return self._pseudo(u, "CHECK", LEAF_CHECK, value=1)

        for psi in fset:
            if isinstance(psi, Not) and isinstance(psi.child, Not):
                return self._gamma_one(u, "NEGNEG", fset.replace(psi, psi.child.child))
        for psi in fset:
            if isinstance(psi, Not) and isinstance(psi.child, Prob):
                return self._gamma_one(u, "NEGP", fset.replace(psi, push_negation(psi)))
        for psi in fset:
            if isinstance(psi, Prob) and isinstance(psi.body, Not):
                return self._gamma_one(u, "PNEG", fset.replace(psi, push_negation(psi)))
        for psi in fset:
            if isinstance(psi, And):
                return self._gamma_one(u, "AND", fset.replace(psi, psi.lhs, psi.rhs))
        for psi in fset:
            if isinstance(psi, Not) and isinstance(psi.child, And):
                return self._apply_negand(u, psi)
        for psi in fset:
            if isinstance(psi, Prob):
                rewritten = rewrite_p(psi)
                if rewritten is not None:
                    return self._gamma_one(u, "PP1", fset.replace(psi, rewritten))
        for psi in fset:
            if isinstance(psi, Prob) and is_state_formula(psi.body):
                if psi.cmp in (">", ">="):
                    return self._gamma_one(u, "PP2", fset.replace(psi, psi.body))
                return self._gamma_one(u, "PP3", fset.replace(psi, Not(psi.body)))
        for psi in fset:
            if isinstance(psi, Prob) and self._p_mark(u, psi) is None:
                return self._apply_p(u, psi)
        for psi in fset:
            if isinstance(psi, Prob) and self._p_mark(u, psi) == "left":
                return self._gamma_one(u, "PTOP", fset.remove(psi))
        for psi in fset:
            if isinstance(psi, Prob) and self._p_mark(u, psi) == "right":
                return self._pseudo(u, "PCROSS", LEAF_X, value=0)
        for psi in fset:
            if isinstance(psi, Until):
                return self._apply_until(u, psi)
        for psi in fset:
            if isinstance(psi, Not) and isinstance(psi.child, Until):
                return self._apply_neg_until(u, psi)
        for psi in fset:
            if isinstance(psi, Not) and isinstance(psi.child, Next):
                return self._gamma_one(u, "NEGX",
                                       fset.replace(psi, Next(Not(psi.child.child))))

        if not fset.is_poised:
            raise EngineError(f"no rule applies to non-poised set {fset!r}")

        for a in mdp.enabled[u.state]:
            if self.mark(u, ("A", u.mode, u.state, a)) is None:
                return self._apply_a(u, a)
        if self.mark(u, ("presc", u.mode, u.state)) is None:
            return self._apply_prescribed(u)

        blocker = yes_blocked(self, u)
        if blocker is not None:
            return self._apply_loop(u, "Yes-Loop", LEAF_YES, blocker)
        blocker = no_blocked(self, u)
        if blocker is not None:
            return self._apply_loop(u, "No-Loop", LEAF_NO, blocker)

        return self._apply_x(u)

    def dispatch_name(self, u: Node) -> str:
        """Name of the highest-preference rule applicable at u, computed the
        same way _apply_rule does; used by the preference audit."""
        return u.rule  # recorded at application time

    # -- rule bodies ---------------------------------------------------------

    def _gamma_one(self, u: Node, rule: str, new_set: FormulaSet) -> list[Node]:
        u.rule = rule
        child = self._new_node(u.mode, u.state, new_set, u.nid, PLUS_LINK)
        child.constraints = (Constraint(_pvar(u.var), "=", _pvar(child.var)),)
        return [child]

    def _pseudo(self, u: Node, rule: str, status: str, value: int,
                backlink: Optional[int] = None,
                extra: tuple[Constraint, ...] = ()) -> list[Node]:
        u.rule = rule
        cons = extra or (Constraint(_pvar(u.var), "=", Polynomial.const(value)),)
        child = self._new_node(u.mode, u.state, u.fset, u.nid, PLUS_LINK,
                               var=u.var, constraints=cons, status=status,
                               backlink=backlink)
        return [child]

    def _apply_negand(self, u: Node, psi: Not) -> list[Node]:
        u.rule = "NEGAND"
        conj: And = psi.child
        rest = u.fset.remove(psi)
        left = self._new_node(u.mode, u.state, rest.add(Not(conj.lhs)),
                              u.nid, PLUS_LINK)
        right = self._new_node(u.mode, u.state,
                               rest.add(conj.lhs, Not(conj.rhs)),
                               u.nid, PLUS_LINK)
        gamma = Constraint(_pvar(u.var), "=", _pvar(left.var) + _pvar(right.var))
        right.constraints = (gamma,)
        return [left, right]

    def _apply_until(self, u: Node, psi: Until) -> list[Node]:
        u.rule = "U"
        rest = u.fset.remove(psi)
        left = self._new_node(u.mode, u.state, rest.add(psi.rhs), u.nid, PLUS_LINK)
        right = self._new_node(u.mode, u.state,
                               rest.add(psi.lhs, Not(psi.rhs), Next(psi)),
                               u.nid, PLUS_LINK)
        gamma = Constraint(_pvar(u.var), "=", _pvar(left.var) + _pvar(right.var))
        right.constraints = (gamma,)
        return [left, right]

    def _apply_neg_until(self, u: Node, psi: Not) -> list[Node]:
        u.rule = "NEGU"
        until: Until = psi.child
        rest = u.fset.remove(psi)
        left = self._new_node(u.mode, u.state,
                              rest.add(Not(until.lhs), Not(until.rhs)),
                              u.nid, PLUS_LINK)
        right = self._new_node(u.mode, u.state,
                               rest.add(until.lhs, Not(until.rhs), Next(psi)),
                               u.nid, PLUS_LINK)
        gamma = Constraint(_pvar(u.var), "=", _pvar(left.var) + _pvar(right.var))
        right.constraints = (gamma,)
        return [left, right]

    def _p_mark(self, u: Node, psi: Prob) -> Optional[str]:
        """Which comparison for psi's body is already in the branch store,
        tested modulo node labels of variables."""
        base = ("P", u.mode, u.state, psi.body)
        if self.mark(u, base + (psi.cmp, psi.bound)) is not None:
            return "left"
        if self.mark(u, base + (complement(psi.cmp), psi.bound)) is not None:
            return "right"
        return None

    def _apply_p(self, u: Node, psi: Prob) -> list[Node]:
        u.rule = "P"
        body = psi.body
        memo_key = (u.mode, u.state, body)
        if memo_key not in self.p_memo:
            sub = self.expand_tree(u.mode, u.state, FormulaSet([body]))
            self.p_memo[memo_key] = self.nodes[sub.root].var
        target = self.p_memo[memo_key]
        rel0, polarity = _REL_NORM[psi.cmp]
        key = (u.mode, u.state, body, rel0, psi.bound)
        truth = self.choose("P", key)
        left = truth == polarity
        rel = psi.cmp if left else complement(psi.cmp)
        con = Constraint(_pvar(target), rel, Polynomial.const(psi.bound))
        child = self._new_node(
            u.mode, u.state, u.fset, u.nid, PLUS_LINK, var=u.var,
            constraints=(con,),
            marks={("P", u.mode, u.state, body, rel, psi.bound): True},
            choice=("P", key, truth))
        return [child]

    def _apply_a(self, u: Node, a: int) -> list[Node]:
        u.rule = "A"
        key = (u.mode, u.state, a)
        prescribe = self.choose("A", key)
        av = ActionVar(u.mode, u.state, a)
        if not prescribe:
            con = Constraint(_pvar(av), "=", Polynomial.const(0))
        elif self.deterministic:
            con = Constraint(_pvar(av), "=", Polynomial.const(1))
        else:
            con = Constraint(_pvar(av), ">", Polynomial.const(0))
        child = self._new_node(
            u.mode, u.state, u.fset, u.nid, PLUS_LINK, var=u.var,
            constraints=(con,),
            marks={("A",) + key: "pos" if prescribe else "zero"},
            choice=("A", key, prescribe))
        return [child]

    def _prescribed(self, u: Node) -> list[int]:
        return [a for a in self.mdp.enabled[u.state]
                if self.mark(u, ("A", u.mode, u.state, a)) == "pos"]

    def _apply_prescribed(self, u: Node) -> list[Node]:
        u.rule = "PRESCRIBED"
        total = Polynomial()
        for a in self._prescribed(u):
            total = total + _pvar(ActionVar(u.mode, u.state, a))
        con = Constraint(total, "=", Polynomial.const(1))
        child = self._new_node(u.mode, u.state, u.fset, u.nid, PLUS_LINK,
                               var=u.var, constraints=(con,),
                               marks={("presc", u.mode, u.state): True})
        return [child]

    def _apply_loop(self, u: Node, rule: str, status: str, v: Node) -> list[Node]:
        extra = (Constraint(_pvar(u.var), "=", _pvar(v.var)),)
        return self._pseudo(u, rule, status, value=0, backlink=v.nid, extra=extra)

    def _apply_x(self, u: Node) -> list[Node]:
        u.rule = "X"
        mdp = self.mdp
        m2 = self.skeleton.delta[u.mode][u.state]
        prescribed = self._prescribed(u)
        succs: dict[int, None] = {}
        for a in prescribed:
            for t in mdp.succ(u.state, a):
                succs.setdefault(t, None)
        targets = sorted(succs)
        next_set = FormulaSet(psi.child for psi in u.fset)
        if not targets:
            # empty prescribed set: the sum is empty, pinning the pivot to 0;
            # the distribution constraint already made the store inconsistent
            return self._pseudo(u, "X", LEAF_X, value=0)
        children = [self._new_node(m2, t, next_set, u.nid, X_LINK) for t in targets]
        child_var = {t: c.var for t, c in zip(targets, children)}
        rhs = Polynomial()
        for a in prescribed:
            inner = Polynomial()
            for t, p in mdp.trans[(u.state, a)]:
                inner = inner + _pvar(child_var[t]).scale(to_fraction(p))
            if self.deterministic:
                rhs = rhs + inner
            else:
                rhs = rhs + _pvar(ActionVar(u.mode, u.state, a)) * inner
        children[-1].constraints = (Constraint(_pvar(u.var), "=", rhs),)
        return children


# ---------------------------------------------------------------------------
# Blocking

def _x_step_ancestors(tab: Tableau, w: Node) -> list[Node]:
    """Ancestors at which the X rule fired with a sequent indistinguishable
    from w, ordered root-first.  The interludes that only add action
    constraints keep the pivot, so only actual X premises count as earlier
    occurrences of the state."""
    out = []
    for anc in tab.ancestors(w):
        if anc.rule == "X" and anc.pair == w.pair and anc.fset == w.fset:
            out.append(anc)
    out.reverse()
    return out


def _eventualities(fset: FormulaSet) -> list[Until]:
    return [f.child for f in fset
            if isinstance(f, Next) and isinstance(f.child, Until)]


def _fulfilled_between(tab: Tableau, lo: Node, hi: Node, goal) -> bool:
    """True iff some node x with lo < x <= hi has goal in its formula set."""
    n = hi
    while n.nid != lo.nid:
        if goal in n.fset:
            return True
        if n.parent is None:
            break
        n = tab.nodes[n.parent]
    return False


def yes_blocked(tab: Tableau, w: Node) -> Optional[Node]:
    """The closest earlier occurrence v of w's sequent such that every
    X-eventuality of v is fulfilled on the way from v to w, or None."""
    candidates = _x_step_ancestors(tab, w)
    for v in reversed(candidates):  # closest first
        evs = _eventualities(v.fset)
        if all(_fulfilled_between(tab, v, w, e.rhs) for e in evs):
            return v
    return None


def no_blocked(tab: Tableau, w: Node) -> Optional[Node]:
    """The topmost u of a chain u < v < w of indistinguishable occurrences
    where the window (v, w] fulfills no X-eventuality of u beyond those
    already fulfilled in (u, v], or None."""
    candidates = _x_step_ancestors(tab, w)
    for i in range(len(candidates)):
        for j in range(i + 1, len(candidates)):
            u, v = candidates[i], candidates[j]
            ok = True
            for e in _eventualities(u.fset):
                if (_fulfilled_between(tab, v, w, e.rhs)
                        and not _fulfilled_between(tab, u, v, e.rhs)):
                    ok = False
                    break
            if ok:
                return u
    return None


# ---------------------------------------------------------------------------
# Trace export

def forest_to_dot(tab: Tableau, highlight: Iterable[int] = ()) -> str:
    """DOT rendering of the derivation forest: nodes show the pivot, edges
    carry the rule name and link kind, backlinks are dashed.  Nodes in
    `highlight` (e.g. detected component roots) are drawn bold."""
    mdp, sk = tab.mdp, tab.skeleton
    hi = set(highlight)
    lines = ["digraph tableau {", "  node [shape=box, fontsize=10];"]
    status_mark = {LEAF_X: " [x]", LEAF_CHECK: " [ok]",
                   LEAF_YES: " [yes-loop]", LEAF_NO: " [no-loop]"}
    for tree_idx, tree in enumerate(tab.trees):
        lines.append(f"  subgraph cluster_{tree_idx} {{")
        lines.append(f"    label=\"tree {tree_idx}\";")
        for nid in tree.node_ids:
            n = tab.nodes[nid]
            pivot = f"({sk.modes[n.mode]},{mdp.states[n.state]}): {n.fset!r}"
            label = f"u{nid} {pivot}{status_mark.get(n.status, '')}"
            style = ", style=bold" if nid in hi else ""
            lines.append(f"    n{nid} [label=\"{_dot_escape(label)}\"{style}];")
        lines.append("  }")
    for n in tab.nodes:
        for c in n.children:
            child = tab.nodes[c]
            kind = "X" if child.edge == X_LINK else "+"
            rule = n.rule or ""
            lines.append(
                f"  n{n.nid} -> n{c} [label=\"{_dot_escape(rule)} {kind}\"];")
        if n.backlink is not None:
            lines.append(f"  n{n.nid} -> n{n.backlink} [style=dashed];")
    lines.append("}")
    return "\n".join(lines) + "\n"


def _dot_escape(text: str) -> str:
    return text.replace("\\", "\\\\").replace('"', '\\"')
