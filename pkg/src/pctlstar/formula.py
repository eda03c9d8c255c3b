"""PCTL* syntax: AST, parser, classical evaluation and the rewrite library.

State formulas are a subset of path formulas, so a single node hierarchy is
used.  ``is_state_formula`` recovers the distinction.  Derived operators
(F, G, R, W, ``|``, ``->``, ``false``) are surface syntax only and are
desugared by the parser; the core connectives are ``true``, atoms, ``!``,
``&``, ``X``, ``U`` and the probability quantifier ``P~z``.
"""

from __future__ import annotations

from dataclasses import dataclass
from fractions import Fraction
from functools import lru_cache
from typing import Iterable, Iterator, Optional, Union

__all__ = [
    "Formula", "TrueF", "Atom", "Not", "And", "Next", "Until", "Prob",
    "TRUE", "FALSE", "Comparators", "complement", "flip",
    "is_state_formula", "is_proper_path_formula", "is_classical",
    "classical_eval", "rewrite_p", "push_negation", "closure_bound",
    "FormulaSet", "parse", "pp", "ParseError", "sort_key",
]

Bound = Fraction


class Formula:
    """Base class for PCTL* formula nodes."""

    __slots__ = ()


@dataclass(frozen=True)
class TrueF(Formula):
    __slots__ = ()


@dataclass(frozen=True)
class Atom(Formula):
    name: str


@dataclass(frozen=True)
class Not(Formula):
    child: Formula


@dataclass(frozen=True)
class And(Formula):
    lhs: Formula
    rhs: Formula


@dataclass(frozen=True)
class Next(Formula):
    child: Formula


@dataclass(frozen=True)
class Until(Formula):
    lhs: Formula
    rhs: Formula


@dataclass(frozen=True)
class Prob(Formula):
    cmp: str
    bound: Fraction
    body: Formula

    def __post_init__(self):
        if self.cmp not in Comparators:
            raise ValueError(f"bad comparator {self.cmp!r}")
        if not (0 <= self.bound <= 1):
            raise ValueError(f"probability bound {self.bound} outside [0,1]")


TRUE = TrueF()
FALSE = Not(TRUE)

Comparators = ("<", "<=", ">", ">=")

_COMPLEMENT = {"<": ">=", "<=": ">", ">": "<=", ">=": "<"}
_FLIP = {"<": ">", "<=": ">=", ">": "<", ">=": "<="}


def complement(cmp: str) -> str:
    """Negation of a comparison: not (p ~ z)  iff  p ~complement z."""
    return _COMPLEMENT[cmp]


def flip(cmp: str) -> str:
    """Mirror of a comparison, used when replacing p by 1-p."""
    return _FLIP[cmp]


def is_state_formula(f: Formula) -> bool:
    """True iff f is generated by the state-formula grammar (P bodies aside)."""
    if isinstance(f, (TrueF, Atom, Prob)):
        return True
    if isinstance(f, Not):
        return is_state_formula(f.child)
    if isinstance(f, And):
        return is_state_formula(f.lhs) and is_state_formula(f.rhs)
    return False


def is_proper_path_formula(f: Formula) -> bool:
    return not is_state_formula(f)


def is_classical(f: Formula) -> bool:
    """True iff f uses only atoms, true, ! and & (no P, X, U anywhere)."""
    if isinstance(f, (TrueF, Atom)):
        return True
    if isinstance(f, Not):
        return is_classical(f.child)
    if isinstance(f, And):
        return is_classical(f.lhs) and is_classical(f.rhs)
    return False


def classical_eval(labels: Iterable[str], f: Formula) -> bool:
    """Evaluate a classical formula under the interpretation `labels`."""
    labels = labels if isinstance(labels, (set, frozenset)) else frozenset(labels)
    if isinstance(f, TrueF):
        return True
    if isinstance(f, Atom):
        return f.name in labels
    if isinstance(f, Not):
        return not classical_eval(labels, f.child)
    if isinstance(f, And):
        return classical_eval(labels, f.lhs) and classical_eval(labels, f.rhs)
    raise ValueError(f"not a classical formula: {pp(f)}")


# ---------------------------------------------------------------------------
# Canonical order

_CMP_INDEX = {c: i for i, c in enumerate(Comparators)}


@lru_cache(maxsize=None)
def sort_key(f: Formula):
    """Total order key on ASTs: constructor rank, then recursive structure."""
    if isinstance(f, TrueF):
        return (0,)
    if isinstance(f, Atom):
        return (1, f.name)
    if isinstance(f, Not):
        return (2, sort_key(f.child))
    if isinstance(f, And):
        return (3, sort_key(f.lhs), sort_key(f.rhs))
    if isinstance(f, Next):
        return (4, sort_key(f.child))
    if isinstance(f, Until):
        return (5, sort_key(f.lhs), sort_key(f.rhs))
    if isinstance(f, Prob):
        return (6, _CMP_INDEX[f.cmp], f.bound, sort_key(f.body))
    raise TypeError(f)


class FormulaSet:
    """Duplicate-free set of path formulas in canonical order, read as a
    conjunction.  Iteration order is independent of insertion order."""

    __slots__ = ("_items", "_set", "_hash")

    def __init__(self, items: Iterable[Formula] = ()):
        uniq = set(items)
        object.__setattr__(self, "_items", tuple(sorted(uniq, key=sort_key)))
        object.__setattr__(self, "_set", frozenset(uniq))
        object.__setattr__(self, "_hash", hash(self._set))

    def __iter__(self) -> Iterator[Formula]:
        return iter(self._items)

    def __len__(self) -> int:
        return len(self._items)

    def __contains__(self, f: Formula) -> bool:
        return f in self._set

    def __eq__(self, other) -> bool:
        return isinstance(other, FormulaSet) and self._set == other._set

    def __hash__(self) -> int:
        return self._hash

    def __repr__(self) -> str:
        return "{" + ", ".join(pp(f) for f in self._items) + "}"

    def add(self, *fs: Formula) -> "FormulaSet":
        return FormulaSet(self._set.union(fs))

    def remove(self, f: Formula) -> "FormulaSet":
        if f not in self._set:
            raise KeyError(pp(f))
        return FormulaSet(self._set - {f})

    def replace(self, old: Formula, *new: Formula) -> "FormulaSet":
        return FormulaSet((self._set - {old}).union(new))

    @property
    def is_poised(self) -> bool:
        """All members are X-formulas and the set is nonempty."""
        return len(self._items) > 0 and all(isinstance(f, Next) for f in self._items)

    def key(self):
        return tuple(sort_key(f) for f in self._items)


# ---------------------------------------------------------------------------
# Rewrites

def rewrite_p(f: Formula) -> Optional[Formula]:
    """One-step match of the probability-quantifier simplifications.

    Returns the right-hand side for the trivial-bound rules and the
    nested-quantifier rules, or None when nothing matches.
    """
    if not isinstance(f, Prob):
        raise ValueError("rewrite_p expects a P formula")
    z = f.bound
    if f.cmp == ">=" and z == 0:
        return TRUE
    if f.cmp == ">" and z == 1:
        return FALSE
    if f.cmp == "<=" and z == 1:
        return TRUE
    if f.cmp == "<" and z == 0:
        return FALSE
    if isinstance(f.body, Prob):
        inner = f.body
        if f.cmp == ">=" and z != 0:
            return inner
        if f.cmp == ">" and z != 1:
            return inner
        if f.cmp == "<=":
            return Prob(">=", 1 - z, Prob(complement(inner.cmp), inner.bound, inner.body))
        if f.cmp == "<":
            return Prob(">", 1 - z, Prob(complement(inner.cmp), inner.bound, inner.body))
    return None


def push_negation(f: Formula) -> Optional[Formula]:
    """Move a negation across the probability quantifier (both directions)."""
    if isinstance(f, Not) and isinstance(f.child, Prob):
        p = f.child
        return Prob(complement(p.cmp), p.bound, p.body)
    if isinstance(f, Prob) and isinstance(f.body, Not):
        return Prob(flip(f.cmp), 1 - f.bound, f.body.child)
    return None


def closure_bound(f: Formula) -> int:
    """Upper bound 2^|C| on the number of distinct formula sets the calculus
    can reach from {f}; C is the subformula set closed under negation and the
    X-prefixed products of until expansion.  Only used as a budget guard."""
    closure: set[Formula] = set()

    def negate(g: Formula) -> Optional[Formula]:
        if isinstance(g, TrueF):
            return None
        if isinstance(g, Not):
            return g.child
        return Not(g)

    def visit(g: Formula):
        if g in closure:
            return
        closure.add(g)
        n = negate(g)
        if n is not None and n not in closure:
            closure.add(n)
        if isinstance(g, Not):
            visit(g.child)
        elif isinstance(g, And):
            visit(g.lhs)
            visit(g.rhs)
        elif isinstance(g, Next):
            visit(g.child)
        elif isinstance(g, Until):
            closure.add(Next(g))
            closure.add(Next(Not(g)))
            visit(g.lhs)
            visit(g.rhs)
        elif isinstance(g, Prob):
            visit(g.body)

    visit(f)
    return 2 ** len(closure)


# ---------------------------------------------------------------------------
# Pretty printing

def _bound_str(z: Fraction) -> str:
    if z.denominator == 1:
        return str(z.numerator)
    scaled = z
    for digits in range(1, 13):
        scaled = z * 10 ** digits
        if scaled.denominator == 1:
            s = str(z.numerator * 10 ** digits // z.denominator).rjust(digits + 1, "0")
            return s[:-digits] + "." + s[-digits:]
    return f"{float(z):.9f}"


def pp(f: Formula) -> str:
    """Print in the concrete grammar using core operators only, so that
    parse(pp(f)) == f for any desugared AST."""
    if isinstance(f, TrueF):
        return "true"
    if isinstance(f, Atom):
        return f.name
    if isinstance(f, Not):
        return "!" + _pp_unary_operand(f.child)
    if isinstance(f, Next):
        return "X " + _pp_unary_operand(f.child)
    if isinstance(f, And):
        return f"({pp(f.lhs)} & {pp(f.rhs)})"
    if isinstance(f, Until):
        return f"({pp(f.lhs)} U {pp(f.rhs)})"
    if isinstance(f, Prob):
        return f"P{f.cmp}{_bound_str(f.bound)} {_pp_unary_operand(f.body)}"
    raise TypeError(f)


def _pp_unary_operand(f: Formula) -> str:
    if isinstance(f, (And, Until)):
        return pp(f)  # already parenthesized
    return pp(f)


# ---------------------------------------------------------------------------
# Parser

class ParseError(ValueError):
    """Syntax error with a character position."""

    def __init__(self, message: str, pos: int):
        super().__init__(f"{message} (at position {pos})")
        self.pos = pos


_RESERVED = {"true", "false", "X", "U", "F", "G", "R", "W"}


@dataclass
class _Token:
    kind: str  # ident op prob lparen rparen end
    text: str
    pos: int
    cmp: str = ""
    bound: Optional[Fraction] = None


def _lex(text: str) -> list[_Token]:
    toks: list[_Token] = []
    i, n = 0, len(text)
    while i < n:
        c = text[i]
        if c.isspace():
            i += 1
            continue
        if c == "(":
            toks.append(_Token("lparen", c, i)); i += 1
        elif c == ")":
            toks.append(_Token("rparen", c, i)); i += 1
        elif c == "!":
            toks.append(_Token("op", "!", i)); i += 1
        elif c == "&":
            toks.append(_Token("op", "&", i)); i += 1
        elif c == "|":
            toks.append(_Token("op", "|", i)); i += 1
        elif c == "-":
            if text.startswith("->", i):
                toks.append(_Token("op", "->", i)); i += 2
            else:
                raise ParseError("unexpected character '-'", i)
        elif c.isalpha() or c == "_":
            j = i
            while j < n and (text[j].isalnum() or text[j] == "_"):
                j += 1
            word = text[i:j]
            if word == "P" and j < n and text[j] in "<>":
                k = j
                if text.startswith(("<=", ">="), k):
                    cmp, k = text[k:k + 2], k + 2
                else:
                    cmp, k = text[k], k + 1
                m = k
                while m < n and (text[m].isdigit() or text[m] == "."):
                    m += 1
                num = text[k:m]
                if not num:
                    raise ParseError("expected probability bound after P" + cmp, k)
                if "." in num and len(num.split(".", 1)[1]) > 9:
                    raise ParseError("more than 9 fractional digits in bound", k)
                try:
                    bound = Fraction(num)
                except ValueError:
                    raise ParseError(f"bad probability bound {num!r}", k) from None
                if not (0 <= bound <= 1):
                    raise ParseError(f"probability bound {num} outside [0,1]", k)
                toks.append(_Token("prob", text[i:m], i, cmp=cmp, bound=bound))
                i = m
            else:
                toks.append(_Token("ident", word, i))
                i = j
        else:
            raise ParseError(f"unexpected character {c!r}", i)
    toks.append(_Token("end", "", n))
    return toks


class _Parser:
    """Recursive descent for the grammar (loosest to tightest binding):

        expr  := or ('->' expr)?
        or    := and ('|' and)*
        and   := until ('&' until)*
        until := unary (('U'|'R'|'W') until)?
        unary := ('!'|'X'|'F'|'G'|P<cmp><dec>) unary | 'true' | 'false'
                 | ident | '(' expr ')'
    """

    def __init__(self, toks: list[_Token]):
        self.toks = toks
        self.i = 0

    def peek(self) -> _Token:
        return self.toks[self.i]

    def next(self) -> _Token:
        t = self.toks[self.i]
        self.i += 1
        return t

    def expect(self, kind: str, text: str = "") -> _Token:
        t = self.next()
        if t.kind != kind or (text and t.text != text):
            raise ParseError(f"expected {text or kind}, found {t.text or 'end of input'}", t.pos)
        return t

    def parse_expr(self) -> Formula:
        lhs = self.parse_or()
        if self.peek().kind == "op" and self.peek().text == "->":
            self.next()
            rhs = self.parse_expr()
            return _or(Not(lhs), rhs)
        return lhs

    def parse_or(self) -> Formula:
        f = self.parse_and()
        while self.peek().kind == "op" and self.peek().text == "|":
            self.next()
            f = _or(f, self.parse_and())
        return f

    def parse_and(self) -> Formula:
        f = self.parse_until()
        while self.peek().kind == "op" and self.peek().text == "&":
            self.next()
            f = And(f, self.parse_until())
        return f

    def parse_until(self) -> Formula:
        f = self.parse_unary()
        t = self.peek()
        if t.kind == "ident" and t.text in ("U", "R", "W"):
            self.next()
            rhs = self.parse_until()
            if t.text == "U":
                return Until(f, rhs)
            if t.text == "R":
                return Not(Until(Not(f), Not(rhs)))
            return _or(Until(f, rhs), _always(f))  # W
        return f

    def parse_unary(self) -> Formula:
        t = self.peek()
        if t.kind == "op" and t.text == "!":
            self.next()
            return Not(self.parse_unary())
        if t.kind == "prob":
            self.next()
            return Prob(t.cmp, t.bound, self.parse_unary())
        if t.kind == "ident" and t.text == "X":
            self.next()
            return Next(self.parse_unary())
        if t.kind == "ident" and t.text == "F":
            self.next()
            return Until(TRUE, self.parse_unary())
        if t.kind == "ident" and t.text == "G":
            self.next()
            return _always(self.parse_unary())
        return self.parse_atom()

    def parse_atom(self) -> Formula:
        t = self.next()
        if t.kind == "lparen":
            f = self.parse_expr()
            self.expect("rparen", ")")
            return f
        if t.kind == "ident":
            if t.text == "true":
                return TRUE
            if t.text == "false":
                return FALSE
            if t.text in _RESERVED:
                raise ParseError(f"{t.text!r} is a reserved word", t.pos)
            return Atom(t.text)
        raise ParseError(f"expected a formula, found {t.text or 'end of input'}", t.pos)


def _or(a: Formula, b: Formula) -> Formula:
    return Not(And(Not(a), Not(b)))


def _always(f: Formula) -> Formula:
    return Not(Until(TRUE, Not(f)))


def parse(text: str, require_state: bool = True) -> Formula:
    """Parse a formula; derived operators are desugared to the core syntax.

    With require_state (the default) the result must be a state formula."""
    p = _Parser(_lex(text))
    f = p.parse_expr()
    end = p.next()
    if end.kind != "end":
        raise ParseError(f"trailing input {end.text!r}", end.pos)
    if require_state and not is_state_formula(f):
        raise ParseError("top-level formula must be a state formula", 0)
    return f
