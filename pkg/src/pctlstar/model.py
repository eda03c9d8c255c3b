"""MDP, finite-memory policy skeleton (DFA), completed policy, and the
Markov chain induced by a policy on an MDP.

States, actions and modes are interned to dense integer ids at load time;
all maps are id-indexed.  Distributions that fail the stochasticity check
are rejected at load rather than renormalized.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Mapping, Optional, Sequence

__all__ = [
    "ModelError", "Mdp", "PolicySkeleton", "Policy", "MarkovChain",
    "induced_chain", "single_mode_skeleton", "load_model", "load_policy",
    "policy_to_json",
]

STOCH_TOL = 1e-9


class ModelError(ValueError):
    pass


def _check_distribution(probs: Sequence[float], what: str) -> None:
    total = 0.0
    for p in probs:
        if not (0.0 <= p <= 1.0 + STOCH_TOL):
            raise ModelError(f"{what}: probability {p} outside [0,1]")
        total += p
    if abs(total - 1.0) > STOCH_TOL:
        raise ModelError(f"{what}: distribution sums to {total!r}, not 1")


@dataclass
class Mdp:
    """Finite MDP with id-indexed states and actions.

    trans[(s, a)] is a tuple of (target, probability) pairs with positive
    probability, present exactly for enabled actions.
    """

    states: tuple[str, ...]
    initial: int
    actions: tuple[str, ...]
    enabled: tuple[tuple[int, ...], ...]
    trans: dict[tuple[int, int], tuple[tuple[int, float], ...]]
    labels: tuple[frozenset[str], ...]
    state_index: dict[str, int] = field(default_factory=dict)
    action_index: dict[str, int] = field(default_factory=dict)

    def __post_init__(self):
        self.state_index = {name: i for i, name in enumerate(self.states)}
        self.action_index = {name: i for i, name in enumerate(self.actions)}
        if len(self.state_index) != len(self.states):
            raise ModelError("duplicate state names")
        if len(self.action_index) != len(self.actions):
            raise ModelError("duplicate action names")
        if not (0 <= self.initial < len(self.states)):
            raise ModelError("initial state out of range")
        for s, acts in enumerate(self.enabled):
            if not acts:
                raise ModelError(f"state {self.states[s]} has no enabled action")
            for a in acts:
                key = (s, a)
                if key not in self.trans:
                    raise ModelError(
                        f"missing distribution for enabled action "
                        f"{self.actions[a]} at {self.states[s]}")
                _check_distribution([p for _, p in self.trans[key]],
                                    f"trans({self.states[s]},{self.actions[a]})")
        for (s, a) in self.trans:
            if a not in self.enabled[s]:
                raise ModelError(
                    f"transition given for disabled action {self.actions[a]} "
                    f"at {self.states[s]}")

    @property
    def n_states(self) -> int:
        return len(self.states)

    def succ(self, s: int, a: int) -> tuple[int, ...]:
        """States reachable from s with positive probability under a."""
        if a not in self.enabled[s]:
            raise ModelError(
                f"action {self.actions[a]} not enabled at {self.states[s]}")
        return tuple(t for t, p in self.trans[(s, a)] if p > 0.0)

    def prob(self, s: int, a: int, t: int) -> float:
        for u, p in self.trans.get((s, a), ()):
            if u == t:
                return p
        return 0.0


@dataclass
class PolicySkeleton:
    """The DFA part of a finite-memory policy: modes, start and delta."""

    modes: tuple[str, ...]
    start: tuple[int, ...]              # state id -> mode id
    delta: tuple[tuple[int, ...], ...]  # [mode id][state id] -> mode id
    mode_index: dict[str, int] = field(default_factory=dict)

    def __post_init__(self):
        self.mode_index = {name: i for i, name in enumerate(self.modes)}
        n_modes = len(self.modes)
        if len(self.delta) != n_modes:
            raise ModelError("delta must be total over modes")
        for m, row in enumerate(self.delta):
            for m2 in row:
                if not (0 <= m2 < n_modes):
                    raise ModelError("delta target mode out of range")
        for m in self.start:
            if not (0 <= m < n_modes):
                raise ModelError("start mode out of range")

    @property
    def n_modes(self) -> int:
        return len(self.modes)


def single_mode_skeleton(mdp: Mdp, mode_name: str = "m") -> PolicySkeleton:
    """The Markovian special case: one mode, constant start and delta."""
    n = mdp.n_states
    return PolicySkeleton((mode_name,), (0,) * n, ((0,) * n,))


@dataclass
class Policy:
    """A skeleton together with the action distribution map.

    act maps (mode, state) to {action id: probability}; it may be partial,
    but must cover every pair reachable in the induced chain.
    """

    skeleton: PolicySkeleton
    act: dict[tuple[int, int], dict[int, float]]
    check_tol: float = STOCH_TOL

    def __post_init__(self):
        for (m, s), dist in self.act.items():
            total = 0.0
            for a, p in dist.items():
                if p < 0.0 or p > 1.0 + self.check_tol:
                    raise ModelError(f"act({m},{s},{a}) = {p} outside [0,1]")
                total += p
            if abs(total - 1.0) > self.check_tol:
                raise ModelError(f"act({m},{s}) sums to {total!r}, not 1")

    def validate_support(self, mdp: Mdp) -> None:
        for (m, s), dist in self.act.items():
            for a, p in dist.items():
                if p > 0.0 and a not in mdp.enabled[s]:
                    raise ModelError(
                        f"act assigns positive probability to disabled action "
                        f"{mdp.actions[a]} at {mdp.states[s]}")


@dataclass
class MarkovChain:
    """Finite Markov chain with labelled states.

    states holds opaque keys ((mode, state) pairs for induced chains);
    rows[i] is the outgoing distribution of state i as (target, prob) pairs.
    """

    states: tuple
    initial: int
    rows: tuple[tuple[tuple[int, float], ...], ...]
    labels: tuple[frozenset[str], ...]
    names: tuple[str, ...] = ()

    def __post_init__(self):
        if not self.names:
            self.names = tuple(str(k) for k in self.states)
        for i, row in enumerate(self.rows):
            _check_distribution([p for _, p in row], f"chain row {self.names[i]}")

    @property
    def n_states(self) -> int:
        return len(self.states)

    def with_labels(self, labels: Sequence[frozenset]) -> "MarkovChain":
        return MarkovChain(self.states, self.initial, self.rows,
                           tuple(frozenset(l) for l in labels), self.names)


def induced_chain(mdp: Mdp, policy: Policy) -> MarkovChain:
    """The Markov chain induced by a policy, restricted to the pairs
    reachable from the initial (mode, state) pair."""
    policy.validate_support(mdp)
    sk = policy.skeleton
    init_pair = (sk.start[mdp.initial], mdp.initial)
    index: dict[tuple[int, int], int] = {init_pair: 0}
    order: list[tuple[int, int]] = [init_pair]
    rows: list[tuple[tuple[int, float], ...]] = []
    frontier = [init_pair]
    while frontier:
        m, s = frontier.pop(0)
        dist = policy.act.get((m, s))
        if dist is None:
            raise ModelError(
                f"act undefined on reachable pair ({sk.modes[m]},{mdp.states[s]})")
        m2 = sk.delta[m][s]
        out: dict[int, float] = {}
        for a, pa in dist.items():
            if pa <= 0.0:
                continue
            for t, pt in mdp.trans[(s, a)]:
                key = (m2, t)
                if key not in index:
                    index[key] = len(order)
                    order.append(key)
                    frontier.append(key)
                out[index[key]] = out.get(index[key], 0.0) + pa * pt
        rows.append(tuple(sorted(out.items())))
    labels = tuple(mdp.labels[s] for _, s in order)
    names = tuple(f"({sk.modes[m]},{mdp.states[s]})" for m, s in order)
    return MarkovChain(tuple(order), 0, tuple(rows), labels, names)


# ---------------------------------------------------------------------------
# JSON model and policy files

def load_model(source) -> tuple[Mdp, PolicySkeleton]:
    """Load a model JSON document (path, file object, or parsed dict).

    Schema: {states: [{name, labels: [..]}], initial, actions: [name],
    enabled: {state: [action..]}, trans: {state: {action: {state: prob}}},
    modes: [name], start: {state: mode}, delta: {mode: {state: mode}}}.
    `modes` may be omitted for the Markovian single-mode case.
    """
    if isinstance(source, (str, bytes)):
        with open(source) as fh:
            doc = json.load(fh)
    elif isinstance(source, dict):
        doc = source
    else:
        doc = json.load(source)

    try:
        state_docs = doc["states"]
        states = tuple(sd["name"] for sd in state_docs)
        labels = tuple(frozenset(sd.get("labels", ())) for sd in state_docs)
        actions = tuple(doc["actions"])
        initial_name = doc["initial"]
    except (KeyError, TypeError) as exc:
        raise ModelError(f"malformed model document: {exc}") from None

    sidx = {name: i for i, name in enumerate(states)}
    aidx = {name: i for i, name in enumerate(actions)}

    def state_id(name: str) -> int:
        if name not in sidx:
            raise ModelError(f"unknown state {name!r}")
        return sidx[name]

    def action_id(name: str) -> int:
        if name not in aidx:
            raise ModelError(f"unknown action {name!r}")
        return aidx[name]

    enabled = []
    for name in states:
        acts = doc.get("enabled", {}).get(name, [])
        enabled.append(tuple(sorted(action_id(a) for a in acts)))
    trans: dict[tuple[int, int], tuple[tuple[int, float], ...]] = {}
    for sname, adoc in doc.get("trans", {}).items():
        s = state_id(sname)
        for aname, ddoc in adoc.items():
            a = action_id(aname)
            row = tuple(sorted((state_id(t), float(p)) for t, p in ddoc.items()))
            trans[(s, a)] = tuple((t, p) for t, p in row if p > 0.0)
    mdp = Mdp(states, state_id(initial_name), actions, tuple(enabled), trans, labels)

    if "modes" not in doc:
        skeleton = single_mode_skeleton(mdp)
    else:
        modes = tuple(doc["modes"])
        midx = {name: i for i, name in enumerate(modes)}

        def mode_id(name: str) -> int:
            if name not in midx:
                raise ModelError(f"unknown mode {name!r}")
            return midx[name]

        try:
            start = tuple(mode_id(doc["start"][name]) for name in states)
            delta = tuple(
                tuple(mode_id(doc["delta"][mname][sname]) for sname in states)
                for mname in modes)
        except KeyError as exc:
            raise ModelError(f"start/delta must be total: missing {exc}") from None
        skeleton = PolicySkeleton(modes, start, delta)
    return mdp, skeleton


def load_policy(source, mdp: Mdp, skeleton: Optional[PolicySkeleton] = None,
                check_tol: float = STOCH_TOL) -> Policy:
    """Load a policy JSON document: {modes, start, delta, act} where act is
    {mode: {state: {action: prob}}}.  modes/start/delta may be omitted when a
    skeleton is supplied (or for the single-mode case)."""
    if isinstance(source, (str, bytes)):
        with open(source) as fh:
            doc = json.load(fh)
    elif isinstance(source, dict):
        doc = source
    else:
        doc = json.load(source)

    if "modes" in doc:
        modes = tuple(doc["modes"])
        midx = {name: i for i, name in enumerate(modes)}
        start = tuple(midx[doc["start"][name]] for name in mdp.states)
        delta = tuple(tuple(midx[doc["delta"][m][s]] for s in mdp.states)
                      for m in modes)
        skeleton = PolicySkeleton(modes, start, delta)
    elif skeleton is None:
        skeleton = single_mode_skeleton(mdp)
    midx = skeleton.mode_index

    act: dict[tuple[int, int], dict[int, float]] = {}
    for mname, sdoc in doc.get("act", {}).items():
        if mname not in midx:
            raise ModelError(f"unknown mode {mname!r} in policy")
        m = midx[mname]
        for sname, ddoc in sdoc.items():
            s = mdp.state_index.get(sname)
            if s is None:
                raise ModelError(f"unknown state {sname!r} in policy")
            act[(m, s)] = {mdp.action_index[a]: float(p) for a, p in ddoc.items()}
    policy = Policy(skeleton, act, check_tol=check_tol)
    policy.validate_support(mdp)
    return policy


def policy_to_json(policy: Policy, mdp: Mdp) -> dict:
    sk = policy.skeleton
    act_doc: dict[str, dict[str, dict[str, float]]] = {}
    for (m, s), dist in sorted(policy.act.items()):
        act_doc.setdefault(sk.modes[m], {})[mdp.states[s]] = {
            mdp.actions[a]: p for a, p in sorted(dist.items())}
    return {
        "modes": list(sk.modes),
        "start": {mdp.states[s]: sk.modes[sk.start[s]] for s in range(mdp.n_states)},
        "delta": {sk.modes[m]: {mdp.states[s]: sk.modes[sk.delta[m][s]]
                                for s in range(mdp.n_states)}
                  for m in range(sk.n_modes)},
        "act": act_doc,
    }
