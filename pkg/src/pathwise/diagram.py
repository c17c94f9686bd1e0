"""Influence diagrams with elicited conditional probability tables.

A diagram is a DAG of decision, chance and value nodes. Chance nodes carry
CPTs keyed by parent assignments; each CPT cell is either structural (a hard
0/1), a plain point probability, an elicited quantile triple, or the row
remainder. All operations are pure: they return new diagrams and never
mutate their inputs.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field, replace
from enum import Enum
from typing import Iterable, Iterator, Mapping, Sequence

ROW_SUM_TOL = 1e-9


class NodeKind(Enum):
    DECISION = "decision"
    CHANCE = "chance"
    VALUE = "value"


class CycleError(Exception):
    pass


class StateSpaceTooLarge(Exception):
    pass


class NotChanceNodes(Exception):
    pass


class WouldCreateCycle(Exception):
    pass


@dataclass(frozen=True)
class ElicitedTriple:
    """Expert-provided (5% quantile, best estimate, 95% quantile)."""

    q05: float
    best: float
    q95: float
    best_is: str = "median"  # "median" or "mode"

    def check(self) -> list[str]:
        problems = []
        if not (0.0 <= self.q05 <= self.best <= self.q95 <= 1.0):
            problems.append(
                f"quantile ordering violated: q05={self.q05} best={self.best} q95={self.q95}"
            )
        if not self.q05 < self.q95:
            problems.append(f"degenerate triple: q05 == q95 == {self.q05}")
        if self.best_is not in ("median", "mode"):
            problems.append(f"unknown best_is {self.best_is!r}")
        return problems


@dataclass(frozen=True)
class Structural:
    """Hard 0/1 cell, never sampled."""

    p: float

    def __post_init__(self):
        if self.p not in (0.0, 1.0):
            raise ValueError(f"structural cell must be exactly 0 or 1, got {self.p}")


@dataclass(frozen=True)
class Point:
    """Fixed point probability (e.g. produced by arc reversal)."""

    p: float


@dataclass(frozen=True)
class Elicited:
    triple: ElicitedTriple


@dataclass(frozen=True)
class Remainder:
    """Cell taking value 1 - (sum of the other cells in the row)."""


CptEntry = Structural | Point | Elicited | Remainder
CptRow = tuple[CptEntry, ...]
ParentAssignment = tuple[str, ...]
RowKey = tuple[str, ParentAssignment]


def row_best_values(row: CptRow) -> tuple[float, ...]:
    """Resolve a row to point probabilities at best estimates."""
    values: list[float | None] = []
    remainder_at: int | None = None
    for i, entry in enumerate(row):
        if isinstance(entry, Structural) or isinstance(entry, Point):
            values.append(entry.p)
        elif isinstance(entry, Elicited):
            values.append(entry.triple.best)
        else:
            values.append(None)
            remainder_at = i
    if remainder_at is not None:
        rest = sum(v for v in values if v is not None)
        values[remainder_at] = 1.0 - rest
    return tuple(float(v) for v in values)  # type: ignore[arg-type]


@dataclass(frozen=True)
class Node:
    id: str
    kind: NodeKind
    categories: tuple[str, ...] = ()
    parents: tuple[str, ...] = ()


@dataclass(frozen=True)
class Violation:
    code: str
    node: str | None
    row: ParentAssignment | None
    message: str


@dataclass(frozen=True)
class InfluenceDiagram:
    nodes: Mapping[str, Node]
    cpts: Mapping[RowKey, CptRow]
    queries: tuple = ()
    metadata: Mapping[str, object] = field(default_factory=dict)

    def node(self, node_id: str) -> Node:
        return self.nodes[node_id]

    def children(self, node_id: str) -> list[str]:
        return [n.id for n in self.nodes.values() if node_id in n.parents]

    def chance_nodes(self) -> list[Node]:
        return [n for n in self.nodes.values() if n.kind is NodeKind.CHANCE]

    def decision_nodes(self) -> list[Node]:
        return [n for n in self.nodes.values() if n.kind is NodeKind.DECISION]

    def parent_assignments(self, node_id: str) -> Iterator[ParentAssignment]:
        node = self.nodes[node_id]
        spaces = []
        for p in node.parents:
            parent = self.nodes.get(p)
            spaces.append(parent.categories if parent else ())
        yield from itertools.product(*spaces)

    def row(self, node_id: str, assignment: ParentAssignment) -> CptRow:
        return self.cpts[(node_id, assignment)]


def _has_path(diagram: InfluenceDiagram, src: str, dst: str, skip_edge: tuple[str, str] | None = None) -> bool:
    """Directed reachability src -> dst, optionally ignoring one edge."""
    stack = [src]
    seen = set()
    while stack:
        cur = stack.pop()
        if cur == dst:
            return True
        if cur in seen:
            continue
        seen.add(cur)
        for child in diagram.children(cur):
            if skip_edge and (cur, child) == skip_edge:
                continue
            stack.append(child)
    return False


def validate(diagram: InfluenceDiagram) -> list[Violation]:
    """Check every structural invariant; violations are data, not failures."""
    out: list[Violation] = []
    for node in diagram.nodes.values():
        if not node.id:
            out.append(Violation("empty-id", node.id, None, "node id must be non-empty"))
        if len(set(node.categories)) != len(node.categories):
            out.append(Violation("duplicate-category", node.id, None,
                                 f"{node.id}: category labels must be unique"))
        if node.kind in (NodeKind.DECISION, NodeKind.CHANCE) and len(node.categories) < 2:
            out.append(Violation("too-few-categories", node.id, None,
                                 f"{node.id}: needs at least 2 categories"))
        if node.kind is NodeKind.VALUE and node.categories:
            out.append(Violation("value-categories", node.id, None,
                                 f"{node.id}: value nodes carry no categories"))
        for p in node.parents:
            if p not in diagram.nodes:
                out.append(Violation("missing-parent", node.id, None,
                                     f"{node.id}: parent {p!r} does not exist"))

    try:
        topological_order(diagram)
    except CycleError as exc:
        out.append(Violation("cycle", None, None, str(exc)))

    for node in diagram.nodes.values():
        if node.kind is not NodeKind.CHANCE:
            for (nid, assignment) in diagram.cpts:
                if nid == node.id:
                    out.append(Violation("unexpected-cpt", node.id, assignment,
                                         f"{node.id}: {node.kind.value} nodes have no CPT"))
            continue
        if any(p not in diagram.nodes for p in node.parents):
            continue  # already reported; assignments are not enumerable
        for assignment in diagram.parent_assignments(node.id):
            key = (node.id, assignment)
            if key not in diagram.cpts:
                out.append(Violation("missing-row", node.id, assignment,
                                     f"{node.id}: no CPT row for parents {assignment}"))
                continue
            row = diagram.cpts[key]
            if len(row) != len(node.categories):
                out.append(Violation("row-length", node.id, assignment,
                                     f"{node.id}{assignment}: row has {len(row)} cells, "
                                     f"node has {len(node.categories)} categories"))
                continue
            remainders = sum(isinstance(e, Remainder) for e in row)
            if remainders > 1:
                out.append(Violation("multiple-remainders", node.id, assignment,
                                     f"{node.id}{assignment}: at most one remainder cell per row"))
                continue
            for entry in row:
                if isinstance(entry, Elicited):
                    for problem in entry.triple.check():
                        out.append(Violation("bad-triple", node.id, assignment,
                                             f"{node.id}{assignment}: {problem}"))
                if isinstance(entry, Point) and not (0.0 <= entry.p <= 1.0):
                    out.append(Violation("bad-point", node.id, assignment,
                                         f"{node.id}{assignment}: point value {entry.p} outside [0,1]"))
            values = row_best_values(row)
            if abs(sum(values) - 1.0) > ROW_SUM_TOL:
                out.append(Violation("row-sum", node.id, assignment,
                                     f"{node.id}{assignment}: best estimates sum to {sum(values):.12g}"))
            if any(v < -ROW_SUM_TOL or v > 1.0 + ROW_SUM_TOL for v in values):
                out.append(Violation("cell-range", node.id, assignment,
                                     f"{node.id}{assignment}: resolved cell outside [0,1]: {values}"))
    return out


def topological_order(diagram: InfluenceDiagram) -> list[str]:
    """Kahn's algorithm with lexicographic tie-breaking (deterministic)."""
    indegree = {nid: len(n.parents) for nid, n in diagram.nodes.items()}
    ready = sorted(nid for nid, d in indegree.items() if d == 0)
    order: list[str] = []
    while ready:
        nid = ready.pop(0)
        order.append(nid)
        inserted = False
        for child in diagram.children(nid):
            indegree[child] -= 1
            if indegree[child] == 0:
                ready.append(child)
                inserted = True
        if inserted:
            ready.sort()
    if len(order) != len(diagram.nodes):
        stuck = sorted(set(diagram.nodes) - set(order))
        raise CycleError(f"diagram contains a cycle through {stuck}")
    return order


def _referenced_by_queries(diagram: InfluenceDiagram) -> set[str]:
    refs: set[str] = set()
    for q in diagram.queries:
        event = getattr(q, "event", q)
        for conjunct in event:
            refs.update(conjunct.keys())
    return refs


def remove_barren(diagram: InfluenceDiagram) -> InfluenceDiagram:
    """Drop chance nodes with no children and no query/value role, to fixpoint."""
    current = diagram
    protected = _referenced_by_queries(diagram)
    while True:
        barren = [n.id for n in current.chance_nodes()
                  if not current.children(n.id) and n.id not in protected]
        if not barren:
            return current
        drop = set(barren)
        nodes = {nid: n for nid, n in current.nodes.items() if nid not in drop}
        cpts = {k: v for k, v in current.cpts.items() if k[0] not in drop}
        current = replace(current, nodes=nodes, cpts=cpts)


def _resolved_row(diagram: InfluenceDiagram, node_id: str, assignment: ParentAssignment) -> tuple[float, ...]:
    return row_best_values(diagram.cpts[(node_id, assignment)])


def _restrict(assignment: Mapping[str, str], parents: Sequence[str]) -> ParentAssignment:
    return tuple(assignment[p] for p in parents)


def _classify(p: float) -> CptEntry:
    if p == 0.0 or p == 1.0:
        return Structural(p)
    return Point(p)


def prune_vacuous_parents(diagram: InfluenceDiagram, node_id: str, tol: float = 1e-12) -> InfluenceDiagram:
    """Drop parents the node's CPT does not actually depend on.

    Arc reversal inherits the union of both parent sets, which can introduce
    arcs the reversed CPT is constant in; removing them restores the minimal
    structure without touching the joint distribution.
    """
    current = diagram
    changed = True
    while changed:
        changed = False
        node = current.nodes[node_id]
        for idx, parent in enumerate(node.parents):
            parent_cats = current.nodes[parent].categories
            others = node.parents[:idx] + node.parents[idx + 1:]
            spaces = [current.nodes[p].categories for p in others]
            constant = True
            for rest in itertools.product(*spaces):
                rows = []
                for cat in parent_cats:
                    full = rest[:idx] + (cat,) + rest[idx:]
                    rows.append(_resolved_row(current, node_id, full))
                base = rows[0]
                if any(max(abs(a - b) for a, b in zip(base, r)) > tol for r in rows[1:]):
                    constant = False
                    break
            if constant:
                new_node = replace(node, parents=others)
                new_cpts = {k: v for k, v in current.cpts.items() if k[0] != node_id}
                for rest in itertools.product(*spaces):
                    full = rest[:idx] + (parent_cats[0],) + rest[idx:]
                    new_cpts[(node_id, rest)] = current.cpts[(node_id, full)]
                nodes = dict(current.nodes)
                nodes[node_id] = new_node
                current = replace(current, nodes=nodes, cpts=new_cpts)
                changed = True
                break
    return current


def reverse_arc(diagram: InfluenceDiagram, frm: str, to: str, prune: bool = True) -> InfluenceDiagram:
    """Reverse a chance-chance edge by Bayes' rule, preserving the joint.

    Both endpoints inherit each other's former parents; CPTs are recomputed
    from the local joint at best-estimate values. Contexts with zero marginal
    probability get a uniform conditional (they never occur).
    """
    src = diagram.nodes.get(frm)
    dst = diagram.nodes.get(to)
    if src is None or dst is None or src.kind is not NodeKind.CHANCE or dst.kind is not NodeKind.CHANCE:
        raise NotChanceNodes(f"arc reversal requires chance nodes, got {frm!r} -> {to!r}")
    if frm not in dst.parents:
        raise ValueError(f"no edge {frm!r} -> {to!r}")
    if _has_path(diagram, frm, to, skip_edge=(frm, to)):
        raise WouldCreateCycle(f"reversing {frm!r} -> {to!r} would create a cycle")

    other_dst_parents = tuple(p for p in dst.parents if p != frm)
    union = sorted(set(src.parents) | set(other_dst_parents))
    new_dst_parents = tuple(union)
    new_src_parents = tuple(union) + (to,)

    new_cpts = {k: v for k, v in diagram.cpts.items() if k[0] not in (frm, to)}
    spaces = [diagram.nodes[p].categories for p in union]
    for u in itertools.product(*spaces):
        ctx = dict(zip(union, u))
        p_src = _resolved_row(diagram, frm, _restrict(ctx, src.parents))
        joint = []
        for i, src_cat in enumerate(src.categories):
            ctx[frm] = src_cat
            p_dst = _resolved_row(diagram, to, _restrict(ctx, dst.parents))
            joint.append([p_src[i] * pj for pj in p_dst])
        del ctx[frm]
        marg = [sum(joint[i][j] for i in range(len(src.categories)))
                for j in range(len(dst.categories))]
        new_cpts[(to, u)] = tuple(_classify(m) for m in marg)
        for j, dst_cat in enumerate(dst.categories):
            if marg[j] > 0.0:
                cond = tuple(_classify(joint[i][j] / marg[j]) for i in range(len(src.categories)))
            else:
                uniform = 1.0 / len(src.categories)
                cond = tuple(Point(uniform) for _ in src.categories)
            new_cpts[(frm, u + (dst_cat,))] = cond

    nodes = dict(diagram.nodes)
    nodes[frm] = replace(src, parents=new_src_parents)
    nodes[to] = replace(dst, parents=new_dst_parents)
    result = replace(diagram, nodes=nodes, cpts=new_cpts)
    if prune:
        result = prune_vacuous_parents(result, to)
        result = prune_vacuous_parents(result, frm)
    return result


@dataclass(frozen=True)
class JointDistribution:
    """Exact joint over chance nodes for one decision setting."""

    order: tuple[str, ...]  # topological order of the enumerated nodes
    decision: Mapping[str, str]
    probabilities: Mapping[tuple[str, ...], float]

    def event_probability(self, event: Iterable[Mapping[str, str]]) -> float:
        """Probability of a disjunction of node=category conjunctions."""
        index = {nid: i for i, nid in enumerate(self.order)}
        conjuncts = list(event)
        total = 0.0
        for assignment, p in self.probabilities.items():
            if any(self._satisfies(assignment, c, index) for c in conjuncts):
                total += p
        return total

    def _satisfies(self, assignment: tuple[str, ...], conjunct: Mapping[str, str],
                   index: Mapping[str, int]) -> bool:
        for nid, cat in conjunct.items():
            if nid in self.decision:
                if self.decision[nid] != cat:
                    return False
            else:
                if assignment[index[nid]] != cat:
                    return False
        return True


def enumerate_joint(diagram: InfluenceDiagram, decision_assignment: Mapping[str, str],
                    cap: int = 10 ** 6) -> JointDistribution:
    """Enumerate the exact joint over chance nodes at best-estimate values."""
    for dn in diagram.decision_nodes():
        if dn.id not in decision_assignment:
            raise ValueError(f"decision node {dn.id!r} has no assigned value")
        if decision_assignment[dn.id] not in dn.categories:
            raise ValueError(f"{decision_assignment[dn.id]!r} is not a category of {dn.id!r}")

    order = [nid for nid in topological_order(diagram)
             if diagram.nodes[nid].kind is NodeKind.CHANCE]
    size = 1
    for nid in order:
        size *= len(diagram.nodes[nid].categories)
        if size > cap:
            raise StateSpaceTooLarge(f"joint has more than {cap} states")

    probs: dict[tuple[str, ...], float] = {}
    ctx: dict[str, str] = dict(decision_assignment)

    def recurse(i: int, acc: float, path: tuple[str, ...]):
        if acc == 0.0:
            return
        if i == len(order):
            probs[path] = acc
            return
        nid = order[i]
        node = diagram.nodes[nid]
        row = _resolved_row(diagram, nid, _restrict(ctx, node.parents))
        for cat, p in zip(node.categories, row):
            ctx[nid] = cat
            recurse(i + 1, acc * p, path + (cat,))
        del ctx[nid]

    recurse(0, 1.0, ())
    return JointDistribution(order=tuple(order), decision=dict(decision_assignment),
                             probabilities=probs)
