"""Collaboration graph contracts: roles, graphs, validation and serialization.

A collaboration graph is a small directed acyclic graph over agent roles.
Node positions follow generation order; every edge (s, t) satisfies s < t,
so position order is a topological order by construction.  Serialization is
a stable JSON encoding with an explicit format version.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from .errors import GraphFormatError, ValidationError

FORMAT_VERSION = 1


@dataclass(frozen=True)
class RoleDescriptor:
    """One entry of the agent role catalog."""

    role_id: int
    name: str
    description: str
    domains: tuple[str, ...] = ()


@dataclass(frozen=True)
class RolePool:
    """Immutable catalog of available roles, ids contiguous from zero."""

    roles: tuple[RoleDescriptor, ...]

    def __post_init__(self):
        if not self.roles:
            raise ValidationError("role pool must not be empty")
        ids = [r.role_id for r in self.roles]
        if ids != list(range(len(self.roles))):
            raise ValidationError(
                f"role ids must be contiguous from 0, got {ids}"
            )
        names = [r.name for r in self.roles]
        if len(set(names)) != len(names):
            raise ValidationError("role names must be unique")
        if any(not n.strip() for n in names):
            raise ValidationError("role names must be non-empty")

    def __len__(self) -> int:
        return len(self.roles)

    def role(self, role_id: int) -> RoleDescriptor:
        if not 0 <= role_id < len(self.roles):
            raise ValidationError(f"unknown role id {role_id}")
        return self.roles[role_id]


def default_role_pool() -> RolePool:
    """Thirteen-role catalog used by the stock experiments."""
    entries = [
        ("Natural Science Expert", "Answers questions grounded in the natural sciences.",
         ("physics", "chemistry", "biology", "medicine")),
        ("Engineering Specialist", "Covers applied engineering and computing topics.",
         ("electrical", "mechanical", "computer-science", "security")),
        ("Social Scientist", "Handles societal, psychological and political analysis.",
         ("psychology", "sociology", "economics", "geography")),
        ("Humanities Scholar", "Covers history, philosophy, arts and culture.",
         ("history", "philosophy", "literature", "arts")),
        ("Legal Analyst", "Interprets statutes, case law and regulation.",
         ("law", "jurisprudence", "policy")),
        ("Ethics Consultant", "Weighs moral arguments and professional conduct.",
         ("moral-reasoning", "applied-ethics")),
        ("Business Strategist", "Advises on management, markets and operations.",
         ("management", "marketing", "accounting")),
        ("Mathematical Expert", "Performs formal and quantitative reasoning.",
         ("algebra", "calculus", "statistics", "logic")),
        ("Chemistry Specialist", "Deep coverage of chemical structure and reactions.",
         ("organic", "inorganic", "physical-chemistry")),
        ("Physics Specialist", "Deep coverage of physical theory and computation.",
         ("mechanics", "electromagnetism", "quantum")),
        ("Medical Life Scientist", "Clinical and biological domain knowledge.",
         ("anatomy", "clinical-medicine", "genetics", "nutrition")),
        ("Vocational Examiner", "Practical, procedural and trade knowledge.",
         ("professions", "applied-skills")),
        ("General Coordinator", "Routes work between roles and merges answers.",
         ("aggregation", "planning")),
    ]
    return RolePool(tuple(
        RoleDescriptor(i, name, desc, doms)
        for i, (name, desc, doms) in enumerate(entries)
    ))


@dataclass(frozen=True)
class CollaborationGraph:
    """Directed graph over role-labelled nodes.

    ``roles[i]`` is the role id of node position i.  ``edges`` holds (s, t)
    position pairs, kept lexicographically sorted for stable serialization;
    duplicates are preserved so that validation can flag them.
    """

    roles: tuple[int, ...] = ()
    edges: tuple[tuple[int, int], ...] = ()

    def __post_init__(self):
        object.__setattr__(self, "roles", tuple(int(r) for r in self.roles))
        object.__setattr__(
            self, "edges",
            tuple(sorted((int(s), int(t)) for s, t in self.edges)),
        )

    @property
    def num_nodes(self) -> int:
        return len(self.roles)

    @property
    def num_edges(self) -> int:
        return len(self.edges)

    def role_pairs(self) -> frozenset[tuple[int, int]]:
        """Edge set expressed as unordered role-id pairs (small id first).

        Makes graphs generated in different node orders comparable.
        """
        return frozenset(
            (min(self.roles[s], self.roles[t]), max(self.roles[s], self.roles[t]))
            for s, t in self.edges
        )


@dataclass(frozen=True)
class Violation:
    """One validation failure, with a machine-readable code."""

    code: str
    message: str


def validate(graph: CollaborationGraph, pool: RolePool | int) -> list[Violation]:
    """Check structural invariants; returns an empty list when the graph is valid.

    Codes: role-range, role-duplicate, edge-endpoint-range, edge-order,
    edge-duplicate.
    """
    num_roles = len(pool) if isinstance(pool, RolePool) else int(pool)
    out: list[Violation] = []
    for pos, r in enumerate(graph.roles):
        if not 0 <= r < num_roles:
            out.append(Violation(
                "role-range", f"node {pos} has role {r}, outside [0, {num_roles})"))
    seen_roles: set[int] = set()
    for pos, r in enumerate(graph.roles):
        if r in seen_roles:
            out.append(Violation(
                "role-duplicate", f"role {r} appears more than once (node {pos})"))
        seen_roles.add(r)
    n = graph.num_nodes
    seen_edges: set[tuple[int, int]] = set()
    for s, t in graph.edges:
        if not (0 <= s < n and 0 <= t < n):
            out.append(Violation(
                "edge-endpoint-range", f"edge ({s}, {t}) references a missing node"))
            continue
        if s >= t:
            out.append(Violation(
                "edge-order", f"edge ({s}, {t}) violates s < t"))
        if (s, t) in seen_edges:
            out.append(Violation("edge-duplicate", f"edge ({s}, {t}) repeated"))
        seen_edges.add((s, t))
    return out


def require_valid(graph: CollaborationGraph, pool: RolePool | int) -> None:
    violations = validate(graph, pool)
    if violations:
        raise ValidationError(
            "; ".join(f"[{v.code}] {v.message}" for v in violations))


def canonicalize(graph: CollaborationGraph) -> CollaborationGraph:
    """Reorder nodes by ascending role id and remap edges accordingly.

    Edges are reoriented so s < t still holds and deduplicated.  Requires a
    graph with unique in-range roles and in-range edge endpoints.
    """
    order = sorted(range(graph.num_nodes), key=lambda p: graph.roles[p])
    new_pos = {old: new for new, old in enumerate(order)}
    roles = tuple(graph.roles[p] for p in order)
    edges = set()
    for s, t in graph.edges:
        a, b = new_pos[s], new_pos[t]
        if a == b:
            raise ValidationError(f"self-loop after remap on edge ({s}, {t})")
        edges.add((min(a, b), max(a, b)))
    return CollaborationGraph(roles, tuple(sorted(edges)))


@dataclass(frozen=True)
class Adjacency:
    """Role-indexed adjacency over the full pool.

    ``entries[a, b]`` is 1 when an edge runs from the node with role a to the
    node with role b; rows/columns of absent roles are zero.  ``occupied[a]``
    marks roles present in the graph.
    """

    entries: np.ndarray
    occupied: np.ndarray


def to_adjacency(graph: CollaborationGraph, pool: RolePool | int) -> Adjacency:
    num_roles = len(pool) if isinstance(pool, RolePool) else int(pool)
    require_valid(graph, num_roles)
    entries = np.zeros((num_roles, num_roles), dtype=np.int8)
    occupied = np.zeros(num_roles, dtype=bool)
    for r in graph.roles:
        occupied[r] = True
    for s, t in graph.edges:
        entries[graph.roles[s], graph.roles[t]] = 1
    return Adjacency(entries=entries, occupied=occupied)


def from_adjacency(adj: Adjacency) -> CollaborationGraph:
    """Inverse of :func:`to_adjacency`, up to canonical node order."""
    roles = tuple(int(r) for r in np.flatnonzero(adj.occupied))
    pos = {r: i for i, r in enumerate(roles)}
    edges = set()
    for a, b in zip(*np.nonzero(adj.entries)):
        s, t = pos[int(a)], pos[int(b)]
        edges.add((min(s, t), max(s, t)))
    return CollaborationGraph(roles, tuple(sorted(edges)))


def normalize_adjacency(adj: Adjacency) -> np.ndarray:
    """Symmetrically normalized adjacency with self-loops, in float64.

    Occupied block: D^{-1/2} (sym(A) + I) D^{-1/2} with degrees taken after
    adding self-loops.  Rows and columns of absent roles stay zero, so an
    occupied isolated node keeps a unit diagonal entry.
    """
    a = adj.entries.astype(np.float64)
    sym = np.clip(a + a.T, 0.0, 1.0)
    occ = adj.occupied.astype(np.float64)
    sym = sym * np.outer(occ, occ)
    a_tilde = sym + np.diag(occ)
    deg = a_tilde.sum(axis=1)
    with np.errstate(divide="ignore"):
        d_inv_sqrt = np.where(deg > 0, 1.0 / np.sqrt(deg), 0.0)
    return (a_tilde * d_inv_sqrt[:, None]) * d_inv_sqrt[None, :]


def _graph_to_dict(graph: CollaborationGraph) -> dict:
    return {
        "format_version": FORMAT_VERSION,
        "roles": list(graph.roles),
        "edges": [list(e) for e in graph.edges],
    }


def _require(condition: bool, message: str):
    if not condition:
        raise GraphFormatError(message)


def _graph_from_dict(obj: object) -> CollaborationGraph:
    _require(isinstance(obj, dict), "graph payload must be a JSON object")
    assert isinstance(obj, dict)
    version = obj.get("format_version")
    _require(version == FORMAT_VERSION,
             f"unsupported format_version {version!r}, expected {FORMAT_VERSION}")
    roles = obj.get("roles")
    edges = obj.get("edges")
    _require(isinstance(roles, list) and all(
        isinstance(r, int) and not isinstance(r, bool) for r in roles),
        "'roles' must be a list of integers")
    _require(isinstance(edges, list), "'edges' must be a list")
    assert isinstance(roles, list) and isinstance(edges, list)
    for e in edges:
        _require(isinstance(e, list) and len(e) == 2 and all(
            isinstance(v, int) and not isinstance(v, bool) for v in e),
            f"edge {e!r} must be a pair of integers")
    return CollaborationGraph(tuple(roles), tuple((e[0], e[1]) for e in edges))


def serialize(graph: CollaborationGraph) -> bytes:
    """Stable JSON bytes: fixed key order, edges sorted, no whitespace."""
    return json.dumps(_graph_to_dict(graph), separators=(",", ":")).encode("utf-8")


def deserialize(data: bytes) -> CollaborationGraph:
    """Decode graph bytes; malformed input raises with a byte offset when known."""
    try:
        text = data.decode("utf-8")
    except UnicodeDecodeError as exc:
        raise GraphFormatError(f"not valid UTF-8: {exc}", offset=exc.start) from exc
    try:
        obj = json.loads(text)
    except json.JSONDecodeError as exc:
        raise GraphFormatError(f"invalid JSON: {exc.msg}", offset=exc.pos) from exc
    return _graph_from_dict(obj)


@dataclass(frozen=True)
class DatasetRecord:
    """One supervised example: a query, its domain, and a reference graph."""

    query: str
    domain_id: int
    graph: CollaborationGraph
    teacher_utility: float | None = None


def write_records(path, records: Iterable[DatasetRecord]) -> int:
    """Write records as JSON lines; returns the number written."""
    count = 0
    with open(path, "w", encoding="utf-8") as fh:
        for rec in records:
            row = {
                "query": rec.query,
                "domain_id": rec.domain_id,
                "graph": _graph_to_dict(rec.graph),
            }
            if rec.teacher_utility is not None:
                row["teacher_utility"] = rec.teacher_utility
            fh.write(json.dumps(row, separators=(",", ":")) + "\n")
            count += 1
    return count


def read_records(path) -> list[DatasetRecord]:
    records: list[DatasetRecord] = []
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                row = json.loads(line)
            except json.JSONDecodeError as exc:
                raise GraphFormatError(
                    f"line {lineno}: invalid JSON: {exc.msg}", offset=exc.pos
                ) from exc
            _require(isinstance(row, dict), f"line {lineno}: record must be an object")
            for key in ("query", "domain_id", "graph"):
                _require(key in row, f"line {lineno}: missing field '{key}'")
            _require(isinstance(row["query"], str),
                     f"line {lineno}: 'query' must be a string")
            _require(isinstance(row["domain_id"], int)
                     and not isinstance(row["domain_id"], bool),
                     f"line {lineno}: 'domain_id' must be an integer")
            utility = row.get("teacher_utility")
            _require(utility is None or isinstance(utility, (int, float)),
                     f"line {lineno}: 'teacher_utility' must be a number")
            records.append(DatasetRecord(
                query=row["query"],
                domain_id=row["domain_id"],
                graph=_graph_from_dict(row["graph"]),
                teacher_utility=None if utility is None else float(utility),
            ))
    return records
