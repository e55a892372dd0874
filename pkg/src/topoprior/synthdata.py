"""Synthetic multi-domain corpus with a per-query ideal-graph oracle.

Each domain owns a motif (chain, star, tree, two-hub, sparse-random), a
role subset, and a signature token that the embedder turns into a shared
direction.  A query spells out its drawn roles as ``r:<id>`` tokens, so the
mapping from query text to ideal graph is learnable, and the oracle can be
recomputed from the text alone.  Teacher graphs are produced at four
supervision qualities by running (or truncating) the surrogate evolver.
"""

from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass

import numpy as np

from .errors import ValidationError
from .evosim import ContractionConfig, UtilityParams, evolve, utility
from .graphs import CollaborationGraph, DatasetRecord, RolePool

MOTIFS = ("chain", "star", "tree", "two-hub", "sparse-random")


@dataclass(frozen=True)
class DomainSpec:
    """One synthetic domain: motif family, eligible roles, size range."""

    domain_id: int
    motif: str
    role_subset: tuple[int, ...]
    size_range: tuple[int, int]
    signature_token: str = ""

    def __post_init__(self):
        if self.motif not in MOTIFS:
            raise ValidationError(f"motif must be one of {MOTIFS}")
        if len(set(self.role_subset)) != len(self.role_subset):
            raise ValidationError("role_subset must not repeat roles")
        lo, hi = self.size_range
        if not 1 <= lo <= hi <= len(self.role_subset):
            raise ValidationError(
                f"size_range {self.size_range} outside [1, {len(self.role_subset)}]")
        if not self.signature_token:
            object.__setattr__(
                self, "signature_token", f"dom:{self.domain_id}")


@dataclass(frozen=True)
class SupervisionMode:
    """Teacher quality: full convergence, truncated, fixed template, random."""

    kind: str
    fraction: float = 1.0

    def __post_init__(self):
        if self.kind not in ("full", "cheap-early", "static-template", "random"):
            raise ValidationError(f"unknown supervision kind {self.kind!r}")
        if self.kind == "cheap-early" and not 0.0 < self.fraction <= 1.0:
            raise ValidationError("cheap-early fraction must be in (0, 1]")

    @classmethod
    def full(cls) -> "SupervisionMode":
        return cls("full")

    @classmethod
    def cheap_early(cls, fraction: float = 0.5) -> "SupervisionMode":
        return cls("cheap-early", fraction)

    @classmethod
    def static_template(cls) -> "SupervisionMode":
        return cls("static-template")

    @classmethod
    def random(cls) -> "SupervisionMode":
        return cls("random")

    @classmethod
    def parse(cls, text: str) -> "SupervisionMode":
        """Parse "full", "random", "static-template" or "cheap-early:0.5"."""
        if text.startswith("cheap-early"):
            _, _, frac = text.partition(":")
            return cls.cheap_early(float(frac) if frac else 0.5)
        return cls(text)


def default_domain_specs(pool: RolePool) -> list[DomainSpec]:
    """Four training domains over partially overlapping 7-role subsets.

    Role 12 (the coordinator) is shared by every domain; the rest overlap
    pairwise, giving the latent space related but distinguishable clusters.
    """
    if len(pool) != 13:
        raise ValidationError("default specs assume the 13-role pool")
    return [
        DomainSpec(0, "chain", (0, 1, 2, 7, 8, 9, 12), (3, 6)),
        DomainSpec(1, "star", (1, 2, 3, 4, 5, 6, 12), (3, 6)),
        DomainSpec(2, "tree", (0, 3, 4, 7, 10, 11, 12), (3, 6)),
        DomainSpec(3, "two-hub", (2, 5, 6, 8, 10, 11, 12), (3, 6)),
    ]


def holdout_domain_spec(pool: RolePool) -> DomainSpec:
    """Fifth domain with the motif family unseen during training."""
    if len(pool) != 13:
        raise ValidationError("default specs assume the 13-role pool")
    return DomainSpec(4, "sparse-random", (0, 2, 4, 6, 8, 10, 12), (3, 6))


def motif_edges(motif: str, k: int, seed: int = 0) -> tuple[tuple[int, int], ...]:
    """Edge layout of a motif over k ordered positions."""
    if motif not in MOTIFS:
        raise ValidationError(f"motif must be one of {MOTIFS}")
    if k < 2:
        return ()
    if motif == "chain":
        return tuple((i, i + 1) for i in range(k - 1))
    if motif == "star":
        return tuple((0, j) for j in range(1, k))
    if motif == "tree":
        return tuple(((j - 1) // 2, j) for j in range(1, k))
    if motif == "two-hub":
        return ((0, 1),) + tuple((j % 2, j) for j in range(2, k))
    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence(seed)))
    p = 2.0 / k
    return tuple((s, t) for s in range(k) for t in range(s + 1, k)
                 if rng.random() < p)


def _query_seed(query: str, stream: int) -> np.random.SeedSequence:
    digest = hashlib.sha256(query.encode("utf-8")).digest()
    return np.random.SeedSequence(
        int.from_bytes(digest[:8], "big"), spawn_key=(stream,))


def query_roles(query: str) -> tuple[int, ...]:
    """Role ids spelled out in the query's r:<id> tokens, ascending."""
    roles = {int(tok[2:]) for tok in query.split()
             if tok.startswith("r:") and tok[2:].isdigit()}
    return tuple(sorted(roles))


def oracle_graph(record: DatasetRecord | str, spec: DomainSpec) -> CollaborationGraph:
    """Deterministic ideal graph: the domain motif over the query's roles."""
    query = record if isinstance(record, str) else record.query
    roles = query_roles(query)
    seed = int(_query_seed(query, 0).generate_state(1)[0])
    return CollaborationGraph(roles, motif_edges(spec.motif, len(roles), seed))


def _random_graph(roles: tuple[int, ...], edge_prob: float,
                  rng: np.random.Generator) -> CollaborationGraph:
    n = len(roles)
    edges = tuple((s, t) for s in range(n) for t in range(s + 1, n)
                  if rng.random() < edge_prob)
    return CollaborationGraph(roles, edges)


def _default_evolver_config() -> ContractionConfig:
    # Exhaustive neighborhoods: domain subsets have at most 8 roles, so the
    # full single-edit neighborhood is small and the climb is deterministic.
    return ContractionConfig(epsilon=0.02, max_rounds=80,
                             neighbor_mode="exhaustive")


def build_teacher_graph(query: str, spec: DomainSpec, mode: SupervisionMode,
                        evolver_config: ContractionConfig | None = None,
                        params: UtilityParams | None = None,
                        ) -> tuple[CollaborationGraph, float]:
    """Reference graph plus its utility under the given supervision quality.

    full: evolve a random graph over the query's own roles to convergence.
    cheap-early(f): same trajectory, stopped after f of its refinements.
    static-template: the domain motif over the whole role subset, ignoring
    the query's draw.  random: a seeded random graph over the subset.
    """
    params = params or UtilityParams.for_pool(13)
    config = evolver_config or _default_evolver_config()
    oracle = oracle_graph(query, spec)
    rng = np.random.Generator(np.random.PCG64(_query_seed(query, 1)))

    if mode.kind == "static-template":
        roles = tuple(sorted(spec.role_subset))
        graph = CollaborationGraph(
            roles, motif_edges(spec.motif, len(roles),
                               seed=spec.domain_id))
    elif mode.kind == "random":
        size = int(rng.integers(spec.size_range[0], spec.size_range[1] + 1))
        roles = tuple(sorted(rng.choice(
            spec.role_subset, size=size, replace=False).tolist()))
        graph = _random_graph(roles, 0.4, rng)
    else:
        init = _random_graph(oracle.roles, 0.4, rng)
        traj = evolve(init, oracle, spec.role_subset, config, params, rng)
        if mode.kind == "full":
            graph = traj.rounds[-1].graph
        else:
            idx = math.ceil(mode.fraction * traj.num_refinements)
            graph = traj.rounds[idx].graph
    return graph, utility(graph, oracle, params)


def make_query(spec: DomainSpec, rng: np.random.Generator) -> str:
    size = int(rng.integers(spec.size_range[0], spec.size_range[1] + 1))
    roles = sorted(rng.choice(spec.role_subset, size=size,
                              replace=False).tolist())
    noise = [f"n:{rng.integers(0, 16 ** 4):04x}" for _ in range(3)]
    return " ".join([spec.signature_token]
                    + [f"r:{r}" for r in roles] + noise)


def make_corpus(specs: list[DomainSpec], per_domain: int, seed: int,
                mode: SupervisionMode | None = None,
                evolver_config: ContractionConfig | None = None,
                params: UtilityParams | None = None) -> list[DatasetRecord]:
    """Generate per_domain supervised records for each spec.

    Fully deterministic in (seed, specs, mode): every record derives its own
    rng stream, so generation order or parallel splitting cannot change the
    corpus.
    """
    if not specs:
        raise ValidationError("specs must be nonempty")
    mode = mode or SupervisionMode.full()
    records: list[DatasetRecord] = []
    for spec in specs:
        for index in range(per_domain):
            rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence(
                seed, spawn_key=(spec.domain_id, index))))
            query = make_query(spec, rng)
            graph, teacher_utility = build_teacher_graph(
                query, spec, mode, evolver_config, params)
            records.append(DatasetRecord(
                query=query, domain_id=spec.domain_id, graph=graph,
                teacher_utility=teacher_utility))
    return records


def make_queries(specs: list[DomainSpec], per_domain: int,
                 seed: int) -> list[DatasetRecord]:
    """Queries paired with their oracle graphs, no teacher annotation.

    Uses the same per-record rng derivation as make_corpus, so teaching
    these queries later reproduces make_corpus(seed, mode) exactly.
    """
    if not specs:
        raise ValidationError("specs must be nonempty")
    records: list[DatasetRecord] = []
    for spec in specs:
        for index in range(per_domain):
            rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence(
                seed, spawn_key=(spec.domain_id, index))))
            query = make_query(spec, rng)
            records.append(DatasetRecord(
                query=query, domain_id=spec.domain_id,
                graph=oracle_graph(query, spec), teacher_utility=None))
    return records


def spec_by_id(specs: list[DomainSpec], domain_id: int) -> DomainSpec:
    for spec in specs:
        if spec.domain_id == domain_id:
            return spec
    raise ValidationError(f"no spec with domain_id {domain_id}")
