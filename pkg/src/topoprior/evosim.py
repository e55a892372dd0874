"""Surrogate topology evolution and its cost accounting.

A downstream system that executes a collaboration graph and refines it over
rounds is modelled two ways: a hill-climbing local search over single-edit
graph neighbors, and an idealized mode that contracts the utility gap by a
fixed factor per round.  Utility is task performance (edge F1 against an
oracle graph) minus a weighted, normalized token cost that is linear in
graph size.  The closed-form round/token bounds live here too, next to the
simulators that exercise them.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .errors import ValidationError
from .graphs import CollaborationGraph, require_valid

EVOLVE_MODES = ("local-search", "idealized")
NEIGHBOR_MODES = ("sampled", "exhaustive")


@dataclass(frozen=True)
class UtilityParams:
    """Utility weights: J = perf - lam * token_cost / max_cost.

    ``node_rate``/``edge_rate``/``base_cost`` are the linear token-cost
    coefficients; ``max_cost`` normalizes cost into [0, 1] and must be at
    least the cost of the densest admissible graph (see :meth:`for_pool`).
    """

    lam: float = 0.25
    node_rate: float = 10.0
    edge_rate: float = 5.0
    base_cost: float = 20.0
    max_cost: float = 540.0

    def __post_init__(self):
        if self.lam < 0:
            raise ValidationError("lam must be >= 0")
        if min(self.node_rate, self.edge_rate, self.base_cost) < 0:
            raise ValidationError("token-cost coefficients must be >= 0")
        if self.max_cost <= 0:
            raise ValidationError("max_cost must be > 0")

    @classmethod
    def for_pool(cls, num_roles: int, lam: float = 0.25,
                 node_rate: float = 10.0, edge_rate: float = 5.0,
                 base_cost: float = 20.0) -> "UtilityParams":
        """Parameters with max_cost set to the complete-graph cost, so the
        normalized cost of any valid graph is at most 1."""
        max_cost = (node_rate * num_roles
                    + edge_rate * num_roles * (num_roles - 1) / 2.0
                    + base_cost)
        return cls(lam=lam, node_rate=node_rate, edge_rate=edge_rate,
                   base_cost=base_cost, max_cost=max_cost)


@dataclass(frozen=True)
class ContractionConfig:
    """Evolution dynamics: contraction factor, stop slack, search width."""

    eta: float = 0.5
    mode: str = "local-search"
    neighbor_samples: int = 16
    max_rounds: int = 64
    epsilon: float = 0.02
    neighbor_mode: str = "sampled"
    size_cap: int | None = None

    def __post_init__(self):
        if not 0.0 < self.eta <= 1.0:
            raise ValidationError(f"eta must be in (0, 1], got {self.eta}")
        if self.mode not in EVOLVE_MODES:
            raise ValidationError(f"mode must be one of {EVOLVE_MODES}")
        if self.neighbor_mode not in NEIGHBOR_MODES:
            raise ValidationError(
                f"neighbor_mode must be one of {NEIGHBOR_MODES}")
        if self.neighbor_samples < 1:
            raise ValidationError("neighbor_samples must be >= 1")
        if self.max_rounds < 0:
            raise ValidationError("max_rounds must be >= 0")
        if self.epsilon <= 0:
            raise ValidationError("epsilon must be > 0")
        if self.size_cap is not None and self.size_cap < 1:
            raise ValidationError("size_cap must be >= 1 when set")


@dataclass
class EvolutionRound:
    """State of one executed round; ``graph`` is None in idealized mode
    after round zero (only the utility scalar evolves there)."""

    graph: CollaborationGraph | None
    utility: float
    token_cost: float
    edit: str = "init"


@dataclass
class EvolutionTrajectory:
    rounds: list[EvolutionRound] = field(default_factory=list)
    init_source: str = ""
    mode: str = "local-search"

    @property
    def utilities(self) -> list[float]:
        return [r.utility for r in self.rounds]

    @property
    def num_rounds(self) -> int:
        """Executed rounds (each one incurs its token cost)."""
        return len(self.rounds)

    @property
    def num_refinements(self) -> int:
        """Accepted topology edits; zero when the init was already terminal."""
        return max(0, len(self.rounds) - 1)

    @property
    def total_tokens(self) -> float:
        return float(sum(r.token_cost for r in self.rounds))

    @property
    def terminal_utility(self) -> float:
        return self.rounds[-1].utility


def token_cost(graph: CollaborationGraph, params: UtilityParams) -> float:
    return (params.node_rate * graph.num_nodes
            + params.edge_rate * graph.num_edges + params.base_cost)


def perf(graph: CollaborationGraph, oracle: CollaborationGraph) -> float:
    """Edge F1 over unordered role pairs; two empty edge sets score 1."""
    predicted = graph.role_pairs()
    truth = oracle.role_pairs()
    if not predicted and not truth:
        return 1.0
    if not predicted or not truth:
        return 0.0
    tp = len(predicted & truth)
    if tp == 0:
        return 0.0
    precision = tp / len(predicted)
    recall = tp / len(truth)
    return 2.0 * precision * recall / (precision + recall)


def utility(graph: CollaborationGraph, oracle: CollaborationGraph,
            params: UtilityParams) -> float:
    return perf(graph, oracle) - params.lam * token_cost(graph, params) / params.max_cost


def _remove_node(graph: CollaborationGraph, pos: int) -> CollaborationGraph:
    roles = tuple(r for i, r in enumerate(graph.roles) if i != pos)
    edges = tuple(
        (s - (s > pos), t - (t > pos))
        for s, t in graph.edges if s != pos and t != pos)
    return CollaborationGraph(roles, edges)


def _neighbors(graph: CollaborationGraph, candidate_roles: Sequence[int],
               size_cap: int | None):
    """All single-edit neighbors, tagged by edit kind.

    New nodes attach with one edge from an existing node (extending the
    graph without immediately wasting a round on a disconnected agent);
    into an empty graph they arrive alone.
    """
    n = graph.num_nodes
    present = set(graph.edges)
    unused = [r for r in candidate_roles if r not in set(graph.roles)]

    def admissible(g: CollaborationGraph) -> bool:
        return size_cap is None or g.num_nodes + g.num_edges <= size_cap

    out: list[tuple[str, CollaborationGraph]] = []
    for s in range(n):
        for t in range(s + 1, n):
            if (s, t) not in present:
                g = CollaborationGraph(graph.roles, graph.edges + ((s, t),))
                if admissible(g):
                    out.append(("add-edge", g))
    for e in present:
        g = CollaborationGraph(
            graph.roles, tuple(x for x in graph.edges if x != e))
        out.append(("remove-edge", g))
    for role in unused:
        if n == 0:
            g = CollaborationGraph((role,), ())
            if admissible(g):
                out.append(("add-node", g))
            continue
        for s in range(n):
            g = CollaborationGraph(
                graph.roles + (role,), graph.edges + ((s, n),))
            if admissible(g):
                out.append(("add-node", g))
    for pos in range(n):
        out.append(("remove-node", _remove_node(graph, pos)))
    return out


def contract_residuals(gap: float, eta: float, eps: float,
                       max_rounds: int) -> list[float]:
    """Idealized residual sequence: each round multiplies the gap by (1-eta).

    Stops once the residual falls to eps (with a one-part-per-billion
    tolerance so exact-arithmetic boundary cases are not pushed one round
    over by float rounding) or after max_rounds.
    """
    residuals: list[float] = []
    r = float(gap)
    if r <= eps:
        return residuals
    for _ in range(max_rounds):
        r = (1.0 - eta) * r
        residuals.append(r)
        if r <= eps * (1.0 + 1e-9):
            break
    return residuals


def evolve(init_graph: CollaborationGraph, oracle: CollaborationGraph,
           candidate_roles: Sequence[int], config: ContractionConfig,
           params: UtilityParams, rng: np.random.Generator,
           init_source: str = "") -> EvolutionTrajectory:
    """Refine ``init_graph`` toward the oracle's utility.

    Local-search mode: each round scores ``neighbor_samples`` sampled
    single-edit neighbors (or every neighbor in exhaustive mode) and moves
    to the best strictly improving one; stops at max_rounds, when no sampled
    neighbor improves, or when the utility gap to the oracle is within
    epsilon.  Idealized mode contracts the utility gap by eta per round on
    the scalar alone.
    """
    num_roles = max(list(candidate_roles) + list(init_graph.roles)
                    + list(oracle.roles), default=-1) + 1
    require_valid(init_graph, num_roles)
    u_star = utility(oracle, oracle, params)
    current_u = utility(init_graph, oracle, params)
    cost0 = token_cost(init_graph, params)
    traj = EvolutionTrajectory(init_source=init_source, mode=config.mode)
    traj.rounds.append(EvolutionRound(init_graph, current_u, cost0))

    if config.mode == "idealized":
        for residual in contract_residuals(
                u_star - current_u, config.eta, config.epsilon,
                config.max_rounds):
            traj.rounds.append(EvolutionRound(
                None, u_star - residual, cost0, edit="contract"))
        return traj

    current = init_graph
    for _ in range(config.max_rounds):
        if u_star - current_u <= config.epsilon:
            break
        options = _neighbors(current, candidate_roles, config.size_cap)
        if not options:
            break
        if config.neighbor_mode == "sampled":
            idx = rng.integers(0, len(options), size=config.neighbor_samples)
            options = [options[i] for i in idx]
        best_edit, best_graph, best_u = None, None, current_u
        for edit, g in options:
            u = utility(g, oracle, params)
            if u > best_u:
                best_edit, best_graph, best_u = edit, g, u
        if best_graph is None:
            break
        current, current_u = best_graph, best_u
        traj.rounds.append(EvolutionRound(
            current, current_u, token_cost(current, params), edit=best_edit))
    return traj


def rounds_to_eps(u0: float, u_star: float, eta: float, eps: float) -> int:
    """Rounds needed for the contraction to bring the gap within eps.

    0 when already within eps; with eta == 1 a single round closes any gap.
    The ceiling is nudged by 1e-12 so ratios that are exact integers in real
    arithmetic (for example log 8 / log 2) do not round up spuriously.
    """
    if not 0.0 < eta <= 1.0:
        raise ValidationError(f"eta must be in (0, 1], got {eta}")
    if eps <= 0:
        raise ValidationError(f"eps must be > 0, got {eps}")
    if u_star < u0:
        raise ValidationError(f"u_star ({u_star}) must be >= u0 ({u0})")
    gap = u_star - u0
    if gap <= eps:
        return 0
    if eta == 1.0:
        return 1
    ratio = math.log(gap / eps) / math.log(1.0 / (1.0 - eta))
    return max(1, math.ceil(ratio - 1e-12))


def rounds_delta(u0_prior: float, u0_scratch: float, u_star: float,
                 eta: float, eps: float) -> int:
    """Round savings from the better start: T(prior) - T(scratch), always <= 0."""
    if not u0_prior > u0_scratch:
        raise ValidationError(
            f"u0_prior ({u0_prior}) must exceed u0_scratch ({u0_scratch})")
    return (rounds_to_eps(u0_prior, u_star, eta, eps)
            - rounds_to_eps(u0_scratch, u_star, eta, eps))


def total_token_bound(num_rounds: int, size_cap: int, node_rate: float,
                      edge_rate: float, base_cost: float) -> float:
    """Worst-case token total for T rounds under the |V|+|E| <= M cap."""
    if size_cap < 1:
        raise ValidationError("size_cap must be >= 1")
    return num_rounds * ((node_rate + edge_rate) * size_cap + base_cost)


@dataclass(frozen=True)
class BreakEvenReport:
    train_tokens_total: float
    baseline_per_query: float
    with_prior_per_query: float
    savings_per_query: float
    queries: int
    claimed_queries: int | None = None
    claimed_discrepancy_pct: float | None = None

    def to_dict(self) -> dict:
        out = {
            "train_tokens_total": self.train_tokens_total,
            "baseline_per_query": self.baseline_per_query,
            "with_prior_per_query": self.with_prior_per_query,
            "savings_per_query": self.savings_per_query,
            "queries": self.queries,
        }
        if self.claimed_queries is not None:
            out["claimed_queries"] = self.claimed_queries
            out["claimed_discrepancy_pct"] = self.claimed_discrepancy_pct
            out["note"] = (
                f"computed break-even is {self.queries} queries; the claimed"
                f" figure {self.claimed_queries} differs by"
                f" {self.claimed_discrepancy_pct:.2f}%")
        return out


def break_even(train_tokens_total: float, baseline_per_query: float,
               with_prior_per_query: float,
               claimed_queries: int | None = None) -> BreakEvenReport:
    """Queries needed before per-query savings pay off the training spend."""
    savings = baseline_per_query - with_prior_per_query
    if savings <= 0:
        raise ValidationError(
            "baseline_per_query must exceed with_prior_per_query")
    queries = math.ceil(train_tokens_total / savings)
    discrepancy = None
    if claimed_queries is not None:
        discrepancy = abs(queries - claimed_queries) / claimed_queries * 100.0
    return BreakEvenReport(
        train_tokens_total=train_tokens_total,
        baseline_per_query=baseline_per_query,
        with_prior_per_query=with_prior_per_query,
        savings_per_query=savings, queries=queries,
        claimed_queries=claimed_queries, claimed_discrepancy_pct=discrepancy)


def _probe_side_grad(w: np.ndarray, b: float, x: np.ndarray, label: float):
    p = 1.0 / (1.0 + np.exp(-(x @ w + b)))
    err = p - label
    return x.T @ err / len(x), float(err.mean())


def proxy_divergence(z_samples_a: np.ndarray, z_samples_b: np.ndarray) -> float:
    """Separability of two latent samples, in [0, 2].

    Trains a fresh affine+logistic probe on a deterministic split (even
    indices train, odd test) and returns max(0, 2*(1 - 2e)) for the held-out
    balanced error e.  0 means the probe cannot tell the sides apart; 2
    means perfectly separable.  Every step is symmetric in the two sides
    (shared statistics are averaged side-by-side, ties predict side A), so
    swapping the arguments returns the identical value.
    """
    za = np.asarray(z_samples_a, dtype=np.float64)
    zb = np.asarray(z_samples_b, dtype=np.float64)
    if za.ndim != 2 or zb.ndim != 2 or za.shape[1] != zb.shape[1]:
        raise ValidationError("inputs must be 2-d arrays with equal width")
    if len(za) < 50 or len(zb) < 50:
        raise ValidationError(
            f"need at least 50 samples per side, got {len(za)} and {len(zb)}")

    a_train, a_test = za[0::2], za[1::2]
    b_train, b_test = zb[0::2], zb[1::2]
    mean = 0.5 * (a_train.mean(axis=0) + b_train.mean(axis=0))
    var = 0.5 * (((a_train - mean) ** 2).mean(axis=0)
                 + ((b_train - mean) ** 2).mean(axis=0))
    scale = np.sqrt(var) + 1e-12

    def norm(x):
        return (x - mean) / scale

    a_tr, b_tr = norm(a_train), norm(b_train)
    d = za.shape[1]
    w = np.zeros(d)
    b = 0.0
    lr, ridge = 1.0, 1e-3
    for _ in range(300):
        gw_a, gb_a = _probe_side_grad(w, b, a_tr, 0.0)
        gw_b, gb_b = _probe_side_grad(w, b, b_tr, 1.0)
        w -= lr * (0.5 * (gw_a + gw_b) + ridge * w)
        b -= lr * 0.5 * (gb_a + gb_b)

    # A zero score counts as an error for both sides; together with the
    # averaged statistics this makes the value exactly invariant under
    # swapping the arguments (scores negate elementwise in the swapped run).
    scores_a = norm(a_test) @ w + b
    scores_b = norm(b_test) @ w + b
    err_a = float(np.mean(scores_a >= 0.0))
    err_b = float(np.mean(scores_b <= 0.0))
    balanced_error = 0.5 * (err_a + err_b)
    return max(0.0, 2.0 * (1.0 - 2.0 * balanced_error))
