"""Autoregressive graph decoder.

Nodes are emitted one at a time from the role pool (without replacement,
plus an explicit STOP symbol); after each new node, edges from every earlier
node are decided independently by a logistic head.  An edge is included only
when its probability strictly exceeds the threshold, so a probability equal
to the threshold never adds an edge.  History is carried by a two-layer GRU
whose state is advanced only after the step's node and edge decisions, and
both heads condition on the latent draw and the query embedding.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import torch
from torch import nn
from torch.nn import functional as F

from .errors import ValidationError
from .graphs import CollaborationGraph, canonicalize


@dataclass
class GenerationStep:
    """Record of one decoding step: distributions seen and choices made.

    ``chosen`` is a role id, or the STOP index (== number of roles).
    ``edge_probs[s]`` is the inclusion probability from earlier node s;
    ``edges_added`` lists the source positions that cleared the threshold.
    """

    node_probs: np.ndarray
    chosen: int
    edge_probs: np.ndarray = field(default_factory=lambda: np.zeros(0))
    edges_added: tuple[int, ...] = ()


@dataclass
class GenerationTrace:
    steps: list[GenerationStep] = field(default_factory=list)


@dataclass
class DecoderState:
    """Hidden state of the two GRU layers."""

    h1: torch.Tensor
    h2: torch.Tensor


class GraphDecoder(nn.Module):
    def __init__(self, num_roles: int, embed_dim: int, hidden_dim: int,
                 latent_dim: int, edge_hidden_dim: int,
                 dtype: torch.dtype = torch.float64):
        super().__init__()
        self.num_roles = num_roles
        self.embed_dim = embed_dim
        self.hidden_dim = hidden_dim
        # Step input is the new node's role embedding concatenated with the
        # mean embedding of its included edge sources (zeros when none).
        self.gru1 = nn.GRUCell(2 * embed_dim, hidden_dim).to(dtype)
        self.gru2 = nn.GRUCell(hidden_dim, hidden_dim).to(dtype)
        self.node_head = nn.Linear(
            hidden_dim + latent_dim + embed_dim, num_roles + 1, dtype=dtype)
        self.edge_fc1 = nn.Linear(
            hidden_dim + latent_dim + 3 * embed_dim, edge_hidden_dim, dtype=dtype)
        self.edge_fc2 = nn.Linear(edge_hidden_dim, 1, dtype=dtype)
        self._dtype = dtype

    @property
    def stop_index(self) -> int:
        return self.num_roles

    def initial_state(self) -> DecoderState:
        zeros = torch.zeros(self.hidden_dim, dtype=self._dtype)
        return DecoderState(h1=zeros, h2=zeros.clone())

    def advance(self, state: DecoderState, role_emb: torch.Tensor,
                edge_summary: torch.Tensor) -> DecoderState:
        x = torch.cat([role_emb, edge_summary]).unsqueeze(0)
        h1 = self.gru1(x, state.h1.unsqueeze(0))
        h2 = self.gru2(h1, state.h2.unsqueeze(0))
        return DecoderState(h1=h1.squeeze(0), h2=h2.squeeze(0))

    def node_logits(self, state: DecoderState, z: torch.Tensor,
                    query_vec: torch.Tensor, used_mask: torch.Tensor) -> torch.Tensor:
        """Logits over roles + STOP; already-used roles are set to -inf.

        STOP is never masked, so when every role is used the distribution is
        an exact point mass on STOP.
        """
        logits = self.node_head(torch.cat([state.h2, z, query_vec]))
        full_mask = torch.cat(
            [used_mask, torch.zeros(1, dtype=torch.bool)])
        return logits.masked_fill(full_mask, float("-inf"))

    def node_probs(self, state: DecoderState, z: torch.Tensor,
                   query_vec: torch.Tensor, used_mask: torch.Tensor) -> torch.Tensor:
        return torch.softmax(self.node_logits(state, z, query_vec, used_mask), dim=0)

    def edge_logits(self, state: DecoderState, z: torch.Tensor,
                    query_vec: torch.Tensor, cand_emb: torch.Tensor,
                    earlier_embs: torch.Tensor) -> torch.Tensor:
        """Independent logits for edges from each earlier node to the candidate."""
        k = earlier_embs.shape[0]
        ctx = torch.cat([state.h2, z, query_vec, cand_emb])
        rows = torch.cat([ctx.unsqueeze(0).expand(k, -1), earlier_embs], dim=1)
        return self.edge_fc2(torch.relu(self.edge_fc1(rows))).squeeze(1)

    def _edge_summary(self, earlier_embs: torch.Tensor,
                      included: list[int]) -> torch.Tensor:
        if not included:
            return torch.zeros(self.embed_dim, dtype=self._dtype)
        return earlier_embs[included].mean(dim=0)

    def generate(self, z: torch.Tensor, query_vec: torch.Tensor,
                 role_features: torch.Tensor, edge_threshold: float = 0.5,
                 mode: str = "greedy",
                 generator: torch.Generator | None = None,
                 ) -> tuple[CollaborationGraph, GenerationTrace]:
        """Decode a graph; at most num_roles nodes plus the final STOP.

        ``mode`` is "greedy" (argmax role) or "sampled" (multinomial role
        draw, requires ``generator``).  Edge decisions threshold the
        probability in both modes.
        """
        if not 0.0 <= edge_threshold <= 1.0:
            raise ValidationError(
                f"edge_threshold must be in [0, 1], got {edge_threshold}")
        if mode not in ("greedy", "sampled"):
            raise ValidationError(f"unknown mode {mode!r}")
        if mode == "sampled" and generator is None:
            raise ValidationError("sampled mode requires a torch.Generator")

        with torch.no_grad():
            state = self.initial_state()
            used = torch.zeros(self.num_roles, dtype=torch.bool)
            roles: list[int] = []
            edges: list[tuple[int, int]] = []
            node_embs: list[torch.Tensor] = []
            trace = GenerationTrace()
            for t in range(self.num_roles + 1):
                probs = self.node_probs(state, z, query_vec, used)
                if mode == "greedy":
                    choice = int(torch.argmax(probs))
                else:
                    choice = int(torch.multinomial(probs, 1, generator=generator))
                if choice == self.stop_index:
                    trace.steps.append(GenerationStep(
                        node_probs=probs.numpy().copy(), chosen=choice))
                    break
                cand_emb = role_features[choice]
                included: list[int] = []
                if node_embs:
                    earlier = torch.stack(node_embs)
                    edge_p = torch.sigmoid(self.edge_logits(
                        state, z, query_vec, cand_emb, earlier))
                    included = [s for s in range(t)
                                if float(edge_p[s]) > edge_threshold]
                    edge_probs = edge_p.numpy().copy()
                else:
                    edge_probs = np.zeros(0)
                edges.extend((s, t) for s in included)
                trace.steps.append(GenerationStep(
                    node_probs=probs.numpy().copy(), chosen=choice,
                    edge_probs=edge_probs, edges_added=tuple(included)))
                roles.append(choice)
                used[choice] = True
                summary = self._edge_summary(
                    torch.stack(node_embs) if node_embs else
                    torch.zeros((0, self.embed_dim), dtype=self._dtype), included)
                state = self.advance(state, cand_emb, summary)
                node_embs.append(cand_emb)
            return CollaborationGraph(tuple(roles), tuple(edges)), trace

    def teacher_forced_nll(self, reference: CollaborationGraph, z: torch.Tensor,
                           query_vec: torch.Tensor,
                           role_features: torch.Tensor) -> torch.Tensor:
        """Negative log-likelihood of the reference under teacher forcing.

        The reference is first canonicalized (nodes by ascending role id) so
        every training pass scores the same factorization.  Includes the
        terminal STOP decision; an empty reference costs exactly the STOP
        term.  Differentiable with respect to all decoder inputs.
        """
        ref = canonicalize(reference)
        state = self.initial_state()
        used = torch.zeros(self.num_roles, dtype=torch.bool)
        incoming: dict[int, list[int]] = {t: [] for t in range(ref.num_nodes)}
        for s, t in ref.edges:
            incoming[t].append(s)
        nll = z.new_zeros(())
        node_embs: list[torch.Tensor] = []
        for t, role in enumerate(ref.roles):
            log_probs = F.log_softmax(
                self.node_logits(state, z, query_vec, used), dim=0)
            nll = nll - log_probs[role]
            cand_emb = role_features[role]
            sources = sorted(incoming[t])
            if node_embs:
                earlier = torch.stack(node_embs)
                logits = self.edge_logits(state, z, query_vec, cand_emb, earlier)
                targets = torch.zeros(t, dtype=logits.dtype)
                targets[sources] = 1.0
                nll = nll + F.binary_cross_entropy_with_logits(
                    logits, targets, reduction="sum")
            used = used.clone()
            used[role] = True
            summary = self._edge_summary(
                torch.stack(node_embs) if node_embs else
                torch.zeros((0, self.embed_dim), dtype=self._dtype), sources)
            state = self.advance(state, cand_emb, summary)
            node_embs.append(cand_emb)
        log_probs = F.log_softmax(
            self.node_logits(state, z, query_vec, used), dim=0)
        return nll - log_probs[self.stop_index]
