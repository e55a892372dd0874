"""Graph encoder: two GCN layers, sum pooling, query fusion, Gaussian heads.

Works on the role-indexed adjacency contract, so node relabelling inside a
graph cannot change the output.  All arithmetic is float64.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
from torch import nn


@dataclass
class PosteriorGaussian:
    """Diagonal Gaussian over the latent space, parameterized by log variance."""

    mu: torch.Tensor
    logvar: torch.Tensor


def sample_gaussian(posterior: PosteriorGaussian, eps: torch.Tensor) -> torch.Tensor:
    """Reparameterized draw z = mu + sigma * eps with sigma = exp(logvar / 2)."""
    return posterior.mu + torch.exp(0.5 * posterior.logvar) * eps


class GraphEncoder(nn.Module):
    """Posterior network q(z | graph, query)."""

    def __init__(self, embed_dim: int, hidden_dim: int, latent_dim: int,
                 dtype: torch.dtype = torch.float64):
        super().__init__()
        self.gcn1 = nn.Linear(embed_dim, hidden_dim, bias=False, dtype=dtype)
        self.gcn2 = nn.Linear(hidden_dim, hidden_dim, bias=False, dtype=dtype)
        self.fuse1 = nn.Linear(embed_dim + hidden_dim, hidden_dim, dtype=dtype)
        self.fuse2 = nn.Linear(hidden_dim, hidden_dim, dtype=dtype)
        self.mu_head = nn.Linear(hidden_dim, latent_dim, dtype=dtype)
        self.logvar_head = nn.Linear(hidden_dim, latent_dim, dtype=dtype)

    def node_states(self, a_norm: torch.Tensor, h0: torch.Tensor) -> torch.Tensor:
        """Two rounds of propagation over the normalized adjacency.

        ``a_norm`` rows of absent roles are zero, so those node states stay
        zero through both layers.
        """
        h = torch.relu(a_norm @ self.gcn1(h0))
        return torch.relu(a_norm @ self.gcn2(h))

    def pool(self, node_states: torch.Tensor) -> torch.Tensor:
        return node_states.sum(dim=0)

    def fuse(self, query_vec: torch.Tensor, graph_vec: torch.Tensor) -> torch.Tensor:
        h = torch.relu(self.fuse1(torch.cat([query_vec, graph_vec])))
        return self.fuse2(h)

    def posterior(self, task_vec: torch.Tensor) -> PosteriorGaussian:
        return PosteriorGaussian(
            mu=self.mu_head(task_vec), logvar=self.logvar_head(task_vec))

    def forward(self, a_norm: torch.Tensor, h0: torch.Tensor,
                query_vec: torch.Tensor) -> PosteriorGaussian:
        graph_vec = self.pool(self.node_states(a_norm, h0))
        return self.posterior(self.fuse(query_vec, graph_vec))
