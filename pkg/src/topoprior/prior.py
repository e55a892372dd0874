"""Query-conditioned latent prior N(f(query_vec), I) and its closed-form KL."""

from __future__ import annotations

import torch
from torch import nn

from .encoder import PosteriorGaussian


class ConditionalPrior(nn.Module):
    """Two-layer MLP mapping a query embedding to the prior mean.

    The covariance is pinned to the identity, which keeps the KL term
    closed-form and lets inference sample as mean + eps.
    """

    def __init__(self, embed_dim: int, hidden_dim: int, latent_dim: int,
                 dtype: torch.dtype = torch.float64):
        super().__init__()
        self.fc1 = nn.Linear(embed_dim, hidden_dim, dtype=dtype)
        self.fc2 = nn.Linear(hidden_dim, latent_dim, dtype=dtype)

    def mean(self, query_vec: torch.Tensor) -> torch.Tensor:
        return self.fc2(torch.relu(self.fc1(query_vec)))

    def sample(self, query_vec: torch.Tensor, eps: torch.Tensor) -> torch.Tensor:
        return self.mean(query_vec) + eps

    forward = mean


def kl_to_prior(posterior: PosteriorGaussian, prior_mean: torch.Tensor) -> torch.Tensor:
    """KL( N(mu, diag(sigma^2)) || N(m, I) ), summed over dimensions.

    0.5 * sum(sigma^2 + (mu - m)^2 - 1 - log sigma^2).  Zero exactly when
    mu == m and logvar == 0.
    """
    var = torch.exp(posterior.logvar)
    return 0.5 * torch.sum(
        var + (posterior.mu - prior_mean) ** 2 - 1.0 - posterior.logvar)
