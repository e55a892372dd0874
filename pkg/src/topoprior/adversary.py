"""Domain discriminator with a gradient reversal layer.

The reversal layer is the identity in the forward pass.  On the way back it
multiplies the gradient flowing toward the encoder by ``coefficient``
(negative for adversarial training), while the discriminator's own
parameters receive the plain, unreversed gradient.
"""

from __future__ import annotations

import torch
from torch import nn
from torch.nn import functional as F


class _GradientReversal(torch.autograd.Function):
    @staticmethod
    def forward(ctx, x: torch.Tensor, coefficient: float):
        ctx.coefficient = coefficient
        return x.view_as(x)

    @staticmethod
    def backward(ctx, grad_output: torch.Tensor):
        return ctx.coefficient * grad_output, None


def grad_reverse(x: torch.Tensor, coefficient: float) -> torch.Tensor:
    return _GradientReversal.apply(x, coefficient)


class DomainDiscriminator(nn.Module):
    """Two-layer softmax classifier over domain labels."""

    def __init__(self, latent_dim: int, hidden_dim: int, num_domains: int,
                 grl_coefficient: float = -0.1,
                 dtype: torch.dtype = torch.float64):
        super().__init__()
        self.fc1 = nn.Linear(latent_dim, hidden_dim, dtype=dtype)
        self.fc2 = nn.Linear(hidden_dim, num_domains, dtype=dtype)
        self.grl_coefficient = float(grl_coefficient)
        self.num_domains = num_domains

    def logits(self, z: torch.Tensor) -> torch.Tensor:
        return self.fc2(torch.relu(self.fc1(z)))

    def discriminate(self, z: torch.Tensor) -> torch.Tensor:
        """Domain probabilities for a latent vector (no gradient reversal)."""
        return torch.softmax(self.logits(z), dim=-1)

    def adapt_loss(self, z: torch.Tensor, domain_id: int) -> torch.Tensor:
        """Cross-entropy against the true domain, with reversal applied to z.

        Gradient contract: d(loss)/d(z) equals grl_coefficient times the
        unreversed gradient, elementwise; discriminator parameter gradients
        are unaffected by the coefficient.
        """
        reversed_z = grad_reverse(z, self.grl_coefficient)
        target = torch.tensor(domain_id)
        return F.cross_entropy(self.logits(reversed_z).unsqueeze(0),
                               target.unsqueeze(0))
