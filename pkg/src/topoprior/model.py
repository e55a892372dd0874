"""Model assembly: configuration, deterministic init, parameter accounting."""

from __future__ import annotations

from dataclasses import asdict, dataclass

import torch
from torch import nn

from .adversary import DomainDiscriminator
from .decoder import GraphDecoder
from .embeddings import EmbeddingProvider, role_feature_matrix
from .encoder import GraphEncoder, PosteriorGaussian
from .errors import ConfigurationError, ValidationError
from .graphs import RolePool
from .prior import ConditionalPrior


@dataclass
class ModelConfig:
    """Architecture hyperparameters.

    The defaults (768-dim query embeddings, 256 hidden, 128 latent, 13
    roles, 7 domains) give about 3.37M trainable parameters.  Desk-scale
    synthetic runs shrink embed_dim to match the synthetic embedder.
    """

    embed_dim: int = 768
    hidden_dim: int = 256
    latent_dim: int = 128
    num_roles: int = 13
    num_domains: int = 7
    edge_hidden_dim: int = 256
    adversary_hidden_dim: int = 64
    grl_coefficient: float = -0.1

    def __post_init__(self):
        for name in ("embed_dim", "hidden_dim", "latent_dim", "num_roles",
                     "edge_hidden_dim", "adversary_hidden_dim"):
            if getattr(self, name) < 1:
                raise ValidationError(f"{name} must be positive")
        if self.num_domains < 2:
            raise ValidationError("num_domains must be at least 2")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "ModelConfig":
        return cls(**data)


class TopoPriorModel(nn.Module):
    """Encoder, conditional prior, decoder, domain discriminator and a small
    utility regressor, sharing one role-feature table."""

    def __init__(self, config: ModelConfig, role_features: torch.Tensor,
                 dtype: torch.dtype = torch.float64):
        super().__init__()
        if role_features.shape != (config.num_roles, config.embed_dim):
            raise ConfigurationError(
                f"role_features shape {tuple(role_features.shape)} does not"
                f" match (num_roles={config.num_roles},"
                f" embed_dim={config.embed_dim})")
        self.config = config
        self.encoder = GraphEncoder(
            config.embed_dim, config.hidden_dim, config.latent_dim, dtype=dtype)
        self.prior = ConditionalPrior(
            config.embed_dim, config.hidden_dim, config.latent_dim, dtype=dtype)
        self.decoder = GraphDecoder(
            config.num_roles, config.embed_dim, config.hidden_dim,
            config.latent_dim, config.edge_hidden_dim, dtype=dtype)
        self.discriminator = DomainDiscriminator(
            config.latent_dim, config.adversary_hidden_dim, config.num_domains,
            grl_coefficient=config.grl_coefficient, dtype=dtype)
        self.utility_head = nn.Linear(config.latent_dim, 1, dtype=dtype)
        self.register_buffer("role_features", role_features.to(dtype))

    @classmethod
    def build(cls, config: ModelConfig, pool: RolePool,
              provider: EmbeddingProvider, init_seed: int = 0,
              dtype: torch.dtype = torch.float64) -> "TopoPriorModel":
        if len(pool) != config.num_roles:
            raise ConfigurationError(
                f"pool has {len(pool)} roles, config expects {config.num_roles}")
        if provider.dimension != config.embed_dim:
            raise ConfigurationError(
                f"provider dimension {provider.dimension} does not match"
                f" embed_dim {config.embed_dim}")
        features = torch.as_tensor(role_feature_matrix(pool, provider), dtype=dtype)
        model = cls(config, features, dtype=dtype)
        model.reset_parameters(init_seed)
        return model

    @torch.no_grad()
    def reset_parameters(self, seed: int) -> None:
        """Fan-in-scaled uniform weights, zero biases, reproducible per seed.

        Parameters are visited in registration order, which is fixed for a
        given architecture, so one seed pins every value.
        """
        gen = torch.Generator().manual_seed(int(seed))
        for _, param in self.named_parameters():
            if param.dim() >= 2:
                bound = 1.0 / float(param.shape[-1]) ** 0.5
                param.uniform_(-bound, bound, generator=gen)
            else:
                param.zero_()

    def encode(self, a_norm: torch.Tensor,
               query_vec: torch.Tensor) -> PosteriorGaussian:
        return self.encoder(a_norm, self.role_features, query_vec)

    def predicted_utility(self, z: torch.Tensor) -> torch.Tensor:
        return self.utility_head(z).squeeze(-1)

    def count_parameters(self) -> int:
        return sum(p.numel() for p in self.parameters() if p.requires_grad)
