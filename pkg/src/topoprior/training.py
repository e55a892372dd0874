"""Training: loss assembly, the optimization loop, checkpoints, gradcheck.

The total objective is (recon + kl) + alpha * task + beta * adapt.  Weighted
terms are added only when their coefficient is positive, so alpha = beta = 0
reproduces the plain variational loss bit for bit.  Everything downstream of
the seed is deterministic: the epoch shuffle is derived from (seed, epoch),
and latent noise comes from a dedicated generator whose state rides along in
checkpoints so a resumed run continues the same stream.
"""

from __future__ import annotations

import csv
import logging
from dataclasses import asdict, dataclass, field

import numpy as np
import torch

from .embeddings import EmbeddingProvider
from .encoder import sample_gaussian
from .errors import CheckpointError, NumericalError, ValidationError
from .graphs import (CollaborationGraph, DatasetRecord, canonicalize,
                     normalize_adjacency, require_valid, to_adjacency)
from .model import ModelConfig, TopoPriorModel
from .prior import kl_to_prior

logger = logging.getLogger(__name__)

CHECKPOINT_VERSION = 1
LOSS_LOG_COLUMNS = ("epoch", "recon", "kl", "task", "adapt", "total")


@dataclass
class TrainConfig:
    """Optimization hyperparameters; architecture lives in ModelConfig."""

    learning_rate: float = 2e-4
    batch_size: int = 32
    epochs: int = 5
    alpha: float = 0.5
    beta: float = 0.5
    delta_e: float = 0.5
    grl_coefficient: float = -0.1
    seed: int = 0
    latent_dim: int = 128
    hidden_dim: int = 256

    def __post_init__(self):
        if self.alpha < 0 or self.beta < 0:
            raise ValidationError("alpha and beta must be non-negative")
        if not 0.0 <= self.delta_e <= 1.0:
            raise ValidationError(
                f"delta_e must be in [0, 1], got {self.delta_e}")
        if self.learning_rate <= 0:
            raise ValidationError("learning_rate must be positive")
        if self.batch_size < 1 or self.epochs < 0:
            raise ValidationError("batch_size must be >= 1 and epochs >= 0")
        if self.seed < 0:
            raise ValidationError("seed must be non-negative")
        if self.latent_dim < 1 or self.hidden_dim < 1:
            raise ValidationError("latent_dim and hidden_dim must be positive")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "TrainConfig":
        return cls(**data)


@dataclass
class PreparedRecord:
    """A dataset record with everything the loss needs precomputed."""

    index: int
    query: str
    query_vec: torch.Tensor
    a_norm: torch.Tensor
    graph: CollaborationGraph
    domain_id: int
    teacher_utility: float | None


def prepare_record(record: DatasetRecord, provider: EmbeddingProvider,
                   num_roles: int, index: int = 0,
                   dtype: torch.dtype = torch.float64) -> PreparedRecord:
    require_valid(record.graph, num_roles)
    if record.domain_id < 0:
        raise ValidationError(
            f"record {index} has negative domain_id {record.domain_id}")
    query_vec = torch.as_tensor(provider.embed_query(record.query), dtype=dtype)
    a_norm = torch.as_tensor(
        normalize_adjacency(to_adjacency(record.graph, num_roles)), dtype=dtype)
    return PreparedRecord(
        index=index, query=record.query, query_vec=query_vec, a_norm=a_norm,
        graph=canonicalize(record.graph), domain_id=record.domain_id,
        teacher_utility=record.teacher_utility)


def prepare_records(records: list[DatasetRecord], provider: EmbeddingProvider,
                    num_roles: int,
                    dtype: torch.dtype = torch.float64) -> list[PreparedRecord]:
    return [prepare_record(r, provider, num_roles, index=i, dtype=dtype)
            for i, r in enumerate(records)]


@dataclass
class LossComponents:
    """Unweighted loss terms; task and adapt are None when not computed."""

    recon: float
    kl: float
    task: float | None = None
    adapt: float | None = None

    @property
    def total(self) -> float:
        return (self.recon + self.kl + (self.task or 0.0) + (self.adapt or 0.0))


_warned_missing_utility = False


def _warn_missing_utility(index: int) -> None:
    global _warned_missing_utility
    if not _warned_missing_utility:
        logger.warning(
            "record %d has no teacher_utility; task term skipped"
            " (logged once per process)", index)
        _warned_missing_utility = True


def total_loss(record: PreparedRecord, model: TopoPriorModel,
               eps: torch.Tensor, config: TrainConfig,
               ) -> tuple[torch.Tensor, LossComponents]:
    """One-record objective and its component breakdown.

    The component dataclass stores the *unweighted* terms; the returned
    scalar applies alpha and beta.  A missing teacher_utility under
    alpha > 0 skips the task term and records it as absent.
    """
    posterior = model.encode(record.a_norm, record.query_vec)
    z = sample_gaussian(posterior, eps)
    recon = model.decoder.teacher_forced_nll(
        record.graph, z, record.query_vec, model.role_features)
    kl = kl_to_prior(posterior, model.prior.mean(record.query_vec))
    total = recon + kl
    task_value: float | None = None
    if config.alpha > 0:
        if record.teacher_utility is None:
            _warn_missing_utility(record.index)
        else:
            task = (model.predicted_utility(z) - record.teacher_utility) ** 2
            total = total + config.alpha * task
            task_value = float(task.detach())
    adapt_value: float | None = None
    if config.beta > 0:
        adapt = model.discriminator.adapt_loss(z, record.domain_id)
        total = total + config.beta * adapt
        adapt_value = float(adapt.detach())
    components = LossComponents(
        recon=float(recon.detach()), kl=float(kl.detach()),
        task=task_value, adapt=adapt_value)
    return total, components


@dataclass
class EpochStats:
    """Mean loss components over one epoch; absent terms stay None."""

    epoch: int
    recon: float
    kl: float
    task: float | None
    adapt: float | None
    total: float

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "EpochStats":
        return cls(**data)


@dataclass
class _Accumulator:
    """Running sums for the current epoch; survives checkpointing."""

    count: int = 0
    recon: float = 0.0
    kl: float = 0.0
    total: float = 0.0
    task: float = 0.0
    task_count: int = 0
    adapt: float = 0.0
    adapt_count: int = 0

    def add(self, components: LossComponents, weighted_total: float) -> None:
        self.count += 1
        self.recon += components.recon
        self.kl += components.kl
        self.total += weighted_total
        if components.task is not None:
            self.task += components.task
            self.task_count += 1
        if components.adapt is not None:
            self.adapt += components.adapt
            self.adapt_count += 1

    def stats(self, epoch: int) -> EpochStats:
        n = max(self.count, 1)
        return EpochStats(
            epoch=epoch,
            recon=self.recon / n,
            kl=self.kl / n,
            task=self.task / self.task_count if self.task_count else None,
            adapt=self.adapt / self.adapt_count if self.adapt_count else None,
            total=self.total / n)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "_Accumulator":
        return cls(**data)


@dataclass
class TrainState:
    """Everything needed to continue a run exactly where it stopped."""

    model: TopoPriorModel
    optimizer: torch.optim.Adam
    config: TrainConfig
    eps_state: torch.Tensor
    epoch: int = 0
    step_in_epoch: int = 0
    global_step: int = 0
    accumulator: _Accumulator = field(default_factory=_Accumulator)
    loss_log: list[EpochStats] = field(default_factory=list)


@dataclass
class FitResult:
    state: TrainState
    completed: bool

    @property
    def model(self) -> TopoPriorModel:
        return self.state.model

    @property
    def loss_log(self) -> list[EpochStats]:
        return self.state.loss_log


def _epoch_order(seed: int, epoch: int, n: int) -> np.ndarray:
    # The shuffle depends only on (seed, epoch), so a resumed run replays
    # the interrupted epoch's order without storing it.
    return np.random.default_rng((seed, epoch)).permutation(n)


def _as_prepared(records, provider, num_roles) -> list[PreparedRecord]:
    if not records:
        raise ValidationError("corpus is empty")
    if isinstance(records[0], PreparedRecord):
        return list(records)
    if provider is None:
        raise ValidationError(
            "raw dataset records require an embedding provider")
    return prepare_records(records, provider, num_roles)


def fit(records, config: TrainConfig | None = None,
        model: TopoPriorModel | None = None, *,
        provider: EmbeddingProvider | None = None,
        resume: "TrainState | None" = None,
        max_steps: int | None = None,
        checkpoint_path=None, log_path=None) -> FitResult:
    """Run the training loop, fresh or resumed.

    Fresh runs need ``config`` and ``model``; resumed runs take both from
    ``resume`` (typically a loaded checkpoint) and continue mid-epoch.  One
    optimizer step per batch, one eps draw per record.  ``max_steps`` caps
    the number of optimizer steps for this call, which is how a mid-epoch
    checkpoint is produced in the first place.
    """
    if resume is not None:
        if config is not None or model is not None:
            raise ValidationError(
                "resume carries its own config and model; do not pass them")
        model = resume.model
        config = resume.config
        optimizer = resume.optimizer
        eps_gen = torch.Generator()
        eps_gen.set_state(resume.eps_state)
        state = resume
    else:
        if config is None or model is None:
            raise ValidationError("fresh runs require config and model")
        optimizer = torch.optim.Adam(
            model.parameters(), lr=config.learning_rate)
        eps_gen = torch.Generator().manual_seed(int(config.seed))
        state = TrainState(model=model, optimizer=optimizer, config=config,
                           eps_state=eps_gen.get_state())

    prepared = _as_prepared(records, provider, model.config.num_roles)
    latent_dim = model.config.latent_dim
    completed = True
    steps_taken = 0

    epoch = state.epoch
    while epoch < config.epochs:
        order = _epoch_order(config.seed, epoch, len(prepared))
        batches = [order[i:i + config.batch_size]
                   for i in range(0, len(order), config.batch_size)]
        b = state.step_in_epoch if epoch == state.epoch else 0
        while b < len(batches):
            if max_steps is not None and steps_taken >= max_steps:
                completed = False
                break
            batch_losses = []
            for idx in batches[b]:
                rec = prepared[int(idx)]
                eps = torch.randn(latent_dim, generator=eps_gen,
                                  dtype=torch.float64)
                loss, components = total_loss(rec, model, eps, config)
                if not torch.isfinite(loss):
                    raise NumericalError(
                        f"non-finite loss at epoch {epoch} batch {b}"
                        f" record {rec.index}: recon={components.recon}"
                        f" kl={components.kl} task={components.task}"
                        f" adapt={components.adapt}")
                state.accumulator.add(components, float(loss.detach()))
                batch_losses.append(loss)
            batch_loss = torch.stack(batch_losses).mean()
            optimizer.zero_grad()
            batch_loss.backward()
            optimizer.step()
            steps_taken += 1
            state.global_step += 1
            b += 1
        state.epoch = epoch
        state.step_in_epoch = b
        if not completed:
            break
        row = state.accumulator.stats(epoch)
        state.loss_log.append(row)
        logger.info("epoch %d recon %.4f kl %.4f total %.4f",
                    row.epoch, row.recon, row.kl, row.total)
        state.accumulator = _Accumulator()
        epoch += 1
        state.epoch = epoch
        state.step_in_epoch = 0

    state.eps_state = eps_gen.get_state()
    if checkpoint_path is not None:
        save_checkpoint(checkpoint_path, state)
    if log_path is not None:
        write_loss_log(log_path, state.loss_log)
    return FitResult(state=state, completed=completed)


def infer_graph(query: str, model: TopoPriorModel,
                provider: EmbeddingProvider, *, delta_e: float = 0.5,
                eps: torch.Tensor | None = None, mode: str = "greedy",
                generator: torch.Generator | None = None) -> CollaborationGraph:
    """Generate a graph for a query from the prior; no reference consulted.

    ``eps`` perturbs the prior mean (zeros give the deterministic point
    estimate); decoding follows the decoder's greedy or sampled mode.
    """
    query_vec = torch.as_tensor(
        provider.embed_query(query), dtype=torch.float64)
    if eps is None:
        eps = torch.zeros(model.config.latent_dim, dtype=torch.float64)
    with torch.no_grad():
        z = model.prior.sample(query_vec, eps)
        graph, _ = model.decoder.generate(
            z, query_vec, model.role_features, edge_threshold=delta_e,
            mode=mode, generator=generator)
    return graph


def save_checkpoint(path, state: TrainState) -> None:
    payload = {
        "version": CHECKPOINT_VERSION,
        "model_config": state.model.config.to_dict(),
        "train_config": state.config.to_dict(),
        "model_state": state.model.state_dict(),
        "optimizer_state": state.optimizer.state_dict(),
        "eps_state": state.eps_state,
        "epoch": state.epoch,
        "step_in_epoch": state.step_in_epoch,
        "global_step": state.global_step,
        "accumulator": state.accumulator.to_dict(),
        "loss_log": [row.to_dict() for row in state.loss_log],
    }
    torch.save(payload, path)


def load_checkpoint(path) -> TrainState:
    """Rebuild a TrainState from disk; the round trip is bit-exact."""
    try:
        payload = torch.load(path, weights_only=True)
    except Exception as exc:
        raise CheckpointError(f"unreadable checkpoint {path}: {exc}") from exc
    if not isinstance(payload, dict) or "version" not in payload:
        raise CheckpointError(f"checkpoint {path} has no version field")
    if payload["version"] != CHECKPOINT_VERSION:
        raise CheckpointError(
            f"checkpoint version {payload['version']} unsupported"
            f" (expected {CHECKPOINT_VERSION})")
    try:
        model_config = ModelConfig.from_dict(payload["model_config"])
        config = TrainConfig.from_dict(payload["train_config"])
        placeholder = torch.zeros(
            (model_config.num_roles, model_config.embed_dim),
            dtype=torch.float64)
        model = TopoPriorModel(model_config, placeholder)
        model.load_state_dict(payload["model_state"])
        optimizer = torch.optim.Adam(
            model.parameters(), lr=config.learning_rate)
        optimizer.load_state_dict(payload["optimizer_state"])
        return TrainState(
            model=model, optimizer=optimizer, config=config,
            eps_state=payload["eps_state"],
            epoch=int(payload["epoch"]),
            step_in_epoch=int(payload["step_in_epoch"]),
            global_step=int(payload["global_step"]),
            accumulator=_Accumulator.from_dict(payload["accumulator"]),
            loss_log=[EpochStats.from_dict(d) for d in payload["loss_log"]])
    except KeyError as exc:
        raise CheckpointError(f"checkpoint {path} missing field {exc}") from exc


def write_loss_log(path, rows: list[EpochStats]) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(LOSS_LOG_COLUMNS)
        for row in rows:
            writer.writerow([
                row.epoch, repr(row.recon), repr(row.kl),
                "" if row.task is None else repr(row.task),
                "" if row.adapt is None else repr(row.adapt),
                repr(row.total)])


@dataclass
class GradCheckReport:
    """Max relative error between analytic and central-difference gradients."""

    block_errors: dict[str, float]
    step: float

    @property
    def max_error(self) -> float:
        return max(self.block_errors.values())


def gradcheck(model: TopoPriorModel, record: PreparedRecord,
              config: TrainConfig | None = None, *, step: float = 1e-5,
              eps: torch.Tensor | None = None,
              entries_per_block: int = 4, seed: int = 0) -> GradCheckReport:
    """Compare analytic gradients of total_loss to central differences.

    The reversal layer makes the backward field on encoder parameters
    deliberately disagree with the forward value (that is its job), so no
    finite-difference comparison of the raw objective can pass there.  The
    harness therefore runs with the reversal coefficient pinned to 1.0,
    where the objective is a true scalar function of every block; the
    coefficient's scaling effect is verified separately by paired backward
    runs.  Checks a seeded subsample of entries per parameter block in
    double precision with a small floor on the relative-error denominator.
    """
    if eps is None:
        eps = torch.randn(model.config.latent_dim,
                          generator=torch.Generator().manual_seed(seed),
                          dtype=torch.float64)
    if config is None:
        config = TrainConfig()

    saved_coefficient = model.discriminator.grl_coefficient
    model.discriminator.grl_coefficient = 1.0
    try:
        model.zero_grad()
        loss, _ = total_loss(record, model, eps, config)
        loss.backward()
        analytic = {name: (param.grad.detach().clone()
                           if param.grad is not None
                           else torch.zeros_like(param))
                    for name, param in model.named_parameters()}

        def loss_at() -> float:
            with torch.no_grad():
                value, _ = total_loss(record, model, eps, config)
            return float(value)

        rng = np.random.default_rng(seed)
        report: dict[str, float] = {}
        for name, param in model.named_parameters():
            flat = param.data.view(-1)
            grads = analytic[name].view(-1)
            k = min(entries_per_block, flat.numel())
            picks = rng.choice(flat.numel(), size=k, replace=False)
            worst = 0.0
            for idx in picks:
                idx = int(idx)
                original = float(flat[idx])
                flat[idx] = original + step
                upper = loss_at()
                flat[idx] = original - step
                lower = loss_at()
                flat[idx] = original
                numeric = (upper - lower) / (2.0 * step)
                a = float(grads[idx])
                rel = abs(a - numeric) / max(abs(a), abs(numeric), 1e-6)
                worst = max(worst, rel)
            report[name] = worst
    finally:
        model.discriminator.grl_coefficient = saved_coefficient
    return GradCheckReport(block_errors=report, step=step)
