"""Command-line entry point for reproducible runs.

Subcommands cover the pipeline end to end: corpus synthesis, teacher
construction, training, generation, the init-arm simulation comparison,
theory-check grids, and break-even accounting.  Every run resolves its
configuration in three layers (CLI flag over config file over built-in
default) and writes a manifest recording the value and source of each key,
so any output can be replayed exactly.

Exit codes: 0 success, 2 validation or configuration failure, 3 numerical
failure.
"""

from __future__ import annotations

import argparse
import hashlib
import itertools
import json
import logging
import statistics
import sys
from pathlib import Path

import numpy as np
import torch

from .embeddings import SyntheticEmbedder
from .errors import (CheckpointError, ConfigurationError, NumericalError,
                     ValidationError)
from .evosim import (ContractionConfig, UtilityParams, break_even,
                     contract_residuals, evolve, proxy_divergence,
                     rounds_delta, rounds_to_eps, total_token_bound)
from .graphs import (CollaborationGraph, DatasetRecord, default_role_pool,
                     read_records, write_records)
from .model import ModelConfig, TopoPriorModel
from .synthdata import (SupervisionMode, build_teacher_graph,
                        default_domain_specs, holdout_domain_spec,
                        make_queries, motif_edges, oracle_graph, spec_by_id)
from .training import TrainConfig, fit, infer_graph, load_checkpoint

logger = logging.getLogger(__name__)

ARMS = ("prior", "scratch", "template")
# Seed streams keeping per-record rngs independent across arms while two
# entries of the same arm name stay identical by construction.
ARM_STREAMS = {"prior": 2, "scratch": 3, "template": 4}

THEORY_GAPS = (0.25, 0.5, 1.0)
THEORY_ETAS = (0.1, 0.3, 0.5, 0.9)
THEORY_EPSILONS = (0.2, 0.05, 0.01)


def _load_config_file(path) -> dict:
    if path is None:
        return {}
    try:
        text = Path(path).read_text()
    except FileNotFoundError:
        raise ValidationError(f"config file not found: {path}")
    try:
        data = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ValidationError(f"config file {path} is not valid JSON: {exc}")
    if not isinstance(data, dict):
        raise ValidationError("config file must contain a JSON object")
    return data


def resolve_config(defaults: dict, file_values: dict,
                   cli_values: dict) -> tuple[dict, dict]:
    """Three-layer merge; returns (values, per-key source)."""
    unknown = set(file_values) - set(defaults)
    if unknown:
        raise ValidationError(f"unknown config keys: {sorted(unknown)}")
    resolved, provenance = {}, {}
    for key, default in defaults.items():
        if cli_values.get(key) is not None:
            resolved[key], provenance[key] = cli_values[key], "cli"
        elif key in file_values:
            resolved[key], provenance[key] = file_values[key], "file"
        else:
            resolved[key], provenance[key] = default, "default"
    return resolved, provenance


def write_manifest(out_dir: Path, command: str, resolved: dict,
                   provenance: dict) -> None:
    payload = {
        "command": command,
        "config": {key: {"value": resolved[key], "source": provenance[key]}
                   for key in sorted(resolved)},
    }
    (out_dir / "manifest.json").write_text(
        json.dumps(payload, indent=2, sort_keys=True) + "\n")


def _prepare(ns, defaults: dict) -> tuple[dict, Path]:
    cli_values = {key: getattr(ns, key, None) for key in defaults}
    resolved, provenance = resolve_config(
        defaults, _load_config_file(ns.config), cli_values)
    out_dir = Path(ns.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    write_manifest(out_dir, ns.command, resolved, provenance)
    return resolved, out_dir


def _require(resolved: dict, key: str, command: str):
    if resolved[key] is None:
        raise ValidationError(f"{command} requires --{key.replace('_', '-')}")
    return resolved[key]


def _all_specs():
    pool = default_role_pool()
    return pool, default_domain_specs(pool) + [holdout_domain_spec(pool)]


SYNTH_DEFAULTS = {"seed": 0, "per_domain": 100, "holdout": True}


def cmd_synth(ns) -> int:
    resolved, out = _prepare(ns, SYNTH_DEFAULTS)
    pool, specs = _all_specs()
    if not resolved["holdout"]:
        specs = specs[:-1]
    records = make_queries(specs, resolved["per_domain"], resolved["seed"])
    count = write_records(out / "corpus.jsonl", records)
    logger.info("wrote %d records to %s", count, out / "corpus.jsonl")
    return 0


TEACH_DEFAULTS = {"seed": 0, "corpus": None, "mode": "full"}


def cmd_teach(ns) -> int:
    resolved, out = _prepare(ns, TEACH_DEFAULTS)
    corpus_path = _require(resolved, "corpus", "teach")
    mode = SupervisionMode.parse(resolved["mode"])
    _, specs = _all_specs()
    taught = []
    for rec in read_records(corpus_path):
        spec = spec_by_id(specs, rec.domain_id)
        graph, teacher_utility = build_teacher_graph(rec.query, spec, mode)
        taught.append(DatasetRecord(
            query=rec.query, domain_id=rec.domain_id, graph=graph,
            teacher_utility=teacher_utility))
    count = write_records(out / "teacher.jsonl", taught)
    logger.info("wrote %d taught records to %s", count, out / "teacher.jsonl")
    return 0


TRAIN_DEFAULTS = {
    "seed": 0, "corpus": None, "alpha": 0.5, "beta": 0.5, "delta_e": 0.5,
    "learning_rate": 2e-4, "batch_size": 32, "epochs": 5,
    "grl_coefficient": -0.1, "latent_dim": 128, "hidden_dim": 256,
    "embed_dim": 64, "embed_seed": 0, "num_domains": 7,
}


def cmd_train(ns) -> int:
    resolved, out = _prepare(ns, TRAIN_DEFAULTS)
    corpus_path = _require(resolved, "corpus", "train")
    records = read_records(corpus_path)
    provider = SyntheticEmbedder(dimension=resolved["embed_dim"],
                                 seed=resolved["embed_seed"])
    pool = default_role_pool()
    model_config = ModelConfig(
        embed_dim=resolved["embed_dim"], hidden_dim=resolved["hidden_dim"],
        latent_dim=resolved["latent_dim"], num_roles=len(pool),
        num_domains=resolved["num_domains"],
        grl_coefficient=resolved["grl_coefficient"])
    train_config = TrainConfig(
        learning_rate=resolved["learning_rate"],
        batch_size=resolved["batch_size"], epochs=resolved["epochs"],
        alpha=resolved["alpha"], beta=resolved["beta"],
        delta_e=resolved["delta_e"],
        grl_coefficient=resolved["grl_coefficient"], seed=resolved["seed"],
        latent_dim=resolved["latent_dim"], hidden_dim=resolved["hidden_dim"])
    model = TopoPriorModel.build(model_config, pool, provider,
                                 init_seed=resolved["seed"])
    result = fit(records, train_config, model, provider=provider,
                 checkpoint_path=out / "checkpoint.pt",
                 log_path=out / "training_log.csv")
    final = result.loss_log[-1] if result.loss_log else None
    logger.info("trained %d epochs, %d parameters, final total %s",
                len(result.loss_log), model.count_parameters(),
                "n/a" if final is None else f"{final.total:.4f}")
    return 0


GENERATE_DEFAULTS = {
    "seed": 0, "corpus": None, "checkpoint": None, "delta_e": 0.5,
    "mode": "greedy", "embed_seed": 0,
}


def cmd_generate(ns) -> int:
    resolved, out = _prepare(ns, GENERATE_DEFAULTS)
    corpus_path = _require(resolved, "corpus", "generate")
    checkpoint_path = _require(resolved, "checkpoint", "generate")
    state = load_checkpoint(checkpoint_path)
    model = state.model
    provider = SyntheticEmbedder(dimension=model.config.embed_dim,
                                 seed=resolved["embed_seed"])
    generator = None
    if resolved["mode"] == "sampled":
        generator = torch.Generator().manual_seed(int(resolved["seed"]))
    generated = []
    for rec in read_records(corpus_path):
        graph = infer_graph(rec.query, model, provider,
                            delta_e=resolved["delta_e"],
                            mode=resolved["mode"], generator=generator)
        generated.append(DatasetRecord(
            query=rec.query, domain_id=rec.domain_id, graph=graph,
            teacher_utility=None))
    count = write_records(out / "generated.jsonl", generated)
    logger.info("wrote %d generated graphs to %s", count,
                out / "generated.jsonl")
    return 0


SIMULATE_DEFAULTS = {
    "seed": 0, "corpus": None, "checkpoint": None, "delta_e": 0.5,
    "arms": "prior,scratch,template", "mode": "local-search",
    "eta": 0.5, "epsilon": 0.02, "max_rounds": 64, "neighbor_samples": 16,
    "neighbor_mode": "sampled", "embed_seed": 0, "scratch_density": 0.6,
}


def _record_rng(query: str, seed: int, stream: int) -> np.random.Generator:
    digest = hashlib.sha256(query.encode("utf-8")).digest()
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(
        int.from_bytes(digest[:8], "big"), spawn_key=(seed, stream))))


def _scratch_init(spec, rng, density: float) -> CollaborationGraph:
    # A dense random start over the whole domain subset: plenty of wrong
    # structure for the search to prune, never an unreachable dead end.
    roles = tuple(sorted(spec.role_subset))
    n = len(roles)
    edges = tuple((s, t) for s in range(n) for t in range(s + 1, n)
                  if rng.random() < density)
    return CollaborationGraph(roles, edges)


def _template_init(spec) -> CollaborationGraph:
    roles = tuple(sorted(spec.role_subset))
    return CollaborationGraph(
        roles, motif_edges(spec.motif, len(roles), seed=spec.domain_id))


def cmd_simulate(ns) -> int:
    resolved, out = _prepare(ns, SIMULATE_DEFAULTS)
    corpus_path = _require(resolved, "corpus", "simulate")
    arms = [a.strip() for a in resolved["arms"].split(",") if a.strip()]
    if not arms:
        raise ValidationError("simulate needs at least one arm")
    for arm in arms:
        if arm not in ARMS:
            raise ValidationError(f"unknown arm {arm!r}, expected one of"
                                  f" {ARMS}")
    model = provider = None
    if "prior" in arms:
        checkpoint_path = _require(resolved, "checkpoint", "simulate")
        model = load_checkpoint(checkpoint_path).model
        provider = SyntheticEmbedder(dimension=model.config.embed_dim,
                                     seed=resolved["embed_seed"])
    pool, specs = _all_specs()
    params = UtilityParams.for_pool(len(pool))
    config = ContractionConfig(
        eta=resolved["eta"], mode=resolved["mode"],
        neighbor_samples=resolved["neighbor_samples"],
        max_rounds=resolved["max_rounds"], epsilon=resolved["epsilon"],
        neighbor_mode=resolved["neighbor_mode"])
    records = read_records(corpus_path)

    per_arm = {i: {"rounds": [], "tokens": [], "terminal": []}
               for i in range(len(arms))}
    with open(out / "trajectories.jsonl", "w") as log:
        for q_index, rec in enumerate(records):
            spec = spec_by_id(specs, rec.domain_id)
            oracle = oracle_graph(rec.query, spec)
            for a_index, arm in enumerate(arms):
                rng = _record_rng(rec.query, resolved["seed"],
                                  ARM_STREAMS[arm])
                if arm == "prior":
                    init = infer_graph(rec.query, model, provider,
                                       delta_e=resolved["delta_e"])
                elif arm == "scratch":
                    init = _scratch_init(spec, rng,
                                         resolved["scratch_density"])
                else:
                    init = _template_init(spec)
                traj = evolve(init, oracle, spec.role_subset, config,
                              params, rng, init_source=arm)
                for r_index, round_ in enumerate(traj.rounds):
                    log.write(json.dumps({
                        "query_index": q_index, "domain_id": rec.domain_id,
                        "arm": arm, "round": r_index,
                        "utility": round_.utility,
                        "token_cost": round_.token_cost,
                        "edit": round_.edit}) + "\n")
                per_arm[a_index]["rounds"].append(traj.num_rounds)
                per_arm[a_index]["tokens"].append(traj.total_tokens)
                per_arm[a_index]["terminal"].append(traj.terminal_utility)

    summary = {"arms": []}
    for a_index, arm in enumerate(arms):
        stats = per_arm[a_index]
        summary["arms"].append({
            "arm": arm,
            "queries": len(stats["rounds"]),
            "median_rounds": statistics.median(stats["rounds"]),
            "total_tokens": sum(stats["tokens"]),
            "mean_terminal_utility": statistics.fmean(stats["terminal"]),
        })
    by_name = {entry["arm"]: entry for entry in summary["arms"]}
    if "prior" in by_name and "scratch" in by_name:
        scratch_tokens = by_name["scratch"]["total_tokens"]
        if scratch_tokens > 0:
            summary["token_savings_vs_scratch_pct"] = 100.0 * (
                1.0 - by_name["prior"]["total_tokens"] / scratch_tokens)
    (out / "summary.json").write_text(json.dumps(summary, indent=2) + "\n")
    logger.info("simulated %d queries x %d arms", len(records), len(arms))
    return 0


THEORY_DEFAULTS = {"seed": 0, "trials": 100, "size_cap": 40,
                   "max_rounds": 64}


def _theory_idealized() -> list[dict]:
    cases = []
    for gap, eta, eps in itertools.product(THEORY_GAPS, THEORY_ETAS,
                                           THEORY_EPSILONS):
        predicted = rounds_to_eps(1.0 - gap, 1.0, eta, eps)
        measured = len(contract_residuals(gap, eta, eps, max_rounds=10_000))
        cases.append({"gap": gap, "eta": eta, "eps": eps,
                      "predicted": predicted, "measured": measured,
                      "ok": measured <= predicted})
    return cases


def _theory_rounds_delta() -> list[dict]:
    cases = []
    starts = (0.0, 0.25, 0.5, 0.75)
    for u0_scratch, u0_prior in itertools.combinations(starts, 2):
        for eta in (0.3, 0.5):
            delta = rounds_delta(u0_prior, u0_scratch, 1.0, eta, 0.02)
            cases.append({"u0_prior": u0_prior, "u0_scratch": u0_scratch,
                          "eta": eta, "rounds_delta": delta,
                          "ok": delta <= 0})
    return cases


def _theory_token_bound(seed: int, trials: int, size_cap: int,
                        max_rounds: int) -> list[dict]:
    pool, specs = _all_specs()
    params = UtilityParams.for_pool(len(pool))
    config = ContractionConfig(max_rounds=max_rounds, size_cap=size_cap,
                               neighbor_mode="sampled")
    rng = np.random.default_rng(seed)
    cases = []
    for trial in range(trials):
        spec = specs[int(rng.integers(0, len(specs)))]
        roles = tuple(sorted(int(r) for r in rng.choice(
            spec.role_subset, size=int(rng.integers(1, 5)), replace=False)))
        n = len(roles)
        edges = tuple((s, t) for s in range(n) for t in range(s + 1, n)
                      if rng.random() < 0.3)
        init = CollaborationGraph(roles, edges)
        oracle = oracle_graph(f"dom:{spec.domain_id} "
                              + " ".join(f"r:{r}" for r in roles), spec)
        traj = evolve(init, oracle, spec.role_subset, config, params, rng)
        bound = total_token_bound(traj.num_rounds, size_cap,
                                  params.node_rate, params.edge_rate,
                                  params.base_cost)
        cases.append({"trial": trial, "rounds": traj.num_rounds,
                      "measured_tokens": traj.total_tokens,
                      "bound": bound, "slack": bound - traj.total_tokens,
                      "ok": traj.total_tokens <= bound})
    return cases


def _theory_proxy(seed: int) -> list[dict]:
    rng = np.random.default_rng(seed)
    same_a = rng.standard_normal((200, 8))
    same_b = rng.standard_normal((200, 8))
    apart_a = rng.standard_normal((200, 8)) - 4.0
    apart_b = rng.standard_normal((200, 8)) + 4.0
    identical = proxy_divergence(same_a, same_b)
    separable = proxy_divergence(apart_a, apart_b)
    return [
        {"case": "identical-distributions", "value": identical,
         "ok": identical < 0.15},
        {"case": "separable-clusters", "value": separable,
         "ok": separable > 1.9},
    ]


def cmd_theory(ns) -> int:
    resolved, out = _prepare(ns, THEORY_DEFAULTS)
    report = {
        "idealized_rounds": _theory_idealized(),
        "rounds_delta": _theory_rounds_delta(),
        "token_bound": _theory_token_bound(
            resolved["seed"], resolved["trials"], resolved["size_cap"],
            resolved["max_rounds"]),
        "proxy_divergence": _theory_proxy(resolved["seed"]),
    }
    report["all_ok"] = all(case["ok"] for section in report.values()
                           for case in section)
    (out / "theory_report.json").write_text(
        json.dumps(report, indent=2) + "\n")
    logger.info("theory checks %s", "passed" if report["all_ok"]
                else "FAILED")
    return 0


BREAKEVEN_DEFAULTS = {
    "seed": 0, "train_tokens": 120_000_000.0, "baseline": 800.0,
    "with_prior": 478.0, "claimed": 373_670,
}


def cmd_breakeven(ns) -> int:
    resolved, out = _prepare(ns, BREAKEVEN_DEFAULTS)
    report = break_even(resolved["train_tokens"], resolved["baseline"],
                        resolved["with_prior"],
                        claimed_queries=resolved["claimed"])
    payload = report.to_dict()
    (out / "breakeven.json").write_text(json.dumps(payload, indent=2) + "\n")
    logger.info("break-even after %d queries", report.queries)
    if "note" in payload:
        logger.info("%s", payload["note"])
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="topoprior",
        description="Query-conditioned collaboration-graph prior: data,"
                    " training, generation, and simulation.")
    sub = parser.add_subparsers(dest="command", required=True)

    def add_common(p):
        p.add_argument("--seed", type=int, default=None)
        p.add_argument("--config", default=None,
                       help="JSON file with config keys")
        p.add_argument("--out", required=True,
                       help="output directory (created if missing)")

    p_synth = sub.add_parser("synth", help="generate queries with oracles")
    add_common(p_synth)
    p_synth.add_argument("--per-domain", dest="per_domain", type=int,
                         default=None)
    p_synth.add_argument("--no-holdout", dest="holdout",
                         action="store_const", const=False, default=None)
    p_synth.set_defaults(func=cmd_synth)

    p_teach = sub.add_parser("teach", help="annotate a corpus with teachers")
    add_common(p_teach)
    p_teach.add_argument("--corpus", default=None)
    p_teach.add_argument("--mode", default=None,
                         help="full | cheap-early:<f> | static-template"
                              " | random")
    p_teach.set_defaults(func=cmd_teach)

    p_train = sub.add_parser("train", help="fit the generator")
    add_common(p_train)
    p_train.add_argument("--corpus", default=None)
    p_train.add_argument("--alpha", type=float, default=None)
    p_train.add_argument("--beta", type=float, default=None)
    p_train.add_argument("--delta-e", dest="delta_e", type=float,
                         default=None)
    p_train.add_argument("--learning-rate", dest="learning_rate", type=float,
                         default=None)
    p_train.add_argument("--batch-size", dest="batch_size", type=int,
                         default=None)
    p_train.add_argument("--epochs", type=int, default=None)
    p_train.add_argument("--latent-dim", dest="latent_dim", type=int,
                         default=None)
    p_train.add_argument("--hidden-dim", dest="hidden_dim", type=int,
                         default=None)
    p_train.add_argument("--embed-dim", dest="embed_dim", type=int,
                         default=None)
    p_train.add_argument("--embed-seed", dest="embed_seed", type=int,
                         default=None)
    p_train.set_defaults(func=cmd_train)

    p_gen = sub.add_parser("generate", help="decode graphs for queries")
    add_common(p_gen)
    p_gen.add_argument("--corpus", default=None,
                       help="JSONL records supplying the queries")
    p_gen.add_argument("--checkpoint", default=None)
    p_gen.add_argument("--delta-e", dest="delta_e", type=float, default=None)
    p_gen.add_argument("--mode", choices=("greedy", "sampled"), default=None)
    p_gen.add_argument("--embed-seed", dest="embed_seed", type=int,
                       default=None)
    p_gen.set_defaults(func=cmd_generate)

    p_sim = sub.add_parser("simulate",
                           help="evolve arms from different inits")
    add_common(p_sim)
    p_sim.add_argument("--corpus", default=None)
    p_sim.add_argument("--checkpoint", default=None)
    p_sim.add_argument("--arms", default=None,
                       help="comma list from prior, scratch, template")
    p_sim.add_argument("--delta-e", dest="delta_e", type=float, default=None)
    p_sim.add_argument("--mode", choices=("local-search", "idealized"),
                       default=None)
    p_sim.add_argument("--eta", type=float, default=None)
    p_sim.add_argument("--epsilon", type=float, default=None)
    p_sim.add_argument("--max-rounds", dest="max_rounds", type=int,
                       default=None)
    p_sim.add_argument("--neighbor-samples", dest="neighbor_samples",
                       type=int, default=None)
    p_sim.add_argument("--neighbor-mode", dest="neighbor_mode",
                       choices=("sampled", "exhaustive"), default=None)
    p_sim.add_argument("--embed-seed", dest="embed_seed", type=int,
                       default=None)
    p_sim.set_defaults(func=cmd_simulate)

    p_theory = sub.add_parser("theory", help="run the verification grids")
    add_common(p_theory)
    p_theory.add_argument("--trials", type=int, default=None)
    p_theory.add_argument("--size-cap", dest="size_cap", type=int,
                          default=None)
    p_theory.add_argument("--max-rounds", dest="max_rounds", type=int,
                          default=None)
    p_theory.set_defaults(func=cmd_theory)

    p_be = sub.add_parser("breakeven", help="training-cost amortization")
    add_common(p_be)
    p_be.add_argument("--train-tokens", dest="train_tokens", type=float,
                      default=None)
    p_be.add_argument("--baseline", type=float, default=None)
    p_be.add_argument("--with-prior", dest="with_prior", type=float,
                      default=None)
    p_be.add_argument("--claimed", type=int, default=None)
    p_be.set_defaults(func=cmd_breakeven)
    return parser


def main(argv=None) -> int:
    logging.basicConfig(level=logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s")
    ns = build_parser().parse_args(argv)
    try:
        return ns.func(ns)
    except (ValidationError, ConfigurationError, CheckpointError,
            FileNotFoundError) as exc:
        logger.error("%s", exc)
        return 2
    except NumericalError as exc:
        logger.error("numerical failure: %s", exc)
        return 3


if __name__ == "__main__":
    sys.exit(main())
