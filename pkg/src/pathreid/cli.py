"""Command-line entry point.

Subcommands: synth, train-potential, train-lstm, finetune, propose, score,
eval, bench, grad-check. A JSON config file (--config) supplies defaults for
every stage; command-line flags override config fields, which override the
built-in defaults. Exit codes: 0 success, 2 config/usage error, 3 data error,
4 numeric divergence. Failures emit one machine-readable JSON object on
stderr.
"""

from __future__ import annotations

import argparse
import json
import sys
import time
from pathlib import Path

import numpy as np

from . import experiment
from .data import Dataset, build_catalog, load_dataset, write_dataset
from .errors import ConfigError, DataError, DivergenceError
from .evaluation import rank_queries
from .mrf import PathProposal, ProposalEngine
from .nnops import ParamStore, load_checkpoint, save_checkpoint
from .pathlstm import (
    PathLstm,
    ordered_by_time,
    sample_cross_camera_pairs,
    train_path_lstm,
)
from .potential import (
    MatrixPotentials,
    PairPotentialNet,
    compute_normalizers,
    sample_training_pairs,
    train_potential,
)
from .synth import SynthConfig, generate_dataset

GRAD_TOLERANCE = 1e-4


def _load_config(args) -> dict:
    raw = {}
    if getattr(args, "config", None):
        path = Path(args.config)
        try:
            raw = json.loads(path.read_text(encoding="utf-8"))
        except FileNotFoundError as exc:
            raise ConfigError(f"{path}: config file not found") from exc
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: invalid JSON: {exc.msg}") from exc
    cfg = experiment.resolve_config(raw)
    if getattr(args, "seed", None) is not None:
        cfg["seed"] = args.seed
        if raw.get("synth", {}).get("seed") is None:
            cfg["synth"]["seed"] = args.seed
    return cfg


def _apply_train_overrides(section: dict, args) -> dict:
    out = dict(section)
    for key in ("epochs", "lr", "batch"):
        value = getattr(args, key, None)
        if value is not None:
            out[key] = value
    return out


def _emit(obj: dict, out: str | None) -> None:
    text = json.dumps(obj, sort_keys=True)
    if out:
        Path(out).write_text(text + "\n", encoding="utf-8")
    else:
        print(text)


def _run_info(cfg: dict) -> dict:
    return {
        "config_hash": experiment.config_hash(cfg),
        "seed": cfg["seed"],
        "generated_at": time.strftime("%Y-%m-%dT%H:%M:%S"),
    }


def _load_potential(path: str) -> PairPotentialNet:
    store, _ = load_checkpoint(path)
    return PairPotentialNet.from_store(store)


def _load_lstm(path: str) -> PathLstm:
    store, _ = load_checkpoint(path)
    return PathLstm.from_store(store)


def _parse_pairs(args, dataset: Dataset) -> list[tuple]:
    specs: list[str] = list(args.pair or [])
    if args.pairs_file:
        for lineno, line in enumerate(Path(args.pairs_file).read_text().splitlines(), 1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
                specs.append(f"{obj['start']}:{obj['end']}")
            except (json.JSONDecodeError, KeyError) as exc:
                raise DataError(f"{args.pairs_file}:{lineno}: bad pair record: {exc}")
    if not specs:
        raise ConfigError("no query pairs given; use --pair START:END or --pairs-file")
    pairs = []
    for spec in specs:
        try:
            a_id, b_id = (int(x) for x in spec.split(":"))
        except ValueError:
            raise ConfigError(f"bad pair spec {spec!r}; expected START_ID:END_ID")
        for sid in (a_id, b_id):
            if sid not in dataset.states:
                raise DataError(f"unknown state id {sid} in pair {spec!r}")
        pairs.append((dataset.states[a_id], dataset.states[b_id]))
    return pairs


def _proposal_json(prop: PathProposal) -> dict:
    return {
        "start": prop.start_id,
        "end": prop.end_id,
        "feasible": prop.feasible,
        "cameras": list(prop.cameras) if prop.cameras else None,
        "state_ids": list(prop.state_ids) if prop.state_ids else None,
        "edge_potentials": list(prop.edge_potentials) if prop.edge_potentials else None,
        "mean_potential": prop.mean_potential,
    }


# ---------------------------------------------------------------------------
# subcommands


def cmd_synth(args) -> int:
    cfg = _load_config(args)
    dataset = generate_dataset(SynthConfig.from_dict(cfg["synth"]))
    write_dataset(dataset, args.out)
    summary = {
        "out": str(args.out),
        "cameras": len(dataset.cameras),
        "states": len(dataset.states),
        "train": len(dataset.splits["train"]),
        "test": len(dataset.splits["test"]),
        "queries": len(dataset.query_ids),
        "run": _run_info(cfg),
    }
    print(json.dumps(summary, sort_keys=True))
    return 0


def cmd_train_potential(args) -> int:
    cfg = _load_config(args)
    dataset = load_dataset(args.dataset)
    catalog = build_catalog(dataset)
    dt_max, dd_max = compute_normalizers(dataset, catalog)
    section = "potential" if args.pairs == "adjacent" else "siamese"
    tcfg = _apply_train_overrides(cfg[section], args)
    seed = cfg["seed"] + (101 if args.pairs == "adjacent" else 202)
    store = ParamStore()
    net = PairPotentialNet(
        store,
        dataset.feature_dim,
        embed_dim=tcfg["embed_dim"],
        st_hidden=tcfg["st_hidden"],
        rng=np.random.default_rng(seed),
    )
    net.set_normalizers(dt_max, dd_max)
    if args.pairs == "adjacent":
        samples = sample_training_pairs(
            dataset, catalog, tcfg["negatives_per_positive"], seed + 1
        )
    else:
        samples = sample_cross_camera_pairs(
            dataset, "train", tcfg["negatives_per_positive"], seed + 1
        )
    log = train_potential(
        net, dataset, samples,
        epochs=tcfg["epochs"], lr=tcfg["lr"], batch_size=tcfg["batch"], seed=seed + 2,
    )
    save_checkpoint(store, args.out, seed=cfg["seed"], config_hash=experiment.config_hash(cfg))
    print(json.dumps({
        "out": str(args.out),
        "pairs": args.pairs,
        "samples": len(samples),
        "initial_loss": log[0]["loss"],
        "final_loss": log[-1]["loss"],
        "run": _run_info(cfg),
    }, sort_keys=True))
    return 0


def cmd_train_lstm(args) -> int:
    cfg = _load_config(args)
    dataset = load_dataset(args.dataset)
    catalog = build_catalog(dataset)
    mrf_net = _load_potential(args.potential)
    tcfg = _apply_train_overrides(cfg["lstm"], args)
    seed = cfg["seed"] + 303
    pairs = sample_cross_camera_pairs(
        dataset, "train", tcfg["negatives_per_positive"], seed + 1
    )
    samples = experiment.build_proposal_samples(dataset, catalog, mrf_net, pairs)
    store = ParamStore()
    lstm = PathLstm(
        store,
        dataset.feature_dim,
        rng=np.random.default_rng(seed),
        dt_norm=mrf_net.dt_norm,
        dd_norm=mrf_net.dd_norm,
    )
    log = train_path_lstm(
        lstm, dataset, samples,
        epochs=tcfg["epochs"], lr=tcfg["lr"], batch_size=tcfg["batch"], seed=seed + 2,
    )
    save_checkpoint(store, args.out, seed=cfg["seed"], config_hash=experiment.config_hash(cfg))
    print(json.dumps({
        "out": str(args.out),
        "samples": len(samples),
        "feasible": sum(1 for s in samples if s.proposal.feasible),
        "initial_loss": log[0]["loss"],
        "final_loss": log[-1]["loss"],
        "run": _run_info(cfg),
    }, sort_keys=True))
    return 0


def cmd_finetune(args) -> int:
    from .pathlstm import finetune_joint

    cfg = _load_config(args)
    dataset = load_dataset(args.dataset)
    catalog = build_catalog(dataset)
    mrf_net = _load_potential(args.potential)
    siamese = _load_potential(args.siamese)
    lstm = _load_lstm(args.lstm)
    tcfg = _apply_train_overrides(cfg["finetune"], args)
    seed = cfg["seed"] + 404
    pairs = sample_cross_camera_pairs(
        dataset, "train", cfg["lstm"]["negatives_per_positive"], cfg["seed"] + 303 + 1
    )
    samples = experiment.build_proposal_samples(dataset, catalog, mrf_net, pairs)
    log = finetune_joint(
        siamese, lstm, dataset, samples,
        epochs=tcfg["epochs"], lr=tcfg["lr"], batch_size=tcfg["batch"], seed=seed,
    )
    chash = experiment.config_hash(cfg)
    save_checkpoint(siamese.store, args.out_siamese, seed=cfg["seed"], config_hash=chash)
    save_checkpoint(lstm.store, args.out_lstm, seed=cfg["seed"], config_hash=chash)
    print(json.dumps({
        "out_siamese": str(args.out_siamese),
        "out_lstm": str(args.out_lstm),
        "initial_loss": log[0]["loss"],
        "final_loss": log[-1]["loss"],
        "run": _run_info(cfg),
    }, sort_keys=True))
    return 0


def cmd_propose(args) -> int:
    cfg = _load_config(args)
    dataset = load_dataset(args.dataset)
    catalog = build_catalog(dataset)
    net = _load_potential(args.potential)
    pairs = _parse_pairs(args, dataset)
    provider = MatrixPotentials(net, dataset, args.split)
    engine = ProposalEngine(catalog, provider)
    lines = [json.dumps({"artifact": "proposals", "run": _run_info(cfg)}, sort_keys=True)]
    for p, q in pairs:
        lines.append(json.dumps(_proposal_json(engine.propose(p, q)), sort_keys=True))
    text = "\n".join(lines) + "\n"
    if args.out:
        Path(args.out).write_text(text, encoding="utf-8")
    else:
        sys.stdout.write(text)
    return 0


def cmd_score(args) -> int:
    from .pathlstm import path_score, siamese_pair_score

    cfg = _load_config(args)
    dataset = load_dataset(args.dataset)
    catalog = build_catalog(dataset)
    mrf_net = _load_potential(args.potential)
    siamese = _load_potential(args.siamese)
    lstm = _load_lstm(args.lstm)
    pairs = _parse_pairs(args, dataset)
    provider = MatrixPotentials(mrf_net, dataset, args.split)
    engine = ProposalEngine(catalog, provider)
    lines = [json.dumps({"artifact": "scores", "run": _run_info(cfg)}, sort_keys=True)]
    for a, b in pairs:
        p, q = ordered_by_time(a, b)
        prop = engine.propose(p, q)
        s_score = siamese_pair_score(siamese, a, b, dataset.cameras)
        p_score = path_score(lstm, prop, dataset) if prop.feasible else None
        final = s_score + (p_score or 0.0)
        lines.append(json.dumps({
            "start": a.state_id,
            "end": b.state_id,
            "siamese": s_score,
            "path_score": p_score,
            "final": final,
            "feasible": prop.feasible,
        }, sort_keys=True))
    text = "\n".join(lines) + "\n"
    if args.out:
        Path(args.out).write_text(text, encoding="utf-8")
    else:
        sys.stdout.write(text)
    return 0


def cmd_eval(args) -> int:
    cfg = _load_config(args)
    dataset = load_dataset(args.dataset)
    ecfg = cfg["eval"]
    scorers = []
    if args.scorer == "oracle":
        scorers.append(experiment.GroundTruthScorer())
    else:
        if not args.siamese:
            raise ConfigError("--siamese is required unless --scorer oracle")
        siamese = _load_potential(args.siamese)
        scorers.append(experiment.VisualScorer(siamese, dataset))
        scorers.append(experiment.SiameseScorer(siamese, dataset))
        if args.potential and args.lstm:
            catalog = build_catalog(dataset)
            mrf_net = _load_potential(args.potential)
            final_siamese = (
                _load_potential(args.final_siamese) if args.final_siamese else siamese
            )
            lstm = _load_lstm(args.final_lstm or args.lstm)
            provider = MatrixPotentials(mrf_net, dataset, "test")
            engine = ProposalEngine(catalog, provider)
            scorers.append(experiment.FullScorer(final_siamese, lstm, engine, dataset))
    reports = {
        s.name: rank_queries(
            s, dataset, cmc_max_k=ecfg["cmc_max_k"], parallelism=ecfg["parallelism"]
        )
        for s in scorers
    }
    payload = {
        "metrics": {name: r.metrics_dict() for name, r in sorted(reports.items())},
        "run": _run_info(cfg),
    }
    _emit(payload, args.out)
    if args.cmc_csv:
        names = sorted(reports)
        rows = ["k," + ",".join(names)]
        for i, (k, _) in enumerate(reports[names[0]].cmc):
            rows.append(
                f"{k}," + ",".join(repr(reports[n].cmc[i][1]) for n in names)
            )
        Path(args.cmc_csv).write_text("\n".join(rows) + "\n", encoding="utf-8")
    return 0


def cmd_bench(args) -> int:
    cfg = _load_config(args)
    dataset = load_dataset(args.dataset)
    catalog = build_catalog(dataset)
    net = _load_potential(args.potential)
    result = experiment.bench_amortization(
        dataset, catalog, net, n_pairs=args.pairs, seed=cfg["seed"] + 505
    )
    result["run"] = _run_info(cfg)
    _emit(result, args.out)
    return 0


def cmd_grad_check(args) -> int:
    cfg = _load_config(args)
    errors = experiment.gradient_suites(seed=cfg["seed"])
    worst = max(errors.values())
    payload = {"errors": errors, "max_error": worst, "tolerance": GRAD_TOLERANCE,
               "run": _run_info(cfg)}
    _emit(payload, args.out)
    if worst >= GRAD_TOLERANCE:
        raise DivergenceError(f"gradient check failed: max error {worst:.3e}")
    return 0


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="pathreid",
        description="Cross-camera vehicle re-identification with path proposals",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, dataset=True):
        p.add_argument("--config", help="JSON config file")
        p.add_argument("--seed", type=int, help="override the master seed")
        if dataset:
            p.add_argument("--dataset", required=True, help="dataset directory")

    def train_flags(p):
        p.add_argument("--epochs", type=int)
        p.add_argument("--lr", type=float)
        p.add_argument("--batch", type=int)

    p = sub.add_parser("synth", help="generate a synthetic dataset")
    common(p, dataset=False)
    p.add_argument("--out", required=True, help="output dataset directory")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train-potential", help="train a pair potential network")
    common(p)
    p.add_argument("--out", required=True, help="output checkpoint")
    p.add_argument(
        "--pairs", choices=("adjacent", "any"), default="adjacent",
        help="adjacent: MRF edge potential; any: siamese pair scorer",
    )
    train_flags(p)
    p.set_defaults(func=cmd_train_potential)

    p = sub.add_parser("train-lstm", help="pretrain the path scorer")
    common(p)
    p.add_argument("--potential", required=True, help="MRF potential checkpoint")
    p.add_argument("--out", required=True, help="output checkpoint")
    train_flags(p)
    p.set_defaults(func=cmd_train_lstm)

    p = sub.add_parser("finetune", help="joint finetune of siamese + path scorer")
    common(p)
    p.add_argument("--potential", required=True)
    p.add_argument("--siamese", required=True)
    p.add_argument("--lstm", required=True)
    p.add_argument("--out-siamese", required=True)
    p.add_argument("--out-lstm", required=True)
    train_flags(p)
    p.set_defaults(func=cmd_finetune)

    p = sub.add_parser("propose", help="emit path proposals for query pairs")
    common(p)
    p.add_argument("--potential", required=True)
    p.add_argument("--pair", action="append", help="START_ID:END_ID (repeatable)")
    p.add_argument("--pairs-file", help="JSONL of {start, end} records")
    p.add_argument("--split", choices=("train", "test"), default="test")
    p.add_argument("--out")
    p.set_defaults(func=cmd_propose)

    p = sub.add_parser("score", help="score query pairs (siamese + path)")
    common(p)
    p.add_argument("--potential", required=True)
    p.add_argument("--siamese", required=True)
    p.add_argument("--lstm", required=True)
    p.add_argument("--pair", action="append")
    p.add_argument("--pairs-file")
    p.add_argument("--split", choices=("train", "test"), default="test")
    p.add_argument("--out")
    p.set_defaults(func=cmd_score)

    p = sub.add_parser("eval", help="retrieval evaluation -> report.json")
    common(p)
    p.add_argument("--siamese", help="siamese checkpoint (visual + siamese scorers)")
    p.add_argument("--potential", help="MRF potential checkpoint (enables final scorer)")
    p.add_argument("--lstm", help="path scorer checkpoint (enables final scorer)")
    p.add_argument("--final-siamese", help="override siamese used by the final scorer")
    p.add_argument("--final-lstm", help="override lstm used by the final scorer")
    p.add_argument("--scorer", choices=("trained", "oracle"), default="trained")
    p.add_argument("--out", help="report.json path (stdout if omitted)")
    p.add_argument("--cmc-csv", help="also write the CMC curve as CSV")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("bench", help="batch vs naive potential-evaluation counters")
    common(p)
    p.add_argument("--potential", required=True)
    p.add_argument("--pairs", type=int, default=100)
    p.add_argument("--out")
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("grad-check", help="run all gradient suites")
    common(p, dataset=False)
    p.add_argument("--out")
    p.set_defaults(func=cmd_grad_check)

    return parser


def _fail(code: int, exc: Exception) -> int:
    payload = {"error": {"code": code, "type": type(exc).__name__, "message": str(exc)}}
    print(json.dumps(payload, sort_keys=True), file=sys.stderr)
    return code


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        return args.func(args)
    except ConfigError as exc:
        return _fail(2, exc)
    except (ValueError, KeyError) as exc:
        return _fail(2, exc)
    except DataError as exc:
        return _fail(3, exc)
    except DivergenceError as exc:
        return _fail(4, exc)


if __name__ == "__main__":
    sys.exit(main())
