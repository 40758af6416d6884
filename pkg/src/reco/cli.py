"""Command-line entry point: ``reco <command> [flags]``.

Exit codes: 0 ok, 2 usage or validation error, 3 training divergence,
4 verification failure.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys

from . import __version__
from .data import (SynthSpec, chain_bucket, gen_synthetic, length_counts, read_jsonl, split_chains,
                   write_jsonl, INSTANCE_KIND, RecordError)
from .encoder import EmbeddingError, RawChain
from .model import ReCoModel, TrainConfig
from .predictor import diagnose
from .trainer import (CheckpointError, TrainingDiverged, evaluate, gradient_check, load_checkpoint,
                      save_checkpoint, train)

EXIT_OK, EXIT_USAGE, EXIT_DIVERGED, EXIT_VERIFY = 0, 2, 3, 4

log = logging.getLogger("reco")

VARIANTS = {
    "no-eacvae": {"no_eacvae": True},
    "no-logic": {"no_logic_supervision": True},
    "problem-ce": {"problem_ce_instead_of_logic": True},
}


class UsageError(Exception):
    """Bad input detected after argument parsing (exit 2)."""


def _dump(obj, path=None):
    text = json.dumps(obj, indent=2, sort_keys=True) + "\n"
    if path:
        with open(path, "w", encoding="utf-8", newline="\n") as fh:
            fh.write(text)
    else:
        sys.stdout.write(text)


def _need_file(path):
    if not os.path.isfile(path):
        raise UsageError(f"no such file: {path}")
    return path


# --------------------------------------------------------------------------
# gen-synth / split
# --------------------------------------------------------------------------

def cmd_gen_synth(args):
    spec = SynthSpec(n_chains=args.chains, n_scenes=args.scenes, n_concepts=args.concepts,
                     p_scene_break=args.p_scene, p_threshold_break=args.p_threshold,
                     context_noise=args.context_noise, transition_tags=not args.no_transition_tags)
    try:
        spec.validate()
    except ValueError as exc:
        raise UsageError(str(exc)) from exc
    chains = gen_synthetic(spec, seed=args.seed)
    if not chains:
        log.warning("--chains 0: writing an empty file")
    write_jsonl(args.out, chains)
    counts = {"chains": len(chains), "none": 0, "scene": 0, "threshold": 0}
    for ch in chains:
        counts[ch.problem] += 1
    _dump({"out": args.out, "seed": args.seed, "counts": counts})
    return EXIT_OK


def _split_stats(instances, n_chains):
    lc = length_counts(instances)
    return {
        "chains": n_chains,
        "instance_3": lc.get(3, 0), "instance_4": lc.get(4, 0), "instance_5": lc.get(5, 0),
        "positive": sum(i.label.reliable for i in instances),
        "negative": sum(not i.label.reliable for i in instances),
        "total": len(instances),
    }


def cmd_split(args):
    ratios = (args.train, args.dev, args.test)
    if any(r < 0 for r in ratios) or abs(sum(ratios) - 1.0) > 1e-9:
        raise UsageError(f"--train/--dev/--test must be non-negative and sum to 1, got {ratios}")
    chains = read_jsonl(_need_file(args.input))
    parts = {"train": [], "dev": [], "test": []}
    for ch in chains:
        b = chain_bucket(ch.id, args.seed)
        key = "train" if b < args.train else "dev" if b < args.train + args.dev else "test"
        parts[key].append(ch)
    os.makedirs(args.out_dir, exist_ok=True)
    stats = {"seed": args.seed, "ratios": dict(zip(("train", "dev", "test"), ratios)),
             "splits": {}, "rejected": []}
    for key, group in parts.items():
        instances, rejected = split_chains(group)
        write_jsonl(os.path.join(args.out_dir, f"{key}.jsonl"), instances)
        stats["splits"][key] = _split_stats(instances, len(group) - len(rejected))
        stats["rejected"].extend(rejected)
    stats["rejected"].sort()
    _dump(stats, os.path.join(args.out_dir, "stats.json"))
    _dump(stats)
    return EXIT_OK


# --------------------------------------------------------------------------
# train / ablate / eval / predict
# --------------------------------------------------------------------------

# flag name -> TrainConfig field
_OVERRIDES = {
    "m": "m", "lr": "lr", "batch_size": "batch_size", "epochs": "epochs",
    "lambda1": "lambda1", "lambda2": "lambda2", "seed": "seed", "provider": "provider",
    "kl_direction": "kl_direction", "eval_epsilon_mode": "eval_epsilon_mode",
    "u_in_last_mode": "u_in_last_mode",
}


def _config(args, extra=None) -> TrainConfig:
    base = {}
    if args.config:
        with open(_need_file(args.config), encoding="utf-8") as fh:
            base = json.load(fh)
        if not isinstance(base, dict):
            raise UsageError(f"{args.config}: config must be a JSON object")
    for flag, fld in _OVERRIDES.items():
        v = getattr(args, flag, None)
        if v is not None:
            base[fld] = v
    if args.provider_params:
        base["provider_params"] = json.loads(args.provider_params)
    for flag in ("no_eacvae", "no_logic_supervision", "problem_ce_instead_of_logic"):
        if getattr(args, flag, False):
            base[flag] = True
    base.update(extra or {})
    try:
        return TrainConfig.from_dict(base)
    except (TypeError, ValueError) as exc:
        raise UsageError(f"invalid config: {exc}") from exc


def _fit(cfg, args):
    train_set = read_jsonl(_need_file(args.train), INSTANCE_KIND)
    dev_set = read_jsonl(_need_file(args.dev), INSTANCE_KIND) if args.dev else None
    cp = train(cfg, train_set, dev_set)
    save_checkpoint(args.out, cp)
    return cp


def cmd_train(args):
    cfg = _config(args)
    cp = _fit(cfg, args)
    _dump({"config": cfg.to_dict(), "out": args.out, "best_epoch": cp.best_epoch, "history": cp.history})
    return EXIT_OK


def cmd_ablate(args):
    cfg = _config(args, VARIANTS[args.variant])
    cp = _fit(cfg, args)
    out = {"variant": args.variant, "config": cfg.to_dict(), "out": args.out, "best_epoch": cp.best_epoch}
    if args.test:
        out["report"] = evaluate(cp, read_jsonl(_need_file(args.test), INSTANCE_KIND), jobs=args.jobs).to_json()
    _dump(out, args.report)
    if args.report:
        _dump(out)
    return EXIT_OK


def cmd_eval(args):
    cp = load_checkpoint(_need_file(args.model))
    data = read_jsonl(_need_file(args.data), INSTANCE_KIND)
    if not data:
        raise UsageError(f"{args.data}: no instances")
    report = {"config": cp.config.to_dict(), "data": args.data,
              "metrics": evaluate(cp, data, jobs=args.jobs).to_json()}
    _dump(report, args.report)
    if args.report:
        _dump(report)
    return EXIT_OK


def _load_instance(spec: str) -> RawChain:
    text = spec
    if os.path.isfile(spec):
        with open(spec, encoding="utf-8") as fh:
            text = fh.read()
    try:
        rec = json.loads(text)
        return RawChain(str(rec.get("id", "query")), list(rec["events"]), list(rec["contexts"]))
    except (json.JSONDecodeError, KeyError, TypeError, AttributeError, ValueError) as exc:
        raise UsageError(f"--instance: expected a JSON object with events and contexts ({exc})") from exc


def cmd_predict(args):
    cp = load_checkpoint(_need_file(args.model))
    query = _load_instance(args.instance)
    po, _, _ = cp.model().forward(query)
    _dump(diagnose(po).to_json())
    return EXIT_OK


def cmd_gradcheck(args):
    res = gradient_check(m=args.m, seed=args.seed, d=args.dim)
    _dump(res.to_json())
    return EXIT_OK if res.ok else EXIT_VERIFY


# --------------------------------------------------------------------------
# Parser
# --------------------------------------------------------------------------

def _train_flags(p, with_out=True):
    p.add_argument("--config", help="JSON file with TrainConfig fields (flags override it)")
    p.add_argument("--train", required=True, help="training instances (JSONL)")
    p.add_argument("--dev", help="dev instances (JSONL) for best-epoch selection")
    p.add_argument("--out", required=True, help="checkpoint path to write")
    p.add_argument("--m", type=int, help="latent width")
    p.add_argument("--lr", type=float, help="Adam learning rate")
    p.add_argument("--batch-size", type=int, help="instances per batch")
    p.add_argument("--epochs", type=int, help="training epochs")
    p.add_argument("--lambda1", type=float, help="weight of the logic term")
    p.add_argument("--lambda2", type=float, help="weight of the KL term")
    p.add_argument("--seed", type=int, help="seed for init, shuffling and sampling")
    p.add_argument("--provider", choices=("hashing", "file", "http"), help="embedding provider")
    p.add_argument("--provider-params", help='provider parameters as JSON, e.g. \'{"dim": 256}\'')
    p.add_argument("--kl-direction", choices=("prior_posterior", "posterior_prior"), help="KL direction")
    p.add_argument("--eval-epsilon-mode", choices=("zero", "sample"), help="noise used at prediction time")
    p.add_argument("--u-in-last-mode", choices=("aggregated", "raw"), help="exogenous input of the reliability head")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="reco", description="Causal-chain reliability models.")
    parser.add_argument("--version", action="version", version=f"reco {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-synth", help="generate labeled synthetic chains")
    p.add_argument("--out", required=True, help="chain JSONL to write")
    p.add_argument("--chains", type=int, default=100, help="number of chains")
    p.add_argument("--scenes", type=int, default=4, help="number of scene ids")
    p.add_argument("--concepts", type=int, default=40, help="number of concept ids")
    p.add_argument("--p-scene", type=float, default=0.25, help="probability of a scene-drift break")
    p.add_argument("--p-threshold", type=float, default=0.25, help="probability of a threshold break")
    p.add_argument("--context-noise", type=float, default=0.0, help="probability of a randomized context")
    p.add_argument("--no-transition-tags", action="store_true", help="omit the joint transition tokens")
    p.add_argument("--seed", type=int, default=0, help="generator seed")
    p.set_defaults(func=cmd_gen_synth)

    p = sub.add_parser("split", help="split chains into instances and train/dev/test files")
    p.add_argument("--in", dest="input", required=True, help="chain JSONL")
    p.add_argument("--out-dir", required=True, help="directory for train/dev/test JSONL and stats.json")
    p.add_argument("--train", type=float, default=0.8, help="train fraction")
    p.add_argument("--dev", type=float, default=0.1, help="dev fraction")
    p.add_argument("--test", type=float, default=0.1, help="test fraction")
    p.add_argument("--seed", type=int, default=0, help="salt of the chain-id hash partition")
    p.set_defaults(func=cmd_split)

    p = sub.add_parser("train", help="train a model and write a checkpoint")
    _train_flags(p)
    for flag, dest in (("--no-eacvae", "no_eacvae"), ("--no-logic", "no_logic_supervision"),
                       ("--problem-ce", "problem_ce_instead_of_logic")):
        p.add_argument(flag, dest=dest, action="store_true", help=f"ablation: set {dest}")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("ablate", help="train one ablation variant and optionally evaluate it")
    p.add_argument("--variant", required=True, choices=sorted(VARIANTS), help="ablation to apply")
    _train_flags(p)
    p.add_argument("--test", help="instances to evaluate the variant on")
    p.add_argument("--report", help="write the JSON result here as well as stdout")
    p.add_argument("--jobs", type=int, default=1, help="evaluation worker threads")
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("eval", help="evaluate a checkpoint on instances")
    p.add_argument("--model", required=True, help="checkpoint path")
    p.add_argument("--data", required=True, help="instance JSONL")
    p.add_argument("--report", help="write the JSON report here as well as stdout")
    p.add_argument("--jobs", type=int, default=1, help="evaluation worker threads")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("predict", help="diagnose one chain")
    p.add_argument("--model", required=True, help="checkpoint path")
    p.add_argument("--instance", required=True, help="JSON object (or file) with events and contexts")
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("gradcheck", help="compare backward with finite differences on a random model")
    p.add_argument("--m", type=int, default=8, help="latent width")
    p.add_argument("--dim", type=int, default=16, help="hashing embedding width")
    p.add_argument("--seed", type=int, default=0, help="seed")
    p.set_defaults(func=cmd_gradcheck)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        return args.func(args)
    except TrainingDiverged as exc:
        print(f"reco: training diverged: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    except (UsageError, RecordError, CheckpointError, EmbeddingError, ValueError, OSError) as exc:
        print(f"reco {args.command}: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
