"""Command line entry point.

    fedasd run CONFIG
    fedasd compare {aggregators,samplers,settings,fhe} CONFIG
    fedasd generate OUT.csv [--n-normal ...]
    fedasd evaluate SCORES.csv [--features DATA.csv]

``CONFIG`` may be ``-`` for the built-in synthetic defaults. Failures print
one JSON object ``{"error": <category>, "message": ...}`` on stderr and exit
with the category's code (config 2, data 3, shape/numeric 4, crypto 5,
integrity 6, anything else 1).
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from . import engine, experiments
from .config import ExperimentConfig, parse_config, parse_text
from .datasets import generate_synthetic, write_dataset_csv
from .errors import ConfigError, FedAsdError

logger = logging.getLogger("fedasd")


def _csv_list(kind):
    def parse(text: str):
        try:
            return tuple(kind(x.strip()) for x in text.split(",") if x.strip())
        except ValueError:
            raise argparse.ArgumentTypeError(f"cannot parse {text!r}") from None

    return parse


def _load_config(args) -> ExperimentConfig:
    if args.config == "-":
        cfg = parse_text("data.schema = synthetic\n")
    else:
        cfg = parse_config(args.config)
    overrides = {}
    for item in args.set or ():
        if "=" not in item:
            raise ConfigError(f"--set expects key=value, got {item!r}")
        key, value = item.split("=", 1)
        overrides[key.strip()] = value.strip()
    if args.seeds:
        overrides["run.seeds"] = args.seeds
    if overrides:
        cfg = cfg.replace(**overrides)
    return cfg.resolved()


def _print(obj) -> None:
    print(json.dumps(obj, indent=2, default=str))


def cmd_run(args) -> int:
    cfg = _load_config(args)
    payload = experiments.run_experiment(cfg, args.output)
    _print({"output": str(experiments.output_dir(cfg, args.output)),
            "fingerprint": payload["fingerprint"], "metrics": payload["metrics"]})
    return 0


def cmd_compare(args) -> int:
    cfg = _load_config(args)
    cells = experiments.sweep_cells(args.sweep, cfg, args.fractions, args.values)
    if not cells:
        raise ConfigError("the comparison grid is empty")
    summaries = experiments.compare(cfg, cells, args.output)
    _print([{"cell": s["cell"].label, "metrics": s["metrics"]} for s in summaries])
    return 0


def cmd_generate(args) -> int:
    rng = engine.derive_rng(args.seed, "data")
    ds = generate_synthetic(
        args.n_normal, args.n_anomaly, args.n_unknown, args.features, args.separation,
        args.clients, rng, label_skew=args.label_skew, quantity_skew=args.quantity_skew,
        client_shift=args.client_shift,
    )
    Path(args.out).parent.mkdir(parents=True, exist_ok=True)
    write_dataset_csv(ds, args.out)
    _print({"output": args.out, "cases": len(ds.all_cases()), "clients": len(ds.client_ids)})
    return 0


def cmd_evaluate(args) -> int:
    _print(experiments.evaluate_scores(args.scores, args.features, args.sireos_k))
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="fedasd", description="Federated screening anomaly detection")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("config", help="key = value config file, or - for synthetic defaults")
        sp.add_argument("--set", action="append", metavar="KEY=VALUE", help="override a config key")
        sp.add_argument("--seeds", type=_csv_list(int), help="comma separated seeds")
        sp.add_argument("--output", help=f"output directory (else ${experiments.OUTPUT_ENV}, else run.output_dir)")

    run = sub.add_parser("run", help="train over every seed and write results")
    common(run)
    run.set_defaults(func=cmd_run)

    cmp_ = sub.add_parser("compare", help="run one sweep of the comparison grid")
    cmp_.add_argument("sweep", choices=experiments.SWEEPS)
    common(cmp_)
    cmp_.add_argument("--values", type=_csv_list(str), help="restrict the swept ids")
    cmp_.add_argument("--fractions", type=_csv_list(float), default=experiments.DEFAULT_FRACTIONS,
                      help="selection fractions for the sampler sweep")
    cmp_.set_defaults(func=cmd_compare)

    gen = sub.add_parser("generate", help="write a synthetic dataset CSV")
    gen.add_argument("out")
    gen.add_argument("--seed", type=int, default=0)
    gen.add_argument("--n-normal", type=int, default=300)
    gen.add_argument("--n-anomaly", type=int, default=60)
    gen.add_argument("--n-unknown", type=int, default=60)
    gen.add_argument("--features", type=int, default=19)
    gen.add_argument("--separation", type=float, default=6.0)
    gen.add_argument("--clients", type=int, default=5)
    gen.add_argument("--label-skew", type=float, default=0.0)
    gen.add_argument("--quantity-skew", type=float, default=0.0)
    gen.add_argument("--client-shift", type=float, default=0.0)
    gen.set_defaults(func=cmd_generate)

    ev = sub.add_parser("evaluate", help="metrics for a case_id,target,score CSV")
    ev.add_argument("scores")
    ev.add_argument("--features", help="dataset CSV (generic layout) supplying features for SIREOS")
    ev.add_argument("--sireos-k", type=int, default=10)
    ev.set_defaults(func=cmd_evaluate)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except FedAsdError as exc:
        err, code = {"error": exc.category, "message": str(exc)}, exc.exit_code
    except OSError as exc:
        err, code = {"error": "io", "message": str(exc)}, 1
    print(json.dumps(err), file=sys.stderr)
    return code


if __name__ == "__main__":
    sys.exit(main())
