"""Command-line interface.

Subcommands: generate, train, fit-embedding, control, attack, margins,
verify-bounds, run, compare.  Every subcommand honours --seed and --json,
and exits nonzero on failure (2 for parse/schema problems).
"""

import argparse
import json
import os
import sys
from importlib import resources

from . import __version__, datagen, pipeline
from .data import load_dataset_csv, save_dataset_csv
from .dynamics import load_net, save_net
from .embedding import fit_autoencoder, fit_pca, save_embeddings

PARSE_ERROR = 2

PRESETS = (
    "fig2",
    "fig3-margins",
    "prop1",
    "thm1-sweep",
    "thm2-sweep",
    "propC2",
    "oblivious-robustness",
    "whitebox-robustness",
)


def _emit(args, payload, text):
    if getattr(args, "json", False):
        print(json.dumps(pipeline._jsonable(payload), sort_keys=True))
    else:
        print(text)


def _load_json(path, what):
    try:
        with open(path) as fh:
            return json.load(fh)
    except FileNotFoundError:
        raise SystemExit(_fail(f"{what} file not found: {path}", PARSE_ERROR))
    except json.JSONDecodeError as exc:
        raise SystemExit(_fail(f"cannot parse {what} file {path}: {exc}", PARSE_ERROR))


def _fail(message, code=1):
    print(f"error: {message}", file=sys.stderr)
    return code


def cmd_generate(args):
    spec = datagen.SyntheticSpec(
        kind=args.kind,
        d=args.d,
        r=args.r,
        n_per_class=args.n_per_class,
        noise=args.noise,
        seed=args.seed,
        gap=args.gap,
        spread=args.spread,
        radius=args.radius,
        amplitude=args.amplitude,
        frequency=args.frequency,
    )
    data = datagen.generate(spec)
    save_dataset_csv(data, args.out)
    _emit(args, {"n": data.n, "dim": data.dim, "out": args.out},
          f"wrote {data.n} points of dimension {data.dim} to {args.out}")
    return 0


def cmd_train(args):
    data = load_dataset_csv(args.data)
    arch = datagen.ClassifierArch(
        hidden=tuple(args.hidden),
        activation=args.activation,
        n_classes=args.classes or data.n_classes(),
    )
    cfg = pipeline._train_cfg(
        {"epochs": args.epochs, "batch_size": args.batch_size, "lr": args.lr,
         "momentum": args.momentum, "seed": args.seed},
        args.seed,
    )
    result = datagen.train_classifier(data, arch, cfg)
    save_net(result.net, args.out)
    _emit(args, {"train_accuracy": result.train_accuracy, "out": args.out},
          f"train accuracy {result.train_accuracy:.4f}; model written to {args.out}")
    return 0


def cmd_fit_embedding(args):
    data = load_dataset_csv(args.data)
    cfg = pipeline._train_cfg(
        {"epochs": args.epochs, "batch_size": args.batch_size, "lr": args.lr,
         "momentum": args.momentum, "seed": args.seed},
        args.seed,
    )
    if args.model:
        net = load_net(args.model)
        embeddings = pipeline.fit_layer_embeddings(
            net, data, kind=args.kind, r=args.r, train_cfg=cfg, hidden=tuple(args.hidden)
        )
    elif args.kind == "pca":
        embeddings = [fit_pca(data.points, args.r)]
    else:
        embeddings = [fit_autoencoder(data.points, args.r, cfg, hidden=tuple(args.hidden))]
    save_embeddings(embeddings, args.out)
    _emit(args, {"count": len(embeddings), "out": args.out},
          f"wrote {len(embeddings)} embedding(s) to {args.out}")
    return 0


def cmd_control(args):
    cfg = {
        "model": args.model, "embeddings": args.embeddings, "data": args.input,
        "out": args.out, "c": args.c, "max_itr": args.max_itr,
        "inner_itr": args.inner_itr, "pmp_lr": args.pmp_lr,
    }
    metrics = pipeline._stage_control(cfg, ".", args.seed, force=True)
    _emit(args, {**metrics, "out": args.out},
          f"controlled accuracy {metrics['controlled_accuracy']:.4f}; wrote {args.out}")
    return 0


def cmd_attack(args):
    cfg = {
        "model": args.model, "data": args.data, "out": args.out, "norm": args.norm,
        "eps": args.eps, "steps": args.steps, "seed": args.seed,
        "threat": "whitebox" if args.whitebox else "oblivious",
        "greedy_only": args.greedy_only,
        "max_itr": args.max_itr, "inner_itr": args.inner_itr,
        "pmp_lr": args.pmp_lr, "c": args.c,
    }
    if args.embeddings:
        cfg["embeddings"] = args.embeddings
    metrics = pipeline._stage_attack(cfg, ".", args.seed, force=True)
    _emit(args, {**metrics, "out": args.out},
          f"attack success rate {metrics['attack_success_rate']:.4f}; wrote {args.out}")
    return 0


def cmd_margins(args):
    cfg = {
        "model": args.model, "data": args.data, "out": args.out,
        "knn": args.knn, "seed": args.seed,
    }
    if args.embedding:
        cfg["embedding"] = args.embedding
    metrics = pipeline._stage_margins(cfg, ".", args.seed, force=True)
    _emit(args, {**metrics, "out": args.out},
          "margins: euclid {d_euclid:.6g} manifold {d_manifold:.6g} "
          "projection {d_projection:.6g}".format(**metrics))
    return 0


def cmd_verify_bounds(args):
    doc = pipeline.run_bound_suite(args.suite, args.trials, args.seed)
    pipeline.write_json(doc, args.out)
    summary = {k: v for k, v in doc.items() if k not in ("cases", "records")}
    _emit(args, {**summary, "out": args.out},
          f"suite {args.suite}: " + ", ".join(
              f"{k}={v}" for k, v in summary.items() if k != "suite"))
    violations = doc.get("violations", 0)
    all_hold = doc.get("all_hold", True)
    return 0 if (violations == 0 and all_hold) else 1


def preset_config(name):
    ref = resources.files("selfheal").joinpath(f"presets/{name}.json")
    with ref.open() as fh:
        return json.load(fh)


def cmd_run(args):
    if args.preset:
        if args.preset not in PRESETS:
            return _fail(f"unknown preset {args.preset!r}; choose from {PRESETS}", PARSE_ERROR)
        config = preset_config(args.preset)
    else:
        config = _load_json(args.config, "config")
    problems = validate_config(config)
    if problems:
        return _fail("; ".join(problems), PARSE_ERROR)
    if args.seed is not None:
        config["seed"] = args.seed
    out_dir = args.out_dir or (f"runs/{args.preset}" if args.preset else "runs/custom")
    try:
        report = pipeline.run_pipeline(config, out_dir, force=args.force)
    except pipeline.StageError as exc:
        return _fail(str(exc), 1)
    except (ValueError, KeyError) as exc:
        return _fail(str(exc), PARSE_ERROR)
    _emit(args, report, f"report written to {os.path.join(out_dir, 'report.json')}")
    return 0


def validate_config(config):
    problems = []
    if not isinstance(config, dict):
        return ["config must be a JSON object"]
    stages = config.get("pipeline", [])
    if not isinstance(stages, list):
        return ["config.pipeline must be a list"]
    seen = set()
    for i, stage in enumerate(stages):
        if not isinstance(stage, dict) or "stage" not in stage:
            problems.append(f"pipeline[{i}] must be an object with a 'stage' key")
            continue
        if stage["stage"] not in pipeline._STAGES:
            problems.append(
                f"pipeline[{i}]: unknown stage {stage['stage']!r} "
                f"(known: {sorted(pipeline._STAGES)})"
            )
        name = stage.get("name", stage["stage"])
        if name in seen:
            problems.append(f"pipeline[{i}]: duplicate stage name {name!r}")
        seen.add(name)
    return problems


def cmd_compare(args):
    a = _load_json(args.report_a, "report")
    b = _load_json(args.report_b, "report")
    try:
        rows = pipeline.compare_reports(a, b)
    except ValueError as exc:
        return _fail(str(exc), PARSE_ERROR)
    if args.json:
        print(json.dumps(pipeline._jsonable(rows), sort_keys=True))
    else:
        for row in rows:
            if row["status"] == "missing":
                print(f"{row['metric']}: MISSING (a={row['a']}, b={row['b']})")
            elif "delta" in row:
                print(f"{row['metric']}: {row['a']} -> {row['b']} (delta {row['delta']:+g})")
            else:
                print(f"{row['metric']}: {row['a']} vs {row['b']} [{row['status']}]")
    return 0


def build_parser():
    parser = argparse.ArgumentParser(
        prog="selfheal",
        description="Closed-loop self-healing control experiments at desk scale.",
    )
    parser.add_argument("--version", action="version", version=f"selfheal {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("generate", help="generate a synthetic dataset")
    p.add_argument("--kind", required=True, choices=datagen.KINDS)
    p.add_argument("--d", type=int, default=2)
    p.add_argument("--r", type=int, default=1)
    p.add_argument("--n-per-class", type=int, default=50)
    p.add_argument("--noise", type=float, default=0.0)
    p.add_argument("--gap", type=float, default=3.0)
    p.add_argument("--spread", type=float, default=1.0)
    p.add_argument("--radius", type=float, default=2.0)
    p.add_argument("--amplitude", type=float, default=0.8)
    p.add_argument("--frequency", type=float, default=1.2)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.add_argument("--json", action="store_true")
    p.set_defaults(fn=cmd_generate)

    p = sub.add_parser("train", help="train a baseline classifier")
    p.add_argument("--data", required=True)
    p.add_argument("--hidden", type=int, nargs="*", default=[16])
    p.add_argument("--activation", default="tanh")
    p.add_argument("--classes", type=int, default=0)
    p.add_argument("--epochs", type=int, default=200)
    p.add_argument("--batch-size", type=int, default=16)
    p.add_argument("--lr", type=float, default=0.05)
    p.add_argument("--momentum", type=float, default=0.9)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.add_argument("--json", action="store_true")
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("fit-embedding", help="fit per-layer embedding manifolds")
    p.add_argument("--data", required=True)
    p.add_argument("--model", help="fit one embedding per layer state of this model")
    p.add_argument("--kind", choices=("pca", "autoencoder"), default="pca")
    p.add_argument("--r", type=int, default=1)
    p.add_argument("--hidden", type=int, nargs="*", default=[16])
    p.add_argument("--epochs", type=int, default=200)
    p.add_argument("--batch-size", type=int, default=16)
    p.add_argument("--lr", type=float, default=0.05)
    p.add_argument("--momentum", type=float, default=0.9)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.add_argument("--json", action="store_true")
    p.set_defaults(fn=cmd_fit_embedding)

    p = sub.add_parser("control", help="solve the closed-loop control per input")
    p.add_argument("--model", required=True)
    p.add_argument("--embeddings", required=True)
    p.add_argument("--input", required=True)
    p.add_argument("--c", type=float, default=0.001)
    p.add_argument("--max-itr", type=int, default=3)
    p.add_argument("--inner-itr", type=int, default=10)
    p.add_argument("--pmp-lr", type=float, default=0.1)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.add_argument("--json", action="store_true")
    p.set_defaults(fn=cmd_control)

    p = sub.add_parser("attack", help="generate adversarial examples")
    p.add_argument("--model", required=True)
    p.add_argument("--embeddings")
    p.add_argument("--whitebox", action="store_true")
    p.add_argument("--greedy-only", action="store_true")
    p.add_argument("--norm", choices=("l1", "l2", "linf"), default="linf")
    p.add_argument("--eps", type=float, default=0.1)
    p.add_argument("--steps", type=int, default=50)
    p.add_argument("--data", required=True)
    p.add_argument("--c", type=float, default=0.001)
    p.add_argument("--max-itr", type=int, default=3)
    p.add_argument("--inner-itr", type=int, default=10)
    p.add_argument("--pmp-lr", type=float, default=0.1)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.add_argument("--json", action="store_true")
    p.set_defaults(fn=cmd_attack)

    p = sub.add_parser("margins", help="compute classifier margins")
    p.add_argument("--model", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--embedding")
    p.add_argument("--knn", type=int, default=8)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.add_argument("--json", action="store_true")
    p.set_defaults(fn=cmd_margins)

    p = sub.add_parser("verify-bounds", help="run an error-bound verification suite")
    p.add_argument("--suite", required=True, choices=sorted(pipeline.BOUND_SUITES))
    p.add_argument("--trials", type=int, default=100)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.add_argument("--json", action="store_true")
    p.set_defaults(fn=cmd_verify_bounds)

    p = sub.add_parser("run", help="execute a pipeline config or preset")
    p.add_argument("--config")
    p.add_argument("--preset", choices=PRESETS)
    p.add_argument("--out-dir")
    p.add_argument("--seed", type=int)
    p.add_argument("--force", action="store_true")
    p.add_argument("--json", action="store_true")
    p.set_defaults(fn=cmd_run)

    p = sub.add_parser("compare", help="diff two pipeline reports")
    p.add_argument("report_a")
    p.add_argument("report_b")
    p.add_argument("--json", action="store_true")
    p.set_defaults(fn=cmd_compare)

    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.command == "run" and not (args.config or args.preset):
        parser.error("run needs --config or --preset")
    try:
        return args.fn(args)
    except SystemExit:
        raise
    except (ValueError, FileNotFoundError) as exc:
        return _fail(str(exc), PARSE_ERROR)
    except Exception as exc:  # stage failures, numeric errors
        return _fail(f"{type(exc).__name__}: {exc}", 1)


if __name__ == "__main__":
    sys.exit(main())
