"""Command-line entry point: ``motorec <verb> ...``."""
from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from . import data as data_mod
from .checkpoint import load_checkpoint
from .config import ABLATIONS, TrainConfig, parse_config_text
from .encoder import write_embeddings
from .errors import ConfigError, DataError, MotorecError
from .evaluation import write_reports

log = logging.getLogger("motorec")

# flags that map one-to-one onto TrainConfig fields
TRAIN_FLAGS = {
    "epochs": "max_epochs",
    "seed": "seed",
    "lr": "lr",
    "batch_size": "batch_size",
    "patience": "patience",
    "eval_every": "eval_every",
    "pretrain_epochs": "pretrain_epochs",
    "dim": "dim",
    "layers": "layers",
    "n_stages": "n_stages",
    "codebook_size": "codebook_size",
    "gamma": "gamma",
    "lambda_cl": "lambda_cl",
    "lambda_rq": "lambda_rq",
    "lambda_reg": "lambda_reg",
    "alpha": "alpha",
}


def _split(text: str) -> tuple[float, float, float]:
    try:
        parts = tuple(float(x) for x in text.split(","))
    except ValueError:
        raise ConfigError(f"--split expects three comma-separated numbers, got {text!r}") from None
    if len(parts) != 3 or min(parts) < 0 or abs(sum(parts) - 1.0) > 1e-9:
        raise ConfigError(f"--split must be three non-negative ratios summing to 1, got {text!r}")
    return parts


def _add_train_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="flat key = value config file")
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="override any config key")
    p.add_argument("--strict-grid", action="store_true", default=None, help="enforce the hyperparameter grid")
    for flag in TRAIN_FLAGS:
        p.add_argument("--" + flag.replace("_", "-"), dest=flag, default=None)


def build_config(args) -> TrainConfig:
    values = {}
    if args.config:
        try:
            values.update(parse_config_text(Path(args.config).read_text(encoding="utf-8")))
        except OSError as exc:
            raise ConfigError(f"cannot read config: {exc}") from None
    overrides = [f"{TRAIN_FLAGS[f]} = {getattr(args, f)}" for f in TRAIN_FLAGS if getattr(args, f) is not None]
    for item in args.set:
        if "=" not in item:
            raise ConfigError(f"--set expects KEY=VALUE, got {item!r}")
        overrides.append(item)
    if args.strict_grid:
        overrides.append("strict_grid = true")
    values.update(parse_config_text("\n".join(overrides)))
    return TrainConfig(**values)


def cmd_ingest(args) -> int:
    out = data_mod.ingest(args.interactions, args.visual, args.textual, args.out, args.seed, _split(args.split))
    print(f"wrote dataset to {out}")
    return 0


def cmd_synth(args) -> int:
    base = data_mod.SynthConfig.benchmark() if args.benchmark else data_mod.SynthConfig()
    changes = {k: v for k, v in (("n_users", args.users), ("n_items", args.items), ("cold_fraction", args.cold_frac)) if v is not None}
    cfg = base.replace(**changes)
    ds, visual, textual = data_mod.synthesize(cfg, args.seed)
    out = data_mod.save_dataset(args.out, ds, {"visual": visual, "textual": textual})
    print(f"wrote {ds.n_users} users, {ds.n_items} items, {len(ds.train)} train edges to {out}")
    return 0


def cmd_train(args) -> int:
    from .pipeline import train

    cfg = build_config(args)
    result = train(cfg, args.data, args.out)
    print(f"best epoch {result.best_epoch}, valid R@20 {result.best_valid:.6f}; outputs in {args.out}")
    return 0


def _print_reports(reports) -> None:
    for rep in reports:
        body = "  ".join(f"{k}={v:.4f}" for k, v in rep.metrics.items())
        print(f"{rep.scenario:<10} users={rep.n_users:<6} {body}")


def cmd_eval(args) -> int:
    from .pipeline import evaluate, load_model

    model = load_model(args.model, args.data)
    reports = evaluate(model, args.split, args.cold_only_rank)
    _print_reports(reports)
    if args.out:
        write_reports(args.out, reports)
    return 0


def cmd_tokenize(args) -> int:
    from .pipeline import tokenizer_from_checkpoint
    from .tokenizer import tokenize_corpus

    ckpt = load_checkpoint(args.model)
    src = Path(args.features)
    if src.is_dir():
        item_ids = data_mod.read_id_map(src / "item_map.tsv")
        index = {x: k for k, x in enumerate(item_ids)}
        sources = [(m, src / f"{m}.mtf") for m in data_mod.MODALITIES if (src / f"{m}.mtf").exists()]
        if not sources:
            raise DataError(f"{src}: no feature files")
    else:
        item_ids, index = None, None
        sources = [(args.modality, src)]
    with open(args.out, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("item_id\tmodality\tk\ttoken_index\n")
        for modality, path in sources:
            matrix = data_mod.read_feature_matrix(path, None if path.suffix == ".mtf" else index)
            tok = tokenizer_from_checkpoint(ckpt, modality)
            if matrix.shape[1] != tok.cfg.input_dim:
                raise DataError(f"{path}: feature dim {matrix.shape[1]} != tokenizer input dim {tok.cfg.input_dim}")
            codes, _ = tokenize_corpus(tok, matrix)
            for code in codes:
                name = item_ids[code.item] if item_ids is not None else str(code.item)
                for k, t in enumerate(code.tokens[modality]):
                    fh.write(f"{name}\t{modality}\t{k}\t{t}\n")
    print(f"wrote codes to {args.out}")
    return 0


def cmd_ablate(args) -> int:
    from .pipeline import run_ablation

    cfg = build_config(args)
    reports = run_ablation(cfg, args.variant, args.data, args.out)
    _print_reports(reports)
    if args.out:
        write_reports(args.out, reports)
    return 0


def cmd_export(args) -> int:
    from .pipeline import load_model

    model = load_model(args.model, args.data)
    users, items = model.final_embeddings()
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_embeddings(out / "users.mte", users)
    write_embeddings(out / "items.mte", items)
    print(f"wrote {users.shape[0]} user and {items.shape[0]} item embeddings to {out}")
    return 0


def make_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="motorec", description="Cold-start recommendation with semantic item tokens.")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="verb", required=True)

    p = sub.add_parser("ingest", help="convert raw interactions and features into a dataset directory")
    p.add_argument("--interactions", required=True)
    p.add_argument("--visual", required=True)
    p.add_argument("--textual", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--split", default="0.8,0.1,0.1")
    p.set_defaults(fn=cmd_ingest)

    p = sub.add_parser("synth", help="generate a synthetic cold-start dataset")
    p.add_argument("--users", type=int)
    p.add_argument("--items", type=int)
    p.add_argument("--cold-frac", type=float)
    p.add_argument("--benchmark", action="store_true", help="start from the cold-start benchmark settings")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_synth)

    p = sub.add_parser("train", help="train a model on a dataset directory")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    _add_train_flags(p)
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("eval", help="overall and cold-start metrics for a checkpoint")
    p.add_argument("--model", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--split", default="test", choices=("valid", "test"))
    p.add_argument("--cold-only-rank", action="store_true")
    p.add_argument("--out", help="directory for metrics.tsv and cold_vs_overall.tsv")
    p.set_defaults(fn=cmd_eval)

    p = sub.add_parser("tokenize", help="export semantic codes for item features")
    p.add_argument("--model", required=True)
    p.add_argument("--features", required=True, help="dataset directory or a single feature file")
    p.add_argument("--modality", default="visual", choices=data_mod.MODALITIES)
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_tokenize)

    p = sub.add_parser("ablate", help="train one ablation variant and report test metrics")
    p.add_argument("--data", required=True)
    p.add_argument("--variant", required=True, help="full, hge-off, " + ", ".join(ABLATIONS))
    p.add_argument("--out")
    _add_train_flags(p)
    p.set_defaults(fn=cmd_ablate)

    p = sub.add_parser("export-embeddings", help="write final user/item embeddings as MTE1 files")
    p.add_argument("--model", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_export)
    return parser


def main(argv=None) -> int:
    args = make_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.fn(args)
    except MotorecError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return DataError.exit_code


if __name__ == "__main__":
    sys.exit(main())
