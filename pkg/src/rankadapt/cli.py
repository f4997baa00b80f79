"""Command-line entry point.

Subcommands: train, evaluate, rank, ablate, gradcheck, gen-synthetic.
Exit codes group the error classes so scripts can branch on them:

  0  success
  1  unexpected internal error
  2  usage or configuration error
  3  malformed embedding file or checkpoint
  4  dataset/config geometry mismatch
  5  numeric failure (divergence, failed gradient check)
  6  unknown query id
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from . import autodiff as ad
from . import datastore, losses, model, train
from .checkpoint import CheckpointFormatError, load_checkpoint
from .datastore import EmbeddingFormatError
from .model import ConfigMismatchError

EXIT_OK = 0
EXIT_UNEXPECTED = 1
EXIT_CONFIG = 2
EXIT_FORMAT = 3
EXIT_MISMATCH = 4
EXIT_NUMERIC = 5
EXIT_UNKNOWN_QUERY = 6


class CliError(Exception):
    """Usage/configuration error carrying its exit code."""

    def __init__(self, message: str, code: int = EXIT_CONFIG) -> None:
        super().__init__(message)
        self.code = code


def _load_train_config(args) -> train.TrainConfig:
    data = {}
    if args.config:
        try:
            data = json.loads(Path(args.config).read_text())
        except OSError as exc:
            raise CliError(f"cannot read config file: {exc}")
        except json.JSONDecodeError as exc:
            raise CliError(f"config file is not valid JSON: {exc}")
        if not isinstance(data, dict):
            raise CliError("config file must hold a JSON object")
    overrides = {"seed": args.seed, "precision": args.precision, "alpha": args.alpha,
                 "pairs": args.pairs}
    for key, value in overrides.items():
        if value is not None:
            data[key] = value
    if getattr(args, "sum_rank", False):
        data["sum_rank"] = True
    if getattr(args, "steps", None) is not None:
        data["steps"] = args.steps
    if getattr(args, "m_tokens", None) is not None and args.command != "ablate":
        adapter = dict(data.get("adapter", {}))
        adapter["relational_tokens"] = _single_m(args.m_tokens)
        data["adapter"] = adapter
    try:
        return train.TrainConfig.from_dict(data)
    except (ValueError, TypeError) as exc:
        raise CliError(f"bad config: {exc}")


def _single_m(spec: str) -> int:
    values = _m_list(spec)
    if len(values) != 1:
        raise CliError("--m-tokens takes a single value outside ablate")
    return values[0]


def _m_list(spec: str) -> list:
    try:
        values = [int(v) for v in spec.split(",") if v]
    except ValueError:
        raise CliError(f"--m-tokens expects integers, got {spec!r}")
    if not values or any(v < 1 for v in values):
        raise CliError("--m-tokens values must be >= 1")
    return values


def _read_dataset(path) -> datastore.Dataset:
    if not path:
        raise CliError("--data is required for this command")
    return datastore.read_file(path)


def _apply_split(dataset, split_name, split_seed):
    if split_name in (None, "none"):
        return dataset
    parts = datastore.split(dataset, datastore.SplitSpec(seed=split_seed))
    return dict(zip(("train", "val", "test"), parts))[split_name]


def _load_ckpt(path):
    if not path:
        raise CliError("--ckpt is required for this command")
    return load_checkpoint(path)


def _cmd_train(args) -> int:
    config = _load_train_config(args)
    dataset = _apply_split(_read_dataset(args.data), args.split, args.split_seed)
    if not args.ckpt:
        raise CliError("--ckpt names the output checkpoint for train")
    result = train.train(dataset, config, args.ckpt, log_path=args.log)
    print(f"steps={result.steps_run} checkpoint={result.checkpoint_path} "
          f"log={result.log_path}")
    if result.diverged:
        print("aborted on non-finite loss; last-good checkpoint retained",
              file=sys.stderr)
        return EXIT_NUMERIC
    return EXIT_OK


def _cmd_evaluate(args) -> int:
    params, adapter = _load_ckpt(args.ckpt)
    dataset = _apply_split(_read_dataset(args.data), args.split, args.split_seed)
    report = train.evaluate_params(dataset, params, adapter)
    out = report.to_text()
    if args.out:
        Path(args.out).write_text(out)
    sys.stdout.write(out)
    return EXIT_OK


def _cmd_rank(args) -> int:
    params, adapter = _load_ckpt(args.ckpt)
    dataset = _read_dataset(args.data)
    if args.query is None:
        raise CliError("--query is required for rank")
    for item_id, score in train.rank_items(dataset, params, adapter, args.query):
        print(f"{item_id}\t{score:.6f}")
    return EXIT_OK


def _cmd_ablate(args) -> int:
    config = _load_train_config(args)
    dataset = _read_dataset(args.data)
    train_ds, val_ds, _ = datastore.split(dataset, datastore.SplitSpec(seed=args.split_seed))
    if len(val_ds) == 0:
        raise CliError("dataset too small to hold out a validation split")
    variants = [v for v in (args.ablate or "").split(",") if v] or None
    m_values = _m_list(args.m_tokens) if args.m_tokens else None
    try:
        rows = train.run_ablation(train_ds, val_ds, config,
                                  variants=variants, m_values=m_values)
    except ValueError as exc:
        raise CliError(str(exc))
    sys.stdout.write(train.ablation_table(rows))
    return EXIT_OK


def _cmd_gradcheck(args) -> int:
    config = model.AdapterConfig(
        patch_tokens=5, text_tokens=4, prompt_tokens=2, backbone_dim=8,
        adapter_dim=6, encoder_blocks=1, relational_tokens=args.m_tokens_int,
        reg_head_blocks=2, rank_head_blocks=3)
    rng = ad.Rng(args.seed if args.seed is not None else 0)
    params = model.init_adapter_params(config, rng.split("init"), dtype=np.float64)
    items = [(rng.normal((config.patch_tokens, config.backbone_dim), dtype=np.float64),
              rng.normal((config.text_tokens, config.backbone_dim), dtype=np.float64))
             for _ in range(4)]
    y = np.arange(4, dtype=np.float64)
    pset = losses.build_pairs(y)

    def build(_):
        out = model.forward_batch(items, params, config, pairs=pset.pairs)
        alpha = 0.2 if args.alpha is None else args.alpha
        lb = losses.combined_loss(out.scores, y, out.pair_outputs, alpha=alpha)
        return lb.total

    names = params.names()
    report = ad.check_gradients(build, [params[n] for n in names], names=names)
    sys.stdout.write("\n".join(report.lines()) + "\n")
    return EXIT_OK if report.passed else EXIT_NUMERIC


def _cmd_gen_synthetic(args) -> int:
    try:
        spec = datastore.SyntheticSpec(
            n_items=args.n_items, patch_tokens=args.patch_tokens, dim=args.dim,
            text_tokens=args.text_tokens, n_queries=args.n_queries, kind=args.kind,
            noise=args.noise, seed=args.seed if args.seed is not None else 0,
            max_count=args.max_count,
            precision=8 if args.precision == "f64" else 4)
        dataset = datastore.generate_synthetic(spec)
    except ValueError as exc:
        raise CliError(str(exc))
    datastore.write_file(args.out, dataset)
    print(f"wrote {len(dataset)} items, {len(dataset.queries)} queries to {args.out}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="rankadapt",
        description="Train and run the ranking adapter over frozen embeddings.")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, ckpt=False, data=False):
        p.add_argument("--config", help="JSON file of TrainConfig fields")
        p.add_argument("--seed", type=int, help="run seed (non-negative)")
        p.add_argument("--precision", choices=("f32", "f64"))
        p.add_argument("--alpha", type=float, help="regression loss weight")
        p.add_argument("--pairs", help="pair mode: all or sampled:<k>")
        p.add_argument("--sum-rank", action="store_true",
                       help="sum the hinge over pairs instead of averaging")
        p.add_argument("--m-tokens", help="relational token count (ablate: comma list)")
        if data:
            p.add_argument("--data", help="embedding file path")
        if ckpt:
            p.add_argument("--ckpt", help="checkpoint path")

    p_train = sub.add_parser("train", help="fit the adapter on an embedding file")
    common(p_train, ckpt=True, data=True)
    p_train.add_argument("--steps", type=int, help="override step count")
    p_train.add_argument("--log", help="loss log path (default <ckpt>.log)")
    p_train.add_argument("--split", choices=("none", "train", "val", "test"),
                         default="none", help="train on one split of the file")
    p_train.add_argument("--split-seed", type=int, default=0)

    p_eval = sub.add_parser("evaluate", help="metric report for a checkpoint")
    common(p_eval, ckpt=True, data=True)
    p_eval.add_argument("--split", choices=("none", "train", "val", "test"),
                        default="none")
    p_eval.add_argument("--split-seed", type=int, default=0)
    p_eval.add_argument("--out", help="also write the report to this path")

    p_rank = sub.add_parser("rank", help="order one query's items by score")
    common(p_rank, ckpt=True, data=True)
    p_rank.add_argument("--query", type=int, help="query id to rank")

    p_abl = sub.add_parser("ablate", help="train and compare model variants")
    common(p_abl, ckpt=False, data=True)
    p_abl.add_argument("--steps", type=int, help="override step count")
    p_abl.add_argument("--ablate", help="comma list of variants "
                       "(default regression-only,rank-head,full)")
    p_abl.add_argument("--split-seed", type=int, default=0)

    p_grad = sub.add_parser("gradcheck", help="finite-difference gradient audit")
    common(p_grad)

    p_gen = sub.add_parser("gen-synthetic", help="write a synthetic embedding file")
    p_gen.add_argument("--out", required=True)
    p_gen.add_argument("--kind", choices=("linear_pool", "pairwise_contrast"),
                       default="linear_pool")
    p_gen.add_argument("--n-items", type=int, default=1000)
    p_gen.add_argument("--patch-tokens", type=int, default=16)
    p_gen.add_argument("--dim", type=int, default=32)
    p_gen.add_argument("--text-tokens", type=int, default=8)
    p_gen.add_argument("--n-queries", type=int, default=1)
    p_gen.add_argument("--noise", type=float, default=0.0)
    p_gen.add_argument("--max-count", type=int, default=8)
    p_gen.add_argument("--seed", type=int, default=0)
    p_gen.add_argument("--precision", choices=("f32", "f64"), default="f32")
    return parser


_COMMANDS = {
    "train": _cmd_train,
    "evaluate": _cmd_evaluate,
    "rank": _cmd_rank,
    "ablate": _cmd_ablate,
    "gradcheck": _cmd_gradcheck,
    "gen-synthetic": _cmd_gen_synthetic,
}


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.command == "gradcheck":
        args.m_tokens_int = _single_m(args.m_tokens) if args.m_tokens else 3
    try:
        return _COMMANDS[args.command](args)
    except CliError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.code
    except (EmbeddingFormatError, CheckpointFormatError) as exc:
        print(f"format error: {exc}", file=sys.stderr)
        return EXIT_FORMAT
    except ConfigMismatchError as exc:
        print(f"mismatch: {exc}", file=sys.stderr)
        return EXIT_MISMATCH
    except train.UnknownQueryError as exc:
        print(f"unknown query: {exc}", file=sys.stderr)
        return EXIT_UNKNOWN_QUERY
    except ad.NumericsError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except Exception as exc:  # pragma: no cover - safety net
        print(f"unexpected error: {exc}", file=sys.stderr)
        return EXIT_UNEXPECTED


if __name__ == "__main__":
    sys.exit(main())
