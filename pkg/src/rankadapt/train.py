"""Training, evaluation, ranking, and ablation orchestration.

The training loop is deterministic for a fixed (config, seed, dataset):
epoch shuffles and pair sampling draw from named substreams of the run
seed, so identical runs produce byte-identical loss logs and checkpoints.
Pairs are always restricted to items that share a query; cross-query
score comparisons carry no signal.
"""

from __future__ import annotations

import dataclasses
import json
import math
import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from . import losses, metrics, model, optim
from .checkpoint import save_checkpoint
from .datastore import Dataset
from .model import AdapterConfig, AdapterParams, ConfigMismatchError

PRECISION_DTYPES = {"f32": np.float32, "f64": np.float64}


class UnknownQueryError(ValueError):
    """Raised when an operation names a query id absent from the dataset."""


@dataclass
class TrainConfig:
    """Run settings; `adapter` holds AdapterConfig field overrides.

    Geometry fields (patch_tokens, text_tokens, backbone_dim) default to
    the dataset header; overriding them to conflicting values is an error.
    """

    lr: float = 1e-5
    weight_decay: float = 0.01
    batch_size: int = 64
    steps: int = 2000
    seed: int = 0
    alpha: float = 0.2
    pairs: str = "all"
    precision: str = "f32"
    sum_rank: bool = False
    grad_clip: float = 0.0  # 0 disables clipping
    schedule: str = "none"  # "none" | "cosine"
    checkpoint_every: int = 500  # 0 writes only init + final
    log_every: int = 1
    adapter: dict = field(default_factory=dict)

    def __post_init__(self) -> None:
        if self.lr < 0 or self.weight_decay < 0 or self.alpha < 0 or self.grad_clip < 0:
            raise ValueError("lr, weight_decay, alpha, and grad_clip must be >= 0")
        if self.batch_size < 1 or self.steps < 0:
            raise ValueError("batch_size must be >= 1 and steps >= 0")
        if self.checkpoint_every < 0 or self.log_every < 1:
            raise ValueError("checkpoint_every must be >= 0 and log_every >= 1")
        if self.precision not in PRECISION_DTYPES:
            raise ValueError(f"precision must be one of {sorted(PRECISION_DTYPES)}")
        if self.schedule not in ("none", "cosine"):
            raise ValueError(f"unknown schedule {self.schedule!r}")
        if self.seed < 0:
            raise ValueError("seed must be a non-negative integer")
        losses.parse_pair_mode(self.pairs)
        if not isinstance(self.adapter, dict):
            raise ValueError("adapter overrides must be a mapping")

    @classmethod
    def from_dict(cls, data: dict) -> "TrainConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ValueError(f"unknown config fields: {sorted(unknown)}")
        return cls(**data)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


def resolve_adapter_config(config: TrainConfig, dataset: Dataset) -> AdapterConfig:
    """Merge dataset geometry with adapter overrides into an AdapterConfig."""
    overrides = dict(config.adapter)
    base = {"patch_tokens": dataset.patch_tokens, "text_tokens": dataset.text_tokens,
            "backbone_dim": dataset.dim}
    for key, value in base.items():
        if key in overrides and overrides[key] != value:
            raise ConfigMismatchError(
                f"adapter override {key}={overrides[key]} conflicts with "
                f"dataset geometry {key}={value}")
    base.update(overrides)
    try:
        return AdapterConfig(**base)
    except TypeError as exc:
        raise ValueError(f"bad adapter override: {exc}") from exc


def _require_matching_dims(config: AdapterConfig, dataset: Dataset) -> None:
    got = (dataset.patch_tokens, dataset.text_tokens, dataset.dim)
    want = (config.patch_tokens, config.text_tokens, config.backbone_dim)
    if got != want:
        raise ConfigMismatchError(
            f"dataset geometry (p, t, d)={got} does not match adapter config {want}")


def _dataset_tensors(dataset: Dataset):
    """Unpack records into forward_batch inputs plus target/query arrays."""
    items = [(it.patches, dataset.queries[it.query_id].tokens) for it in dataset.items]
    y = np.array([it.score for it in dataset.items], dtype=np.float64)
    qids = np.array([it.query_id for it in dataset.items], dtype=np.int64)
    if any(it.bin is not None for it in dataset.items):
        bins = np.array([-1 if it.bin is None else it.bin for it in dataset.items],
                        dtype=np.int64)
    else:
        bins = None
    return items, y, qids, bins


def _schedule_lr(base: float, schedule: str, step: int, steps: int) -> float:
    if schedule == "cosine" and steps > 1:
        return base * 0.5 * (1.0 + math.cos(math.pi * (step - 1) / (steps - 1)))
    return base


@dataclass
class FitResult:
    params: AdapterParams
    adapter: AdapterConfig
    steps_run: int
    diverged: bool
    log_lines: list


def fit(dataset: Dataset, config: TrainConfig, step_hook=None) -> FitResult:
    """Run the optimization loop in memory.

    step_hook(step, params, adapter), when given, runs after each applied
    update (checkpoint cadence lives there). A non-finite loss aborts
    before the update that would consume it, so the returned parameters
    are the last state that produced a finite loss.
    """
    if len(dataset) == 0:
        raise ValueError("cannot train on an empty dataset")
    adapter = resolve_adapter_config(config, dataset)
    dtype = PRECISION_DTYPES[config.precision]
    rng = ad.Rng(config.seed)
    params = model.init_adapter_params(adapter, rng.split("init"), dtype=dtype)
    opt = optim.AdamW(params, lr=config.lr, weight_decay=config.weight_decay)
    items, y, qids, _ = _dataset_tensors(dataset)

    n = len(items)
    step = 0
    epoch = 0
    diverged = False
    log_lines = []
    while step < config.steps and not diverged:
        order = rng.split(f"epoch{epoch}").permutation(n)
        epoch += 1
        for start in range(0, n, config.batch_size):
            if step >= config.steps:
                break
            idx = order[start:start + config.batch_size]
            batch = [items[i] for i in idx]
            pset = losses.build_pairs(y[idx], config.pairs,
                                      rng=rng.split(f"pairs{step}"), groups=qids[idx])
            out = model.forward_batch(batch, params, adapter, pairs=pset.pairs)
            lb = losses.combined_loss(out.scores, y[idx], out.pair_outputs,
                                      alpha=config.alpha, sum_rank=config.sum_rank)
            step += 1
            reg_v, rank_v, total_v = lb.reg_value, lb.rank_value, lb.total_value
            if not (math.isfinite(reg_v) and math.isfinite(rank_v)
                    and math.isfinite(total_v)):
                log_lines.append(json.dumps({"step": step, "event": "non_finite_loss"}))
                diverged = True
                break
            opt.zero_grad()
            ad.backward(lb.total)
            if config.grad_clip > 0:
                optim.clip_grad_norm(params, config.grad_clip)
            opt.lr = _schedule_lr(config.lr, config.schedule, step, config.steps)
            opt.step()
            if step % config.log_every == 0:
                log_lines.append(json.dumps(
                    {"step": step, "l_reg": reg_v, "l_rank": rank_v, "total": total_v}))
            if step_hook is not None:
                step_hook(step, params, adapter)
    return FitResult(params=params, adapter=adapter, steps_run=step,
                     diverged=diverged, log_lines=log_lines)


@dataclass
class TrainResult:
    steps_run: int
    diverged: bool
    checkpoint_path: Path
    log_path: Path


def _atomic_save(path: Path, params: AdapterParams, adapter: AdapterConfig) -> None:
    tmp = path.with_name(path.name + ".tmp")
    save_checkpoint(tmp, params, adapter)
    os.replace(tmp, path)


def train(dataset: Dataset, config: TrainConfig, ckpt_path, log_path=None) -> TrainResult:
    """Fit on the dataset, checkpointing to ckpt_path and logging JSONL.

    The initialization is checkpointed before the first step, then
    overwritten on the configured cadence and after the final step, so a
    last-good checkpoint survives a divergence abort.
    """
    ckpt_path = Path(ckpt_path)
    log_path = Path(log_path) if log_path else ckpt_path.with_name(ckpt_path.name + ".log")

    adapter = resolve_adapter_config(config, dataset)
    dtype = PRECISION_DTYPES[config.precision]
    init = model.init_adapter_params(adapter, ad.Rng(config.seed).split("init"), dtype=dtype)
    _atomic_save(ckpt_path, init, adapter)

    def hook(step, params, acfg):
        if config.checkpoint_every and step % config.checkpoint_every == 0:
            _atomic_save(ckpt_path, params, acfg)

    result = fit(dataset, config, step_hook=hook)
    if not result.diverged:
        _atomic_save(ckpt_path, result.params, result.adapter)
    log_path.write_text("".join(line + "\n" for line in result.log_lines))
    return TrainResult(steps_run=result.steps_run, diverged=result.diverged,
                       checkpoint_path=ckpt_path, log_path=log_path)


def evaluate_params(dataset: Dataset, params: AdapterParams, adapter: AdapterConfig,
                    batch_size: int = 256) -> metrics.EvalReport:
    """Score every item (no pairs) and build the metric report."""
    if len(dataset) == 0:
        raise ValueError("cannot evaluate an empty dataset")
    _require_matching_dims(adapter, dataset)
    items, y, qids, bins = _dataset_tensors(dataset)
    preds = np.empty(len(items), dtype=np.float64)
    for start in range(0, len(items), batch_size):
        chunk = items[start:start + batch_size]
        out = model.forward_batch(chunk, params, adapter)
        preds[start:start + len(chunk)] = out.scores.values.astype(np.float64)
    return metrics.build_report(qids, preds, y, bins=bins)


def predict_scores(dataset: Dataset, params: AdapterParams, adapter: AdapterConfig,
                   batch_size: int = 256) -> np.ndarray:
    """Per-item scores in dataset order."""
    if len(dataset) == 0:
        return np.empty(0, dtype=np.float64)
    _require_matching_dims(adapter, dataset)
    items, _, _, _ = _dataset_tensors(dataset)
    preds = np.empty(len(items), dtype=np.float64)
    for start in range(0, len(items), batch_size):
        chunk = items[start:start + batch_size]
        out = model.forward_batch(chunk, params, adapter)
        preds[start:start + len(chunk)] = out.scores.values.astype(np.float64)
    return preds


def rank_items(dataset: Dataset, params: AdapterParams, adapter: AdapterConfig,
               query_id: int) -> list:
    """Items of one query ordered by descending score, id-ascending on ties."""
    if query_id not in dataset.queries:
        raise UnknownQueryError(f"query id {query_id} not present in dataset")
    sub = dataset.subset([it.item_id for it in dataset.items if it.query_id == query_id])
    scores = predict_scores(sub, params, adapter)
    pairs = [(it.item_id, float(s)) for it, s in zip(sub.items, scores)]
    return sorted(pairs, key=lambda t: (-t[1], t[0]))


# ---------------------------------------------------------------------------
# ablation sweeps
# ---------------------------------------------------------------------------

ABLATION_VARIANTS = {
    "regression-only": {"use_rank_head": False},
    "rank-head": {"use_rank_head": True, "use_relational_attention": False},
    "full": {"use_rank_head": True, "use_relational_attention": True},
    "merged-dot-product": {"use_rank_head": True, "use_relational_attention": True,
                           "merged_dot_product": True},
    "concat-fusion": {"use_rank_head": True, "use_relational_attention": True,
                      "concat_fusion": True},
    "self-attention-pooling": {"use_rank_head": True, "use_relational_attention": True,
                               "self_attention_pooling": True},
}


@dataclass
class AblationRow:
    variant: str
    n_params: int
    diverged: bool
    srcc: float | None
    plcc: float | None
    mae: float | None
    accuracy: float | None


def run_ablation(train_ds: Dataset, eval_ds: Dataset, config: TrainConfig,
                 variants=None, m_values=None) -> list:
    """Train each variant under an identical seed/schedule and evaluate.

    Rows come back in request order; m_values appends full-model rows with
    the relational token count swept.
    """
    names = list(variants) if variants else ["regression-only", "rank-head", "full"]
    jobs = []
    for name in names:
        if name not in ABLATION_VARIANTS:
            raise ValueError(f"unknown ablation variant {name!r}; "
                             f"expected one of {sorted(ABLATION_VARIANTS)}")
        jobs.append((name, ABLATION_VARIANTS[name]))
    for m in (m_values or []):
        jobs.append((f"full[M={m}]", {**ABLATION_VARIANTS["full"],
                                      "relational_tokens": int(m)}))
    rows = []
    for name, flags in jobs:
        vconfig = dataclasses.replace(config, adapter={**config.adapter, **flags})
        res = fit(train_ds, vconfig)
        report = evaluate_params(eval_ds, res.params, res.adapter)
        pooled = report.pooled
        rows.append(AblationRow(variant=name,
                                n_params=model.active_param_count(res.adapter),
                                diverged=res.diverged, srcc=pooled.srcc,
                                plcc=pooled.plcc, mae=pooled.mae,
                                accuracy=pooled.accuracy))
    return rows


def ablation_table(rows) -> str:
    """Fixed-width text table over ablation rows."""
    def cell(v):
        return "-" if v is None else f"{v:.4f}"

    header = f"{'variant':<24} {'params':>9} {'srcc':>8} {'plcc':>8} {'mae':>8} {'acc':>8}"
    lines = [header, "-" * len(header)]
    for r in rows:
        tag = f"{r.variant}!" if r.diverged else r.variant
        lines.append(f"{tag:<24} {r.n_params:>9} {cell(r.srcc):>8} "
                     f"{cell(r.plcc):>8} {cell(r.mae):>8} {cell(r.accuracy):>8}")
    return "\n".join(lines) + "\n"
