"""Ranking-aware adapter over frozen patch/text embeddings.

The adapter never touches pixels: each item arrives as a patch-token matrix
z (p x d) from a frozen image tower plus the token matrix w (t x d) of its
query from the frozen text tower. Encoding blocks mix patch tokens with
self-attention and condition them on [w; learnable prompt tokens] with
cross-attention (pre-norm, residual); a final linear projects to width d'.

Two heads read the encoded tokens:
  * a regression head scoring one item from its mean-pooled tokens, and
  * a relational head scoring an ordered pair: learnable relational tokens
    attend jointly over both items' tokens, the per-token readouts of the
    two items are subtracted, averaged, and pushed through an MLP to a
    scalar that trains against a pairwise hinge.

forward_batch computes the same relational math for every pair in a batch
at once by exploiting that the joint softmax over [z'_i; z'_j] splits into
per-item exponential sums, so per-item work is shared across pairs. The
direct relational_attention path keeps the textbook form; tests pin the two
paths to each other and to finite differences.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor


class ConfigMismatchError(ValueError):
    """Inputs, parameters, or checkpoints disagree on model geometry."""


@dataclass(frozen=True)
class AdapterConfig:
    """Geometry and ablation switches; parameter shapes follow from this alone."""

    patch_tokens: int = 100       # p: image tokens per item
    text_tokens: int = 77         # t: frozen text tokens per query
    prompt_tokens: int = 32       # learnable tokens appended to the text side
    backbone_dim: int = 768       # d: width of the frozen towers
    adapter_dim: int = 512        # d': width after projection
    encoder_blocks: int = 2
    relational_tokens: int = 16   # M: learnable queries of the pair head
    heads: int = 1
    reg_head_blocks: int = 2
    rank_head_blocks: int = 3
    use_rank_head: bool = True
    use_relational_attention: bool = True
    merged_dot_product: bool = False      # pool A @ [V_i; V_j] without splitting
    concat_fusion: bool = False           # feed [mean O_i; mean O_j] instead of the difference
    self_attention_pooling: bool = False  # score keys of [q; z'_i; z'_j] instead of cross-attention

    def __post_init__(self):
        for name in ("patch_tokens", "text_tokens", "prompt_tokens", "backbone_dim",
                     "adapter_dim", "encoder_blocks", "relational_tokens", "heads",
                     "reg_head_blocks", "rank_head_blocks"):
            if getattr(self, name) < 1:
                raise ConfigMismatchError(f"{name} must be >= 1")
        if self.backbone_dim % self.heads or self.adapter_dim % self.heads:
            raise ConfigMismatchError(
                f"heads={self.heads} must divide backbone_dim={self.backbone_dim} "
                f"and adapter_dim={self.adapter_dim}")
        if self.merged_dot_product and self.concat_fusion:
            raise ConfigMismatchError("merged_dot_product pools a single readout; "
                                      "there is nothing to concatenate")

    def with_overrides(self, **kwargs) -> "AdapterConfig":
        return replace(self, **kwargs)


def _param_shapes(config: AdapterConfig):
    """Ordered (name, shape) pairs; the single source of parameter geometry."""
    p, t, tp = config.patch_tokens, config.text_tokens, config.prompt_tokens
    d, dp = config.backbone_dim, config.adapter_dim
    del p, t  # geometry of inputs, not of parameters
    yield "prompt.tokens", (tp, d)
    for i in range(config.encoder_blocks):
        for ln in ("ln1", "ln2"):
            yield f"enc{i}.{ln}.gain", (d,)
            yield f"enc{i}.{ln}.bias", (d,)
        for part in ("self", "cross"):
            for proj in ("wq", "wk", "wv", "wo"):
                yield f"enc{i}.{part}.{proj}", (d, d)
                yield f"enc{i}.{part}.{proj[1]}b", (d,)
    yield "proj.w", (d, dp)
    yield "proj.b", (dp,)
    yield "relational.tokens", (config.relational_tokens, dp)
    for i in range(config.reg_head_blocks):
        yield f"reg{i}.w", (dp, dp)
        yield f"reg{i}.b", (dp,)
    yield "reg_out.w", (dp, 1)
    yield "reg_out.b", (1,)
    rank_in = 2 * dp if config.concat_fusion else dp
    for i in range(config.rank_head_blocks):
        yield f"rank{i}.w", (rank_in if i == 0 else dp, dp)
        yield f"rank{i}.b", (dp,)
    yield "rank_out.w", (dp, 1)
    yield "rank_out.b", (1,)


def param_count(config: AdapterConfig) -> int:
    return sum(int(np.prod(shape)) for _, shape in _param_shapes(config))


def active_param_count(config: AdapterConfig) -> int:
    """Parameters the forward pass can actually reach under the flags.

    Disabled heads keep their tensors (checkpoints stay uniform) but never
    receive gradients; this count excludes them.
    """
    total = 0
    for name, shape in _param_shapes(config):
        if not config.use_rank_head and name.startswith(("rank", "relational.")):
            continue
        if not config.use_relational_attention and name == "relational.tokens":
            continue
        total += int(np.prod(shape))
    return total


class AdapterParams:
    """Named trainable tensors in a stable order."""

    def __init__(self, tensors: dict):
        self.tensors = tensors

    def __getitem__(self, name: str) -> Tensor:
        return self.tensors[name]

    def names(self):
        return list(self.tensors)

    def items(self):
        return self.tensors.items()

    @property
    def dtype(self):
        return next(iter(self.tensors.values())).dtype

    def count(self) -> int:
        return sum(t.values.size for t in self.tensors.values())

    def astype(self, dtype) -> "AdapterParams":
        return AdapterParams({n: ad.tensor(t.values, requires_grad=True, dtype=dtype)
                              for n, t in self.tensors.items()})

    def copy(self) -> "AdapterParams":
        return self.astype(self.dtype)


def init_adapter_params(config: AdapterConfig, rng: ad.Rng, dtype=np.float32) -> AdapterParams:
    """Variance-preserving normal init for weights, zeros for biases,
    ones/zeros for norm gain/bias, small normal for learnable tokens."""
    tensors = {}
    for name, shape in _param_shapes(config):
        if name.endswith(".gain"):
            values = np.ones(shape)
        elif len(shape) == 1:  # every 1-D parameter is a bias
            values = np.zeros(shape)
        elif name.endswith(".tokens"):
            values = rng.normal(shape, std=0.02)
        else:
            fan_in, fan_out = shape
            values = rng.normal(shape, std=np.sqrt(2.0 / (fan_in + fan_out)))
        tensors[name] = ad.tensor(values, requires_grad=True, dtype=dtype)
    return AdapterParams(tensors)


# ---------------------------------------------------------------------------
# encoding
# ---------------------------------------------------------------------------

def _attention(q_in: Tensor, kv_in: Tensor, params: AdapterParams, prefix: str,
               heads: int) -> Tensor:
    """Scaled dot-product attention with per-head column splits."""
    q = ad.linear(q_in, params[f"{prefix}.wq"], params[f"{prefix}.qb"])
    k = ad.linear(kv_in, params[f"{prefix}.wk"], params[f"{prefix}.kb"])
    v = ad.linear(kv_in, params[f"{prefix}.wv"], params[f"{prefix}.vb"])
    width = q.shape[1]
    dh = width // heads
    outs = []
    qs = ad.split_cols(q, [dh] * heads) if heads > 1 else (q,)
    ks = ad.split_cols(k, [dh] * heads) if heads > 1 else (k,)
    vs = ad.split_cols(v, [dh] * heads) if heads > 1 else (v,)
    for qh, kh, vh in zip(qs, ks, vs):
        scores = ad.scale(ad.matmul(qh, ad.transpose(kh)), 1.0 / np.sqrt(dh))
        outs.append(ad.matmul(ad.softmax_rows(scores), vh))
    merged = outs[0] if heads == 1 else ad.concat_cols(*outs)
    return ad.linear(merged, params[f"{prefix}.wo"], params[f"{prefix}.ob"])


def _check_item_shapes(z, w, config, where=""):
    p, t, d = config.patch_tokens, config.text_tokens, config.backbone_dim
    if z.shape != (p, d):
        raise ConfigMismatchError(f"patch matrix{where} has shape {z.shape}, expected ({p}, {d})")
    if w.shape != (t, d):
        raise ConfigMismatchError(f"text matrix{where} has shape {w.shape}, expected ({t}, {d})")


def encode(z, w, params: AdapterParams, config: AdapterConfig) -> Tensor:
    """Encode one item's patch tokens conditioned on its query text.

    z: (p, d) patch tokens; w: (t, d) text tokens. Returns (p, d') tokens.
    Inputs are treated as constants and cast to the parameter dtype.
    """
    z = np.asarray(z)
    w = np.asarray(w)
    _check_item_shapes(z, w, config)
    dtype = params.dtype
    x = ad.as_tensor(z.astype(dtype, copy=False))
    kv = ad.concat_rows(ad.as_tensor(w.astype(dtype, copy=False)), params["prompt.tokens"])
    for i in range(config.encoder_blocks):
        h = ad.layer_norm(x, params[f"enc{i}.ln1.gain"], params[f"enc{i}.ln1.bias"])
        x = ad.add(x, _attention(h, h, params, f"enc{i}.self", config.heads))
        h = ad.layer_norm(x, params[f"enc{i}.ln2.gain"], params[f"enc{i}.ln2.bias"])
        x = ad.add(x, _attention(h, kv, params, f"enc{i}.cross", config.heads))
    return ad.linear(x, params["proj.w"], params["proj.b"])


def _mlp(x: Tensor, params: AdapterParams, stem: str, blocks: int) -> Tensor:
    for i in range(blocks):
        x = ad.gelu(ad.linear(x, params[f"{stem}{i}.w"], params[f"{stem}{i}.b"]))
    return ad.linear(x, params[f"{stem}_out.w"], params[f"{stem}_out.b"])


def regression_head(z_prime: Tensor, params: AdapterParams, config: AdapterConfig) -> Tensor:
    """Scalar quality score for one encoded item (mean pool, then MLP)."""
    pooled = ad.mean_over(z_prime, axis=0)  # (1, d')
    return ad.reshape(_mlp(pooled, params, "reg", config.reg_head_blocks), ())


# ---------------------------------------------------------------------------
# relational pair head, direct form
# ---------------------------------------------------------------------------

@dataclass
class RelationalResult:
    diff: Tensor           # pooled pair vector fed to the MLP, shape (d',) or (2d',)
    output: Tensor         # scalar pair score
    attention: np.ndarray  # (heads*M, keys) rows of the attention matrix


def relational_attention(z_i: Tensor, z_j: Tensor, params: AdapterParams,
                         config: AdapterConfig) -> RelationalResult:
    """Score one ordered pair of encoded items.

    Relational tokens attend over the joint key set [z'_i; z'_j] (plus
    themselves under self_attention_pooling); each item's value readout is
    pooled over tokens and the difference (or variant fusion) is mapped to
    a scalar by the rank MLP.
    """
    p, dp, m, heads = config.patch_tokens, config.adapter_dim, config.relational_tokens, config.heads
    for name, zz in (("z_i", z_i), ("z_j", z_j)):
        if zz.shape != (p, dp):
            raise ConfigMismatchError(f"{name} has shape {zz.shape}, expected ({p}, {dp})")
    q = params["relational.tokens"]
    dh = dp // heads
    qs = ad.split_cols(q, [dh] * heads) if heads > 1 else (q,)
    zis = ad.split_cols(z_i, [dh] * heads) if heads > 1 else (z_i,)
    zjs = ad.split_cols(z_j, [dh] * heads) if heads > 1 else (z_j,)

    parts_i, parts_j, merged_parts, attn_rows = [], [], [], []
    for qh, zih, zjh in zip(qs, zis, zjs):
        inv = 1.0 / np.sqrt(dh)
        scores = ad.scale(ad.matmul(qh, ad.transpose(ad.concat_rows(zih, zjh))), inv)
        if config.self_attention_pooling:
            self_scores = ad.scale(ad.matmul(qh, ad.transpose(qh)), inv)
            a = ad.softmax_rows(ad.concat_cols(self_scores, scores))
            _, a_i, a_j = ad.split_cols(a, [m, p, p])
        else:
            a = ad.softmax_rows(scores)
            a_i, a_j = ad.split_cols(a, [p, p])
        attn_rows.append(a.values)
        o_i = ad.matmul(a_i, zih)
        o_j = ad.matmul(a_j, zjh)
        if config.merged_dot_product:
            merged_parts.append(ad.mean_over(ad.add(o_i, o_j), axis=0))
        else:
            parts_i.append(ad.mean_over(o_i, axis=0))
            parts_j.append(ad.mean_over(o_j, axis=0))

    def cat(parts):
        return parts[0] if len(parts) == 1 else ad.concat_cols(*parts)

    if config.merged_dot_product:
        vec = cat(merged_parts)
    elif config.concat_fusion:
        vec = ad.concat_cols(cat(parts_i), cat(parts_j))
    else:
        vec = ad.sub(cat(parts_i), cat(parts_j))
    out = ad.reshape(_mlp(vec, params, "rank", config.rank_head_blocks), ())
    return RelationalResult(diff=ad.reshape(vec, (vec.values.size,)), output=out,
                            attention=np.concatenate(attn_rows, axis=0))


# ---------------------------------------------------------------------------
# batched forward
# ---------------------------------------------------------------------------

@dataclass
class BatchOutput:
    scores: Tensor                 # (B,)
    pair_outputs: Tensor | None    # (n_pairs,) when a pair head ran
    embeddings: list = field(default_factory=list)  # per-item (p, d') tensors


def _pooled_pair_vectors(embeddings, pair_i, pair_j, params, config):
    """Rank-head input without relational attention: pooled z' differences."""
    pooled = ad.concat_rows(*[ad.mean_over(e, axis=0) for e in embeddings])  # (B, d')
    vi = ad.take_rows(pooled, pair_i)
    vj = ad.take_rows(pooled, pair_j)
    if config.concat_fusion:
        return ad.concat_cols(vi, vj)
    if config.merged_dot_product:
        return ad.add(vi, vj)
    return ad.sub(vi, vj)


def _relational_pair_vectors(embeddings, pair_i, pair_j, params, config):
    """Shared-work relational attention over every pair at once.

    For the joint softmax over [z'_i; z'_j], both the exponential row sums
    S and the value-weighted numerators N factor per item. With per-row
    stabilizers a (constants; the softmax value is independent of the shift)
    the pair readout is O_i[m] = f_i N_i[m] / (f_i S_i + f_j S_j)[m] with
    f = exp(a - max(a_i, a_j)), so per-item terms are computed once and
    pairs only gather, scale, and reduce.
    """
    m, dp, heads = config.relational_tokens, config.adapter_dim, config.heads
    dh = dp // heads
    n_pairs = len(pair_i)
    q = params["relational.tokens"]
    qs = ad.split_cols(q, [dh] * heads) if heads > 1 else (q,)
    emb_h = [ad.split_cols(e, [dh] * heads) if heads > 1 else (e,) for e in embeddings]

    pair_rows_i = (pair_i[:, None] * m + np.arange(m)[None, :]).reshape(-1)
    pair_rows_j = (pair_j[:, None] * m + np.arange(m)[None, :]).reshape(-1)
    head_vecs_i, head_vecs_j, head_vecs = [], [], []
    for h in range(heads):
        qh = qs[h]
        inv = 1.0 / np.sqrt(dh)
        s_rows, n_blocks, stabs = [], [], []
        for e in emb_h:
            zh = e[h]
            logits = ad.scale(ad.matmul(qh, ad.transpose(zh)), inv)  # (M, p)
            stab = logits.values.max(axis=1, keepdims=True)          # constant shift
            ex = ad.exp(ad.add_const(logits, -stab))
            s_rows.append(ad.transpose(ad.sum_over(ex, axis=1)))      # (1, M)
            n_blocks.append(ad.matmul(ex, zh))                        # (M, dh)
            stabs.append(stab[:, 0])
        s_stack = ad.concat_rows(*s_rows)      # (B, M)
        n_stack = ad.concat_rows(*n_blocks)    # (B*M, dh)
        a = np.stack(stabs)                    # (B, M) constants

        a_i, a_j = a[pair_i], a[pair_j]
        cmax = np.maximum(a_i, a_j)
        extra = None
        if config.self_attention_pooling:
            self_logits = ad.scale(ad.matmul(qh, ad.transpose(qh)), inv)
            self_stab = self_logits.values.max(axis=1, keepdims=True)
            self_ex = ad.exp(ad.add_const(self_logits, -self_stab))
            s_self = ad.transpose(ad.sum_over(self_ex, axis=1))       # (1, M)
            cmax = np.maximum(cmax, self_stab[:, 0][None, :])
            f_self = np.exp(self_stab[:, 0][None, :] - cmax)
            extra = ad.mul_const(ad.take_rows(s_self, np.zeros(n_pairs, dtype=np.int64)),
                                 f_self)
        f_i = np.exp(a_i - cmax)
        f_j = np.exp(a_j - cmax)

        z_norm = ad.add(ad.mul_const(ad.take_rows(s_stack, pair_i), f_i),
                        ad.mul_const(ad.take_rows(s_stack, pair_j), f_j))
        if extra is not None:
            z_norm = ad.add(z_norm, extra)
        w_mean = ad.reshape(ad.scale(ad.reciprocal(z_norm), 1.0 / m), (n_pairs * m, 1))

        num_i = ad.mul_const(ad.take_rows(n_stack, pair_rows_i), f_i.reshape(-1, 1))
        num_j = ad.mul_const(ad.take_rows(n_stack, pair_rows_j), f_j.reshape(-1, 1))
        if config.merged_dot_product:
            head_vecs.append(ad.sum_row_blocks(ad.mul_cols(ad.add(num_i, num_j), w_mean), m))
        elif config.concat_fusion:
            head_vecs_i.append(ad.sum_row_blocks(ad.mul_cols(num_i, w_mean), m))
            head_vecs_j.append(ad.sum_row_blocks(ad.mul_cols(num_j, w_mean), m))
        else:
            head_vecs.append(ad.sum_row_blocks(ad.mul_cols(ad.sub(num_i, num_j), w_mean), m))

    def cat(parts):
        return parts[0] if len(parts) == 1 else ad.concat_cols(*parts)

    if config.concat_fusion:
        return ad.concat_cols(cat(head_vecs_i), cat(head_vecs_j))
    return cat(head_vecs)


def forward_batch(items: Sequence, params: AdapterParams, config: AdapterConfig,
                  pairs=None) -> BatchOutput:
    """Encode a batch of (z, w) inputs; score items and, optionally, pairs.

    pairs is a sequence of (i, j) index pairs into the batch. Scores do not
    depend on whether pairs are requested; with use_rank_head=False the
    pair head never runs.
    """
    if len(items) == 0:
        raise ad.ShapeError("forward_batch needs at least one item")
    for idx, (z, w) in enumerate(items):
        _check_item_shapes(np.asarray(z), np.asarray(w), config, where=f" of item {idx}")
    embeddings = [encode(z, w, params, config) for z, w in items]

    pooled = ad.concat_rows(*[ad.mean_over(e, axis=0) for e in embeddings])  # (B, d')
    scores = ad.reshape(_mlp(pooled, params, "reg", config.reg_head_blocks), (len(items),))

    pair_outputs = None
    pair_list = [] if pairs is None else list(pairs)
    if config.use_rank_head and pair_list:
        arr = np.asarray(pair_list, dtype=np.int64)
        if arr.ndim != 2 or arr.shape[1] != 2:
            raise ad.ShapeError(f"pairs must be (i, j) tuples, got array shape {arr.shape}")
        if arr.min() < 0 or arr.max() >= len(items):
            raise ad.ShapeError("pair index out of batch range")
        if config.use_relational_attention:
            vec = _relational_pair_vectors(embeddings, arr[:, 0], arr[:, 1], params, config)
        else:
            vec = _pooled_pair_vectors(embeddings, arr[:, 0], arr[:, 1], params, config)
        pair_outputs = ad.reshape(_mlp(vec, params, "rank", config.rank_head_blocks),
                                  (len(pair_list),))
    return BatchOutput(scores=scores, pair_outputs=pair_outputs, embeddings=embeddings)
