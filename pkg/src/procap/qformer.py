"""Query-token cross-attention encoders and dual prompt assembly.

Three encoders share one block structure (self-attention over the queries,
cross-attention to a key/value set, feed-forward; residual + layer norm after
each): the scene branch reads coarse features, the projection branch reads
mask-gated refined features, and the knowledge branch reads retrieved name
vectors concatenated with the projection queries. Feature keys carry no
positional encoding, so cross-attention treats them as an unordered set.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tape
from .errors import DimensionMismatch
from .features import FeatureGrid
from .layers import attention, ffn, layer_norm, linear
from .tape import Tensor


@dataclass
class QueryTokens:
    tokens: Tensor               # (L, D_q), trainable
    owner: str                   # "scene" | "projection" | "knowledge"


@dataclass
class QuerySet:
    rows: Tensor                 # (L, D_q) or (B, L, D_q)
    branch: str


@dataclass
class PromptEmbedding:
    vectors: Tensor              # (P, D_dec) or (B, P, D_dec)
    task: str                    # "scene" | "projection"


def _attn_param_slice(params, prefix):
    return {k: params[prefix + k] for k in ("wq", "wk", "wv", "wo", "bq", "bk", "bv", "bo")}


def _blocks(params, prefix, x, kv, n_layers, n_heads, invariant):
    for i in range(n_layers):
        lp = f"{prefix}layer{i}."
        x = layer_norm(tape.add(x, attention(x, x, _attn_param_slice(params, lp + "self."), n_heads)),
                       params[lp + "ln1.g"], params[lp + "ln1.b"])
        x = layer_norm(tape.add(x, attention(x, kv, _attn_param_slice(params, lp + "cross."), n_heads,
                                             invariant=invariant)),
                       params[lp + "ln2.g"], params[lp + "ln2.b"])
        x = layer_norm(tape.add(x, ffn(x, params[lp + "ffn.w1"], params[lp + "ffn.b1"],
                                       params[lp + "ffn.w2"], params[lp + "ffn.b2"])),
                       params[lp + "ln3.g"], params[lp + "ln3.b"])
    return x


def _broadcast_tokens(tokens, kv):
    # (L, D) tokens against (B, N, D) keys -> (B, L, D) query stack
    if kv.ndim == 3:
        B = kv.shape[0]
        zeros = Tensor(np.zeros((B, 1, 1), dtype=tokens.dtype))
        return tape.add(tokens, zeros)
    return tokens


def qformer_encode(features, tokens: QueryTokens, params, prefix,
                   n_layers=2, n_heads=4, invariant=False) -> QuerySet:
    """Fixed-length query set attending over flattened feature cells.

    Output row count equals the query-token count no matter how many feature
    cells come in.
    """
    grid = features.grid if isinstance(features, FeatureGrid) else features
    if grid.ndim == 4:
        B, hf, wf, C = grid.shape
        flat = tape.reshape(grid, (B, hf * wf, C))
    elif grid.ndim == 3:
        hf, wf, C = grid.shape
        flat = tape.reshape(grid, (hf * wf, C))
    else:
        raise DimensionMismatch(f"expected a feature grid, got shape {grid.shape}")
    if params[prefix + "in.w"].shape[0] != C:
        raise DimensionMismatch(
            f"{prefix} input projection expects {params[prefix + 'in.w'].shape[0]} channels, got {C}")
    kv = linear(flat, params[prefix + "in.w"], params[prefix + "in.b"])
    x = _broadcast_tokens(tokens.tokens, kv)
    out = _blocks(params, prefix, x, kv, n_layers, n_heads, invariant)
    return QuerySet(out, tokens.owner)


def embed_names(names, vocab, emb_table, name_w, name_b):
    """Token-embed and mean-pool each name, then map into query space.

    names: list of strings, or list of lists for a batch. The null name ""
    contributes the embedding of the dedicated null token.
    """
    batched = names and isinstance(names[0], (list, tuple))
    groups = names if batched else [names]
    K = len(groups[0])
    tok_ids = [[vocab.encode_name(n) for n in g] for g in groups]
    tmax = max(len(ids) for g in tok_ids for ids in g)
    pad_ids = np.zeros((len(groups), K, tmax), dtype=np.int64)
    weights = np.zeros((len(groups), K, tmax, 1))
    for b, g in enumerate(tok_ids):
        for k, ids in enumerate(g):
            pad_ids[b, k, :len(ids)] = ids
            weights[b, k, :len(ids), 0] = 1.0 / len(ids)
    emb = tape.embedding(emb_table, pad_ids)                       # (B, K, T, D_dec)
    pooled = tape.tsum(tape.mul(emb, Tensor(weights.astype(emb.dtype))), axis=2)
    vecs = linear(pooled, name_w, name_b)                          # (B, K, D_q)
    if not batched:
        vecs = tape.reshape(vecs, (K, vecs.shape[-1]))
    return vecs


def knowledge_encode(context_names, q_proj: QuerySet, tokens: QueryTokens, params, vocab,
                     emb_table, prefix="qf.knowledge.", n_layers=2, n_heads=4,
                     invariant=False) -> QuerySet:
    """Distill retrieved names plus projection queries into knowledge queries.

    The cross-attention key/value set is [K name vectors ; L_q projection
    query rows]; the block structure matches qformer_encode.
    """
    rows = q_proj.rows if isinstance(q_proj, QuerySet) else q_proj
    name_vecs = embed_names(context_names, vocab, emb_table,
                            params[prefix + "name.w"], params[prefix + "name.b"])
    if name_vecs.ndim != rows.ndim:
        raise DimensionMismatch("context batch shape does not match projection queries")
    if name_vecs.shape[-1] != rows.shape[-1]:
        raise DimensionMismatch(
            f"name vectors dim {name_vecs.shape[-1]} != query dim {rows.shape[-1]}")
    kv = tape.concat([name_vecs, rows], axis=-2)
    x = _broadcast_tokens(tokens.tokens, kv)
    out = _blocks(params, prefix, x, kv, n_layers, n_heads, invariant)
    return QuerySet(out, "knowledge")


def build_prompts(q_scene: QuerySet, q_proj: QuerySet, q_know: QuerySet,
                  params, emb_table, scene_token_id, proj_token_id):
    """Assemble [task token ; projected query rows] for both tasks.

    One shared linear map phi carries every query set into decoder space:
      scene prompt      = [emb(scene token) ; phi(Q_s)]
      projection prompt = [emb(proj token)  ; phi(Q_p) ; phi(Q_k)]
    """
    phi_w, phi_b = params["phi.w"], params["phi.b"]
    hs_body = linear(q_scene.rows, phi_w, phi_b)
    hp_body = tape.concat([linear(q_proj.rows, phi_w, phi_b),
                           linear(q_know.rows, phi_w, phi_b)], axis=-2)

    def task_row(tid, like):
        row = tape.embedding(emb_table, np.array([tid]))           # (1, D_dec)
        if like.ndim == 3:
            B = like.shape[0]
            row = tape.add(row, Tensor(np.zeros((B, 1, 1), dtype=row.dtype)))
        return row

    h_s = tape.concat([task_row(scene_token_id, hs_body), hs_body], axis=-2)
    h_p = tape.concat([task_row(proj_token_id, hp_body), hp_body], axis=-2)
    return PromptEmbedding(h_s, "scene"), PromptEmbedding(h_p, "projection")


def init_qformer_params(store, name, in_dim, d_q, n_layers, ffn_mult, rng, dtype,
                        with_input_proj=True, with_name_proj=False, dec_dim=None):
    """Register one encoder branch's parameters under prefix qf.<name>."""
    prefix = f"qf.{name}."

    def w(shape):
        fan_in = int(np.prod(shape[:-1]))
        return Tensor((rng.standard_normal(shape) / np.sqrt(fan_in)).astype(dtype),
                      requires_grad=True)

    def zeros(shape):
        return Tensor(np.zeros(shape, dtype=dtype), requires_grad=True)

    def ones(shape):
        return Tensor(np.ones(shape, dtype=dtype), requires_grad=True)

    if with_input_proj:
        store[prefix + "in.w"] = w((in_dim, d_q))
        store[prefix + "in.b"] = zeros(d_q)
    if with_name_proj:
        store[prefix + "name.w"] = w((dec_dim, d_q))
        store[prefix + "name.b"] = zeros(d_q)
    for i in range(n_layers):
        lp = f"{prefix}layer{i}."
        for blk in ("self.", "cross."):
            for nm in ("wq", "wk", "wv", "wo"):
                store[lp + blk + nm] = w((d_q, d_q))
            for nm in ("bq", "bk", "bv", "bo"):
                store[lp + blk + nm] = zeros(d_q)
        store[lp + "ffn.w1"] = w((d_q, ffn_mult * d_q))
        store[lp + "ffn.b1"] = zeros(ffn_mult * d_q)
        store[lp + "ffn.w2"] = w((ffn_mult * d_q, d_q))
        store[lp + "ffn.b2"] = zeros(d_q)
        for ln in ("ln1", "ln2", "ln3"):
            store[lp + ln + ".g"] = ones(d_q)
            store[lp + ln + ".b"] = zeros(d_q)
    return prefix
