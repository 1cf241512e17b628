"""Tokenizer, vocabulary, and a small causal transformer caption decoder.

The decoder conditions purely on prefix embeddings (prompt rows) followed by
embedded caption tokens. Sinusoidal positions are added to caption tokens
only, indexed from the caption start, so decoder-only language-model
pretraining (no prompt) and prompted decoding see tokens at the same
positions. The output projection is tied to the embedding table.
"""

from __future__ import annotations

import re
from dataclasses import dataclass, field

import numpy as np

from . import tape
from .errors import EmptyCorpus, EmptySequence
from .layers import attention, causal_mask, ffn, layer_norm
from .qformer import _attn_param_slice
from .tape import Tensor

PAD, BOS, EOS, UNK, NULL, SCENE_TOKEN, PROJ_TOKEN = range(7)
RESERVED = ["<pad>", "<bos>", "<eos>", "<unk>", "<null>", "[SCENE]", "[PROJ]"]

_WORD_RE = re.compile(r"[^a-z0-9]+")


def normalize_words(text):
    """Lowercase, punctuation to spaces, whitespace split."""
    return [w for w in _WORD_RE.sub(" ", text.lower()).split() if w]


class Vocabulary:
    """Reserved ids 0-6, then the training-caption words in lexicographic order."""

    def __init__(self, tokens):
        if list(tokens[:7]) != RESERVED:
            raise ValueError("vocabulary must start with the reserved tokens")
        self.tokens = list(tokens)
        self.index = {t: i for i, t in enumerate(self.tokens)}

    @classmethod
    def from_corpus(cls, captions):
        words = sorted({w for c in captions for w in normalize_words(c)})
        return cls(RESERVED + words)

    def __len__(self):
        return len(self.tokens)

    def encode_words(self, words):
        return [self.index.get(w, UNK) for w in words]

    def encode_name(self, name):
        """Object-name tokens for the knowledge branch; "" is the null name."""
        if name == "":
            return [NULL]
        ids = self.encode_words(normalize_words(name))
        return ids if ids else [NULL]


@dataclass
class TokenSequence:
    ids: list
    max_len: int = 32

    def __post_init__(self):
        if len(self.ids) > self.max_len:
            raise ValueError(f"sequence of {len(self.ids)} exceeds max length {self.max_len}")

    def body(self):
        return [i for i in self.ids if i not in (PAD, BOS, EOS)]


def tokenize(text, vocab: Vocabulary, max_len=32) -> TokenSequence:
    """Ground-truth form: <bos> words <eos>, truncated to fit max_len."""
    ids = vocab.encode_words(normalize_words(text))[: max_len - 2]
    return TokenSequence([BOS] + ids + [EOS], max_len)


def detokenize(ids, vocab: Vocabulary) -> str:
    words = [vocab.tokens[i] for i in (ids.ids if isinstance(ids, TokenSequence) else ids)
             if i >= len(RESERVED)]
    return " ".join(words)


def _decode_stack(params, x, n_layers, n_heads, mask):
    for i in range(n_layers):
        lp = f"dec.layer{i}."
        x = layer_norm(tape.add(x, attention(x, x, _attn_param_slice(params, lp + "self."),
                                             n_heads, mask=mask)),
                       params[lp + "ln1.g"], params[lp + "ln1.b"])
        x = layer_norm(tape.add(x, ffn(x, params[lp + "ffn.w1"], params[lp + "ffn.b1"],
                                       params[lp + "ffn.w2"], params[lp + "ffn.b2"])),
                       params[lp + "ln2.g"], params[lp + "ln2.b"])
    return x


POS_SCALE = 0.3  # position signal stays comparable to token-content signal


def _positions(n, d, dtype):
    pos = np.arange(n, dtype=np.float64)[:, None]
    freq = 10000.0 ** (-2.0 * np.arange(d // 2, dtype=np.float64) / d)
    ang = pos * freq[None, :]
    out = np.zeros((n, d))
    out[:, 0::2] = np.sin(ang)
    out[:, 1::2] = np.cos(ang)
    return (POS_SCALE * out).astype(dtype)


def _token_rows(params, ids, dtype):
    emb = tape.embedding(params["dec.emb"], np.asarray(ids, dtype=np.int64))
    T = np.asarray(ids).shape[-1]
    return tape.add(emb, Tensor(_positions(T, emb.shape[-1], dtype)))


def decoder_logits(params, prompt, token_ids, n_layers, n_heads):
    """Hidden states over [prompt rows ; embedded tokens], projected onto the
    tied embedding table. token_ids: (T,) or (B, T)."""
    dtype = params["dec.emb"].dtype
    tok = _token_rows(params, token_ids, dtype)
    if prompt is None:
        x = tok
        P = 0
    else:
        if tok.ndim == 3 and prompt.ndim == 2:
            prompt = tape.add(prompt, Tensor(np.zeros((tok.shape[0], 1, 1), dtype=dtype)))
        x = tape.concat([prompt, tok], axis=-2)
        P = prompt.shape[-2]
    L = x.shape[-2]
    h = _decode_stack(params, x, n_layers, n_heads, causal_mask(L, dtype))
    logits = tape.matmul(h, tape.swapaxes(params["dec.emb"], -1, -2))
    return logits, P


def caption_nll(prompt, gt_ids, params, n_layers=2, n_heads=4):
    """Teacher-forced mean negative log-likelihood of the ground truth.

    prompt: (P, D) or (B, P, D) rows, or None. gt_ids: list/array of token
    ids, (T,) or (B, T); starts with <bos>; <pad> targets are excluded so
    trailing padding never changes the loss.
    """
    ids = np.asarray(gt_ids, dtype=np.int64)
    batched = ids.ndim == 2
    if ids.shape[-1] < 2:
        raise EmptySequence("need at least <bos> and one target token")
    inputs = ids[..., :-1]
    targets = ids[..., 1:]
    logits, P = decoder_logits(params, prompt, inputs, n_layers, n_heads)
    sl = (slice(None), slice(P, None)) if batched else (slice(P, None),)
    step_logits = logits[sl]
    lse = tape.logsumexp(step_logits, axis=-1)
    picked = tape.gather_last(step_logits, targets)
    nll = tape.sub(lse, picked)
    include = (targets != PAD).astype(nll.dtype)
    counts = include.sum(axis=-1)
    if np.any(counts == 0):
        raise EmptySequence("a sequence has no non-pad targets")
    weighted = tape.tsum(tape.mul(nll, Tensor(include)), axis=-1)
    if batched:
        per = tape.mul(weighted, Tensor((1.0 / counts).astype(nll.dtype)))
        return tape.mean(per)
    return weighted * float(1.0 / counts)


def generate(prompt, params, vocab, max_len=32, mode="greedy", beam_width=3,
             n_layers=2, n_heads=4) -> TokenSequence:
    """Autoregressive decoding from <bos>.

    Greedy takes the argmax each step (ties resolve to the lowest id) and is
    a pure function of (prompt, params). Beam mode ranks candidates by mean
    log-probability. Generation stops at <eos> or after max_len body tokens.
    """
    with tape.no_grad():
        if mode == "greedy":
            ids = [BOS]
            while len(ids) - 1 < max_len:
                logits, _ = decoder_logits(params, prompt, ids, n_layers, n_heads)
                nxt = int(np.argmax(logits.data[-1]))
                if nxt == EOS:
                    break
                ids.append(nxt)
            return TokenSequence(ids + [EOS], max_len + 2)
        if mode != "beam":
            raise ValueError(f"unknown mode {mode!r}")
        beams = [([BOS], 0.0, False)]
        for _ in range(max_len):
            grown = []
            for ids, logp, done in beams:
                if done:
                    grown.append((ids, logp, done))
                    continue
                logits, _ = decoder_logits(params, prompt, ids, n_layers, n_heads)
                z = logits.data[-1]
                logprobs = z - (np.log(np.exp(z - z.max()).sum()) + z.max())
                for tok in np.argsort(-logprobs, kind="stable")[:beam_width]:
                    tok = int(tok)
                    grown.append((ids + [tok], logp + float(logprobs[tok]), tok == EOS))
            beams = sorted(grown, key=lambda b: (-b[1] / max(len(b[0]) - 1, 1), b[0]))[:beam_width]
            if all(done for _, _, done in beams):
                break
        ids = beams[0][0]
        if ids[-1] != EOS:
            ids = ids + [EOS]
        return TokenSequence(ids, max_len + 2)


def decoder_param_names(params):
    return [k for k in params if k.startswith("dec.")]


def init_decoder_params(store, vocab_size, d, n_layers, ffn_mult, rng, dtype):
    def w(shape):
        fan_in = shape[-2] if len(shape) > 1 else shape[0]
        return Tensor((rng.standard_normal(shape) / np.sqrt(fan_in)).astype(dtype),
                      requires_grad=True)

    def zeros(shape):
        return Tensor(np.zeros(shape, dtype=dtype), requires_grad=True)

    def ones(shape):
        return Tensor(np.ones(shape, dtype=dtype), requires_grad=True)

    # embedding rows at unit-ish norm; also the tied output projection
    store["dec.emb"] = Tensor((rng.standard_normal((vocab_size, d)) / np.sqrt(d)).astype(dtype),
                              requires_grad=True)
    for i in range(n_layers):
        lp = f"dec.layer{i}."
        for nm in ("wq", "wk", "wv", "wo"):
            store[lp + "self." + nm] = w((d, d))
        for nm in ("bq", "bk", "bv", "bo"):
            store[lp + "self." + nm] = zeros(d)
        store[lp + "ffn.w1"] = w((d, ffn_mult * d))
        store[lp + "ffn.b1"] = zeros(ffn_mult * d)
        store[lp + "ffn.w2"] = w((ffn_mult * d, d))
        store[lp + "ffn.b2"] = zeros(d)
        for ln in ("ln1", "ln2"):
            store[lp + ln + ".g"] = ones(d)
            store[lp + ln + ".b"] = zeros(d)


def pretrain_decoder(captions, params, vocab, cfg, n_layers=2, n_heads=4, max_len=32):
    """Next-token language modeling on caption text alone (no prompts).

    Returns the per-epoch mean losses; parameters are updated in place via
    the shared AdamW machinery.
    """
    from .training import AdamW  # local import to avoid a cycle

    if not captions:
        raise EmptyCorpus("no captions to pretrain on")
    seqs = [tokenize(c, vocab, max_len).ids for c in captions]
    rng = np.random.default_rng(cfg.seed)
    names = decoder_param_names(params)
    opt = AdamW({k: params[k] for k in names}, beta1=cfg.beta1, beta2=cfg.beta2,
                eps=cfg.adam_eps, weight_decay=0.0)
    losses = []
    batch = max(1, min(cfg.batch_size, len(seqs)))
    for _ in range(cfg.pretrain_epochs):
        order = rng.permutation(len(seqs))
        epoch_losses = []
        for lo in range(0, len(seqs), batch):
            chunk = [seqs[i] for i in order[lo:lo + batch]]
            tmax = max(len(s) for s in chunk)
            padded = np.full((len(chunk), tmax), PAD, dtype=np.int64)
            for r, s in enumerate(chunk):
                padded[r, :len(s)] = s
            for k in names:
                params[k].zero_grad()
            loss = caption_nll(None, padded, params, n_layers, n_heads)
            loss.backward()
            opt.step(cfg.pretrain_lr)
            epoch_losses.append(float(loss.data))
        losses.append(float(np.mean(epoch_losses)))
    return losses
