"""Dual-captioning evaluation: BLEU@4, CIDEr-D, a METEOR-style score, reports.

Scene and projection captions are generated once per sample and scored
against their own ground-truth sets, fully independently; results aggregate
per (task, metric, subset). The METEOR-style score uses exact unigram
matching only (no synonym or stem lexicon) and every report says so.
"""

from __future__ import annotations

import json
from collections import Counter
from dataclasses import dataclass, field

import numpy as np

from . import tape
from .compose import load_dataset
from .decoder import detokenize, normalize_words, tokenize
from .errors import CorpusTooSmall, EmptyCorpus, EmptyEvalSplit
from .features import downsample_gt_mask, mask_pool

METRIC_NOTES = [
    "bleu4: corpus-level, clipped n-gram precisions n=1..4, uniform 0.25 weights, "
    "closest-reference-length brevity penalty; zero if any n-gram precision is zero",
    "cider_d: tf-idf n-gram cosine (n=1..4), idf = ln(corpus/df) over reference sets, "
    "hypothesis counts clipped to the per-image reference maximum, gaussian length "
    "penalty sigma=6, scores scaled by 10",
    "meteor_lite: exact-unigram alignment only (no synonyms, no stemming); NOT "
    "comparable to official METEOR numbers",
    "spice: not implemented (needs a dependency parser and scene-graph matcher)",
]


def _ngrams(tokens, n):
    return Counter(tuple(tokens[i:i + n]) for i in range(len(tokens) - n + 1))


def bleu4(pairs):
    """Corpus-level BLEU@4 over (hypothesis_tokens, [reference_tokens...]) pairs."""
    if not pairs:
        raise EmptyCorpus("bleu4 needs a non-empty corpus")
    num = [0] * 4
    den = [0] * 4
    hyp_len = 0
    ref_len = 0
    for hyp, refs in pairs:
        hyp_len += len(hyp)
        # closest reference length; ties resolve to the shorter reference
        ref_len += min((abs(len(r) - len(hyp)), len(r)) for r in refs)[1]
        for n in range(1, 5):
            hc = _ngrams(hyp, n)
            max_ref = Counter()
            for r in refs:
                rc = _ngrams(r, n)
                for g, c in rc.items():
                    max_ref[g] = max(max_ref[g], c)
            num[n - 1] += sum(min(c, max_ref[g]) for g, c in hc.items())
            den[n - 1] += max(len(hyp) - n + 1, 0)
    if any(n == 0 or d == 0 for n, d in zip(num, den)):
        return 0.0
    log_p = sum(0.25 * np.log(n / d) for n, d in zip(num, den))
    bp = 1.0 if hyp_len > ref_len else float(np.exp(1.0 - ref_len / hyp_len)) if hyp_len > 0 else 0.0
    return float(bp * np.exp(log_p))


def cider_d(items, sigma=6.0):
    """CIDEr-D over (hypothesis_tokens, [reference_tokens...]) items.

    Per n in 1..4: tf-idf vectors with idf = ln(N / df) where df counts the
    reference sets containing the n-gram; hypothesis counts are clipped to
    the reference maximum for that image; per-reference score is
    10 * cos * exp(-(len_h - len_r)^2 / (2 sigma^2)); empty-vector cosines
    are 0. Returns (corpus_mean, per_item_scores).
    """
    if len(items) < 2:
        raise CorpusTooSmall("cider_d needs a corpus of at least 2 items")
    n_docs = len(items)
    df = [Counter() for _ in range(4)]
    for _, refs in items:
        for n in range(1, 5):
            seen = set()
            for r in refs:
                seen.update(_ngrams(r, n))
            for g in seen:
                df[n - 1][g] += 1

    def tfidf(counts, n):
        return {g: c * np.log(n_docs / df[n - 1][g]) for g, c in counts.items() if df[n - 1][g] > 0}

    def cos(a, b):
        if not a or not b:
            return 0.0
        dot = sum(v * b[g] for g, v in a.items() if g in b)
        na = np.sqrt(sum(v * v for v in a.values()))
        nb = np.sqrt(sum(v * v for v in b.values()))
        if na == 0 or nb == 0:
            return 0.0
        return float(dot / (na * nb))

    scores = []
    for hyp, refs in items:
        per_n = []
        for n in range(1, 5):
            hc = _ngrams(hyp, n)
            max_ref = Counter()
            for r in refs:
                for g, c in _ngrams(r, n).items():
                    max_ref[g] = max(max_ref[g], c)
            clipped = Counter({g: min(c, max_ref[g]) for g, c in hc.items()})
            hv = tfidf(clipped, n)
            ref_scores = []
            for r in refs:
                rv = tfidf(_ngrams(r, n), n)
                penalty = float(np.exp(-((len(hyp) - len(r)) ** 2) / (2.0 * sigma * sigma)))
                ref_scores.append(10.0 * cos(hv, rv) * penalty)
            per_n.append(sum(ref_scores) / len(refs))
        scores.append(sum(per_n) / 4.0)
    return float(np.mean(scores)), scores


def _min_chunk_alignment(hyp, ref):
    """Exact search: maximize matched unigrams, then minimize chunk count."""
    hc = Counter(hyp)
    rc = Counter(ref)
    quota = {w: min(hc[w], rc[w]) for w in hc if w in rc}
    m = sum(quota.values())
    if m == 0:
        return 0, 0
    skip_budget = {w: hc[w] - quota[w] for w in quota}
    ref_pos = {}
    for j, w in enumerate(ref):
        ref_pos.setdefault(w, []).append(j)

    best = [m + 1]

    def dfs(i, used, prev, chunks, quota, skips):
        if chunks >= best[0]:
            return
        if i == len(hyp):
            if all(v == 0 for v in quota.values()):
                best[0] = min(best[0], chunks)
            return
        w = hyp[i]
        if w in quota:
            if quota[w] > 0:
                # prefer continuing the current chunk so pruning bites early
                candidates = [j for j in ref_pos[w] if j not in used]
                candidates.sort(key=lambda j: (j != prev + 1, j))
                for j in candidates:
                    dfs(i + 1, used | {j}, j, chunks + (j != prev + 1),
                        {**quota, w: quota[w] - 1}, skips)
            if skips.get(w, 0) > 0:
                dfs(i + 1, used, -5, chunks, quota, {**skips, w: skips[w] - 1})
        else:
            dfs(i + 1, used, -5, chunks, quota, skips)

    dfs(0, frozenset(), -5, 0, dict(quota), dict(skip_budget))
    return m, best[0]


def meteor_lite(hyp, refs, alpha=0.9):
    """Exact-match METEOR-style score against the best reference.

    F = P*R / (alpha*P + (1-alpha)*R), penalty = 0.5 * (chunks/matches)^3,
    score = F * (1 - penalty); 0 when nothing matches.
    """
    best = 0.0
    for ref in refs:
        if not hyp or not ref:
            continue
        m, chunks = _min_chunk_alignment(hyp, ref)
        if m == 0:
            continue
        p = m / len(hyp)
        r = m / len(ref)
        f = p * r / (alpha * p + (1 - alpha) * r)
        penalty = 0.5 * (chunks / m) ** 3
        best = max(best, f * (1.0 - penalty))
    return best


# ---------------------------------------------------------------------------
# the dual-captioning protocol

@dataclass
class EvalRecord:
    sample_id: str
    generated_scene: str
    generated_proj: str
    gt_scene: list
    gt_proj: list
    subset: str

    def __post_init__(self):
        if not self.gt_scene or not self.gt_proj:
            raise EmptyEvalSplit(f"sample {self.sample_id!r}: empty ground-truth caption list")


@dataclass
class EvalReport:
    results: dict = field(default_factory=dict)   # task -> subset -> metric -> value
    meta: dict = field(default_factory=dict)

    def cell(self, task, subset, metric):
        return self.results[task][subset][metric]


def _tok(text):
    return normalize_words(text)


def score_records(records) -> dict:
    """Aggregate metric cells per (task, subset) from finished records."""
    subsets = sorted({r.subset for r in records})
    results = {"scene": {}, "projection": {}}
    for subset in subsets:
        group = [r for r in records if r.subset == subset]
        for task, hyp_of, gt_of in (
            ("scene", lambda r: r.generated_scene, lambda r: r.gt_scene),
            ("projection", lambda r: r.generated_proj, lambda r: r.gt_proj),
        ):
            pairs = [(_tok(hyp_of(r)), [_tok(g) for g in gt_of(r)]) for r in group]
            cell = {
                "bleu4": bleu4(pairs),
                "meteor_lite": float(np.mean([meteor_lite(h, rs) for h, rs in pairs])),
                "cider_d": cider_d(pairs)[0] if len(pairs) >= 2 else float("nan"),
                "n": len(pairs),
            }
            results[task][subset] = cell
    return results


def generate_records(model, kb, samples, scenes, sources, splits=("eval",)) -> list:
    """Run the pipeline once per sample and collect both captions."""
    chosen = [s for s in samples if s.split in splits]
    if not chosen:
        raise EmptyEvalSplit(f"no samples in split(s) {splits}")
    records = []
    for s in chosen:
        with tape.no_grad():
            image = np.asarray(s.composite_image, dtype=model.dtype)
            coarse, refined, pred_mask = model.vision_forward(image)
            pooled = mask_pool(refined, pred_mask)
            q_scene = model.scene_queries(coarse)
            q_proj = model.projection_queries(pooled)
            ctx = model.retrieve_context(q_proj.rows.data, kb)
            q_know = model.knowledge_queries(ctx.names, q_proj)
            h_s, h_p = model.prompts(q_scene, q_proj, q_know)
            cap_s = detokenize(model.generate_caption(h_s), model.vocab)
            cap_p = detokenize(model.generate_caption(h_p), model.vocab)
        records.append(EvalRecord(s.sample_id, cap_s, cap_p,
                                  list(scenes[s.scene_id].scene_captions),
                                  list(sources[s.source_id].source_captions),
                                  s.split))
    return records


def evaluate_dual(model, kb, manifest_path, out_path=None, splits=("eval",),
                  meta=None) -> EvalReport:
    """Generate and score both captions per sample; write report files.

    Scene hypotheses are scored only against scene ground truth and
    projection hypotheses only against projection ground truth; subsets
    (split names here) aggregate independently.
    """
    samples, scenes, sources = load_dataset(manifest_path)
    records = generate_records(model, kb, samples, scenes, sources, splits)
    report = EvalReport(score_records(records))
    report.meta = {
        "manifest": str(manifest_path),
        "metric_notes": METRIC_NOTES,
        **(meta or {}),
    }
    if out_path is not None:
        with open(out_path, "w", encoding="utf-8") as fh:
            json.dump({"meta": report.meta, "results": report.results}, fh, indent=1)
            fh.write("\n")
        with open(str(out_path) + ".txt", "w", encoding="utf-8") as fh:
            fh.write(format_report_table(report))
    return report


def format_report_table(report: EvalReport) -> str:
    """Plain-text metric table, one row per (task, subset)."""
    lines = []
    header = f"{'task':<12} {'subset':<8} {'B@4':>8} {'M-lite':>8} {'CIDEr-D':>9} {'n':>5}"
    lines.append(header)
    lines.append("-" * len(header))
    for task in ("scene", "projection"):
        for subset, cell in sorted(report.results.get(task, {}).items()):
            lines.append(f"{task:<12} {subset:<8} {cell['bleu4']:>8.4f} "
                         f"{cell['meteor_lite']:>8.4f} {cell['cider_d']:>9.4f} {cell['n']:>5d}")
    lines.append("")
    for note in report.meta.get("metric_notes", []):
        lines.append(f"note: {note}")
    return "\n".join(lines) + "\n"


def exact_match_rates(model, kb, samples, scenes, sources, splits=("train",)):
    """Greedy captions compared verbatim (after normalization) to GT sets."""
    chosen = [s for s in samples if s.split in splits]
    if not chosen:
        raise EmptyEvalSplit(f"no samples in split(s) {splits}")
    hits_s = hits_p = 0
    for s in chosen:
        cap_s = model.caption_image(s.composite_image, kb, "scene")
        cap_p = model.caption_image(s.composite_image, kb, "proj")
        gts = [" ".join(_tok(c)) for c in scenes[s.scene_id].scene_captions]
        gtp = [" ".join(_tok(c)) for c in sources[s.source_id].source_captions]
        hits_s += cap_s in gts
        hits_p += cap_p in gtp
    n = len(chosen)
    return hits_s / n, hits_p / n


def mask_iou(model, samples, splits=("train",), threshold=0.5):
    """Mean IoU of thresholded predicted masks vs thresholded GT coverage."""
    chosen = [s for s in samples if s.split in splits]
    ious = []
    for s in chosen:
        with tape.no_grad():
            _, _, pm = model.vision_forward(np.asarray(s.composite_image, dtype=model.dtype))
        pred = pm.grid.data >= threshold
        tgt = downsample_gt_mask(s.gt_mask_pixel, pred.shape).grid.data >= threshold
        union = np.logical_or(pred, tgt).sum()
        inter = np.logical_and(pred, tgt).sum()
        ious.append(1.0 if union == 0 else inter / union)
    return float(np.mean(ious))
