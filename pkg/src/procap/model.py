"""Full pipeline assembly: parameters, forward passes, and captioning.

All trainable arrays live in one flat name -> Tensor dict so the optimizer,
checkpointing, and freezing can treat them uniformly. The frozen patch
encoder lives outside that dict by construction.
"""

from __future__ import annotations

import numpy as np

from . import tape
from .config import ModelConfig
from .decoder import (
    PROJ_TOKEN,
    SCENE_TOKEN,
    Vocabulary,
    caption_nll,
    detokenize,
    generate,
    init_decoder_params,
)
from .features import (
    EncoderParams,
    MaskGrid,
    downsample_gt_mask,
    encode,
    init_feature_params,
    mask_pool,
    refine,
    segment,
)
from .memory import retrieve
from .qformer import (
    QueryTokens,
    build_prompts,
    init_qformer_params,
    knowledge_encode,
    qformer_encode,
)
from .tape import Tensor

FFN_MULT = 4


class ProCapModel:
    def __init__(self, cfg: ModelConfig, vocab: Vocabulary, seed=0, params=None):
        self.cfg = cfg
        self.vocab = vocab
        self.dtype = np.dtype(cfg.dtype)
        self.encoder = EncoderParams(cfg.patch_size, cfg.encoder_dim, cfg.encoder_seed, self.dtype)
        self.params = self._init_params(seed) if params is None else params

    def _init_params(self, seed):
        cfg = self.cfg
        rng = np.random.default_rng(seed)
        store = {}

        def tok(n):
            return Tensor((rng.standard_normal((n, cfg.query_dim)) / np.sqrt(cfg.query_dim)).astype(self.dtype),
                          requires_grad=True)

        store["tok.scene"] = tok(cfg.n_query_tokens)
        store["tok.projection"] = tok(cfg.n_query_tokens)
        store["tok.knowledge"] = tok(cfg.n_knowledge_tokens)
        init_qformer_params(store, "scene", cfg.encoder_dim, cfg.query_dim,
                            cfg.qformer_layers, FFN_MULT, rng, self.dtype)
        init_qformer_params(store, "projection", cfg.refined_channels, cfg.query_dim,
                            cfg.qformer_layers, FFN_MULT, rng, self.dtype)
        init_qformer_params(store, "knowledge", 0, cfg.query_dim, cfg.qformer_layers,
                            FFN_MULT, rng, self.dtype, with_input_proj=False,
                            with_name_proj=True, dec_dim=cfg.dec_dim)
        init_feature_params(store, cfg, rng, self.dtype)
        store["phi.w"] = Tensor((rng.standard_normal((cfg.query_dim, cfg.dec_dim)) / np.sqrt(cfg.query_dim)).astype(self.dtype),
                                requires_grad=True)
        store["phi.b"] = Tensor(np.zeros(cfg.dec_dim, dtype=self.dtype), requires_grad=True)
        init_decoder_params(store, len(self.vocab), cfg.dec_dim, cfg.dec_layers,
                            FFN_MULT, rng, self.dtype)
        return store

    def trainable_names(self, freeze_decoder=False):
        names = list(self.params)
        if freeze_decoder:
            names = [n for n in names if not n.startswith("dec.")]
        return names

    # ------------------------------------------------------------------
    # forward pieces

    def vision_forward(self, images):
        coarse = encode(self.encoder, images)
        refined = refine(self.params, coarse)
        pred_mask = segment(self.params, refined)
        return coarse, refined, pred_mask

    def scene_queries(self, coarse, invariant=False):
        return qformer_encode(coarse, QueryTokens(self.params["tok.scene"], "scene"),
                              self.params, "qf.scene.", self.cfg.qformer_layers,
                              self.cfg.qformer_heads, invariant)

    def projection_queries(self, pooled, invariant=False):
        return qformer_encode(pooled, QueryTokens(self.params["tok.projection"], "projection"),
                              self.params, "qf.projection.", self.cfg.qformer_layers,
                              self.cfg.qformer_heads, invariant)

    def knowledge_queries(self, names, q_proj, invariant=False):
        return knowledge_encode(names, q_proj,
                                QueryTokens(self.params["tok.knowledge"], "knowledge"),
                                self.params, self.vocab, self.params["dec.emb"],
                                "qf.knowledge.", self.cfg.qformer_layers,
                                self.cfg.qformer_heads, invariant)

    def prompts(self, q_scene, q_proj, q_know):
        return build_prompts(q_scene, q_proj, q_know, self.params,
                             self.params["dec.emb"], SCENE_TOKEN, PROJ_TOKEN)

    def projection_queries_clean(self, image):
        """Projection-branch rows for a clean reference with an all-ones mask."""
        with tape.no_grad():
            coarse, refined, _ = self.vision_forward(np.asarray(image, dtype=self.dtype))
            ones = MaskGrid(Tensor(np.ones(refined.grid.shape[:-1], dtype=self.dtype)), "binary")
            q = self.projection_queries(mask_pool(refined, ones))
        return np.asarray(q.rows.data, dtype=np.float64)

    def retrieve_context(self, q_proj_rows, kb):
        ctx = retrieve(q_proj_rows, kb, self.cfg.top_k)
        if self.cfg.null_semantic_context:
            ctx = ctx.nullified()
        return ctx

    def forward_batch(self, images, gt_pixel_masks, kb, teacher_force_mask=False):
        """Run the pipeline on a batch; returns the pieces the losses need."""
        images = np.asarray(images, dtype=self.dtype)
        coarse, refined, pred_mask = self.vision_forward(images)
        gh, gw = refined.grid.shape[-3], refined.grid.shape[-2]
        target = np.stack([downsample_gt_mask(m, (gh, gw)).grid.data for m in gt_pixel_masks])
        target_grid = MaskGrid(Tensor(target.astype(self.dtype)), "target")
        pool_mask = target_grid if teacher_force_mask else pred_mask
        pooled = mask_pool(refined, pool_mask)
        q_scene = self.scene_queries(coarse)
        q_proj = self.projection_queries(pooled)
        contexts = [self.retrieve_context(q_proj.rows.data[b], kb)
                    for b in range(images.shape[0])]
        q_know = self.knowledge_queries([c.names for c in contexts], q_proj)
        h_s, h_p = self.prompts(q_scene, q_proj, q_know)
        return {
            "pred_mask": pred_mask,
            "target_mask": target_grid,
            "prompt_scene": h_s,
            "prompt_proj": h_p,
            "contexts": contexts,
        }

    # ------------------------------------------------------------------
    # captioning

    def caption_nll(self, prompt, gt_ids):
        vec = prompt.vectors if hasattr(prompt, "vectors") else prompt
        return caption_nll(vec, gt_ids, self.params, self.cfg.dec_layers, self.cfg.dec_heads)

    def generate_caption(self, prompt, mode="greedy", beam_width=3):
        vec = prompt.vectors if hasattr(prompt, "vectors") else prompt
        seq = generate(vec.detach() if hasattr(vec, "detach") else vec, self.params,
                       self.vocab, self.cfg.max_caption_len - 2, mode, beam_width,
                       self.cfg.dec_layers, self.cfg.dec_heads)
        return seq

    def caption_image(self, image, kb, task, mode="greedy", beam_width=3):
        """One image -> one caption string for task "scene" or "proj"."""
        if task not in ("scene", "proj"):
            raise ValueError("task must be 'scene' or 'proj'")
        with tape.no_grad():
            image = np.asarray(image, dtype=self.dtype)
            coarse, refined, pred_mask = self.vision_forward(image)
            pooled = mask_pool(refined, pred_mask)
            q_scene = self.scene_queries(coarse)
            q_proj = self.projection_queries(pooled)
            ctx = self.retrieve_context(q_proj.rows.data, kb)
            q_know = self.knowledge_queries(ctx.names, q_proj)
            h_s, h_p = self.prompts(q_scene, q_proj, q_know)
            prompt = h_s if task == "scene" else h_p
            seq = self.generate_caption(prompt, mode, beam_width)
        return detokenize(seq, self.vocab)
