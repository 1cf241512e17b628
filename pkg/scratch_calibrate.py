"""Scratch calibration of the end-to-end overfit path (not part of the package)."""
import numpy as np, time, tempfile, os, sys
from procap.config import ModelConfig, TrainConfig, SynthConfig
from procap.decoder import Vocabulary, tokenize, detokenize
from procap.model import ProCapModel
from procap.memory import build_kb
from procap import compose as C
from procap.training import train_model

steps = int(sys.argv[1]) if len(sys.argv) > 1 else 1500
t_all = time.time()
tmp = tempfile.mkdtemp()
C.synth_dataset(SynthConfig(n_scenes=4, n_sources=8, seed=0), tmp)
samples, scenes, sources = C.load_dataset(os.path.join(tmp, "manifest.json"))
caps = [c for s in scenes.values() for c in s.scene_captions] + [c for s in sources.values() for c in s.source_captions]
vocab = Vocabulary.from_corpus(caps)
print("vocab", len(vocab), flush=True)

mcfg = ModelConfig()
model = ProCapModel(mcfg, vocab, seed=0)

t0 = time.time()
from procap.decoder import pretrain_decoder
tcfg = TrainConfig(warmup_steps=100, total_steps=steps, batch_size=8, seed=0)
losses = pretrain_decoder(caps, model.params, vocab, tcfg, mcfg.dec_layers, mcfg.dec_heads, mcfg.max_caption_len)
print(f"pretrain {len(losses)} epochs {time.time()-t0:.1f}s loss {losses[0]:.3f} -> {losses[-1]:.3f}", flush=True)

kb = build_kb(model, [(so.source_image, so.object_name) for so in sources.values()])
print("kb built", len(kb.entries), flush=True)

t0 = time.time()
rows = train_model(model, samples, scenes, sources, kb, tcfg, progress=200)
print(f"train {steps} steps {(time.time()-t0)/60:.1f} min", flush=True)
print("final:", rows[-1][2], flush=True)

# exact match on train split + IoU
train = [s for s in samples if s.split == "train"]
hit_s = hit_p = 0
ious = []
for s in train:
    cs = model.caption_image(s.composite_image, kb, "scene")
    cp = model.caption_image(s.composite_image, kb, "proj")
    gt_s = [detokenize(tokenize(c, vocab).ids, vocab) for c in scenes[s.scene_id].scene_captions]
    gt_p = [detokenize(tokenize(c, vocab).ids, vocab) for c in sources[s.source_id].source_captions]
    hit_s += cs in gt_s
    hit_p += cp in gt_p
    from procap import tape
    from procap.features import downsample_gt_mask, mask_pool
    with tape.no_grad():
        _, _, pm = model.vision_forward(np.asarray(s.composite_image, dtype=model.dtype))
    pred = pm.grid.data > 0.5
    tgt = downsample_gt_mask(s.gt_mask_pixel, pred.shape).grid.data > 0.5
    inter = np.logical_and(pred, tgt).sum(); union = np.logical_or(pred, tgt).sum()
    ious.append(inter / union if union else 1.0)
print(f"exact scene {hit_s}/{len(train)}  proj {hit_p}/{len(train)}  IoU {np.mean(ious):.3f}", flush=True)
print(f"total wall {(time.time()-t_all)/60:.1f} min", flush=True)
