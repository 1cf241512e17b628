"""Scratch A/B for projection-caption learnability (not part of the package)."""
import numpy as np, time, tempfile, os, sys, json
from procap.config import ModelConfig, TrainConfig, SynthConfig
from procap.decoder import Vocabulary, tokenize, detokenize, pretrain_decoder
from procap.model import ProCapModel
from procap.memory import build_kb
from procap import compose as C
from procap.training import train_model
from procap.evalproto import exact_match_rates, mask_iou

gain_hi = float(sys.argv[1]); null_ctx = sys.argv[2] == "null"; steps = int(sys.argv[3])
tmp = tempfile.mkdtemp()
C.synth_dataset(SynthConfig(seed=0), tmp)
samples, scenes, sources = C.load_dataset(os.path.join(tmp, "manifest.json"))
caps = [c for s in scenes.values() for c in s.scene_captions] + [c for s in sources.values() for c in s.source_captions]
vocab = Vocabulary.from_corpus(caps)
mcfg = ModelConfig(null_semantic_context=null_ctx)
model = ProCapModel(mcfg, vocab, seed=0)
tcfg = TrainConfig(warmup_steps=100, total_steps=steps, batch_size=8, seed=0)
pretrain_decoder(caps, model.params, vocab, tcfg, mcfg.dec_layers, mcfg.dec_heads, mcfg.max_caption_len)
kb = build_kb(model, [(so.source_image, so.object_name) for so in sources.values()])
t0 = time.time()
rows = train_model(model, samples, scenes, sources, kb, tcfg, progress=500)
print(f"train {(time.time()-t0)/60:.1f} min; final {rows[-1][2]}", flush=True)
es, ep = exact_match_rates(model, kb, samples, scenes, sources, ("train",))
iou = mask_iou(model, samples, ("train",))
print(f"RESULT gain_hi={gain_hi} null={null_ctx}: exact scene {es:.3f} proj {ep:.3f} IoU {iou:.3f}", flush=True)
