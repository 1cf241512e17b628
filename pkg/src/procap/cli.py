"""Single command-line entry point wiring all modules together.

Exit codes: 0 success, 1 domain error (message on stderr), 2 usage error.
Every artifact a subcommand writes embeds the resolved config snapshot and
seed.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import os
import sys

import numpy as np

from .compose import load_dataset, load_png, synth_dataset
from .config import RunConfig, config_snapshot, load_run_config
from .decoder import Vocabulary, pretrain_decoder
from .errors import ProcapError
from .evalproto import evaluate_dual, format_report_table
from .memory import build_kb, load_kb, save_kb
from .model import ProCapModel
from .training import load_checkpoint, save_checkpoint, train_model


def _resolved_config(args) -> RunConfig:
    cfg = load_run_config(args.config) if getattr(args, "config", None) else RunConfig()
    if getattr(args, "seed", None) is not None:
        cfg = dataclasses.replace(cfg, seed=args.seed)
        cfg.synth = dataclasses.replace(cfg.synth, seed=args.seed)
        cfg.train = dataclasses.replace(cfg.train, seed=args.seed)
    return cfg


def _corpus_captions(scenes, sources):
    caps = [c for sc in scenes.values() for c in sc.scene_captions]
    caps += [c for so in sources.values() for c in so.source_captions]
    return caps


def cmd_synth(args):
    cfg = _resolved_config(args)
    os.makedirs(args.out, exist_ok=True)
    man = synth_dataset(cfg.synth, args.out, seed=cfg.synth.seed,
                        extra_config_snapshot={"run": config_snapshot(cfg)})
    print(f"wrote {len(man['samples'])} samples to {args.out}/manifest.json")
    return 0


def cmd_pretrain_decoder(args):
    cfg = _resolved_config(args)
    samples, scenes, sources = load_dataset(args.data)
    train_caps = _corpus_captions(scenes, sources)
    vocab = Vocabulary.from_corpus(train_caps)
    model = ProCapModel(cfg.model, vocab, seed=cfg.seed)
    losses = pretrain_decoder(train_caps, model.params, vocab, cfg.train,
                              cfg.model.dec_layers, cfg.model.dec_heads,
                              cfg.model.max_caption_len)
    save_checkpoint(args.out, model, step=0, run_snapshot=config_snapshot(cfg))
    print(f"pretrained decoder on {len(train_caps)} captions "
          f"(lm loss {losses[0]:.4f} -> {losses[-1]:.4f}); wrote {args.out}")
    return 0


def cmd_kb_build(args):
    model, _, snapshot = load_checkpoint(args.checkpoint)
    _, _, sources = load_dataset(args.manifest)
    refs = [(so.source_image, so.object_name) for so in sources.values()]
    kb = build_kb(model, refs)
    save_kb(kb, args.out, config_snapshot=snapshot)
    print(f"built knowledge base with {len(kb.entries)} entries -> {args.out}")
    return 0


def cmd_train(args):
    cfg = _resolved_config(args)
    samples, scenes, sources = load_dataset(args.data)
    kb = load_kb(args.kb)
    if args.init:
        model, _, _ = load_checkpoint(args.init)
    else:
        caps = _corpus_captions(scenes, sources)
        model = ProCapModel(cfg.model, Vocabulary.from_corpus(caps), seed=cfg.seed)
    os.makedirs(args.out, exist_ok=True)
    rows = train_model(model, samples, scenes, sources, kb, cfg.train,
                       log_path=os.path.join(args.out, "loss_log.csv"),
                       progress=args.progress)
    ckpt = os.path.join(args.out, "checkpoint.bin")
    save_checkpoint(ckpt, model, step=len(rows), run_snapshot=config_snapshot(cfg))
    final = rows[-1][2]
    print(f"trained {len(rows)} steps; final total {final.total:.4f}; wrote {ckpt}")
    return 0


def cmd_caption(args):
    model, _, _ = load_checkpoint(args.checkpoint)
    kb = load_kb(args.kb)
    image = load_png(args.image)
    print(model.caption_image(image, kb, args.task))
    return 0


def cmd_eval(args):
    model, _, snapshot = load_checkpoint(args.checkpoint)
    kb = load_kb(args.kb)
    report = evaluate_dual(model, kb, args.data, out_path=args.out,
                           splits=tuple(args.splits.split(",")),
                           meta={"checkpoint": args.checkpoint, "kb": args.kb,
                                 "config": snapshot})
    print(format_report_table(report), end="")
    print(f"wrote {args.out}")
    return 0


def build_parser():
    p = argparse.ArgumentParser(prog="procap",
                                description="projection-aware dual captioning, desk scale")
    sub = p.add_subparsers(dest="command", required=True)

    sp = sub.add_parser("synth", help="synthesize a composite dataset")
    sp.add_argument("--config", help="run config JSON")
    sp.add_argument("--out", required=True)
    sp.add_argument("--seed", type=int)
    sp.set_defaults(fn=cmd_synth)

    sp = sub.add_parser("pretrain-decoder", help="language-model pretraining of the caption decoder")
    sp.add_argument("--config", help="run config JSON")
    sp.add_argument("--data", required=True, help="manifest.json")
    sp.add_argument("--out", required=True, help="checkpoint file to write")
    sp.add_argument("--seed", type=int)
    sp.set_defaults(fn=cmd_pretrain_decoder)

    kb = sub.add_parser("kb", help="knowledge-base operations")
    kbsub = kb.add_subparsers(dest="kb_command", required=True)
    sp = kbsub.add_parser("build", help="build kb.json from manifest sources")
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--manifest", required=True)
    sp.add_argument("--out", required=True)
    sp.set_defaults(fn=cmd_kb_build)

    sp = sub.add_parser("train", help="end-to-end training")
    sp.add_argument("--config", help="run config JSON")
    sp.add_argument("--data", required=True, help="manifest.json")
    sp.add_argument("--kb", required=True, help="kb.json")
    sp.add_argument("--out", required=True, help="output directory")
    sp.add_argument("--init", help="initial checkpoint (e.g. from pretrain-decoder)")
    sp.add_argument("--seed", type=int)
    sp.add_argument("--progress", type=int, default=0, help="print a line every N steps")
    sp.set_defaults(fn=cmd_train)

    sp = sub.add_parser("caption", help="caption one image")
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--kb", required=True)
    sp.add_argument("--image", required=True)
    sp.add_argument("--task", required=True, choices=["scene", "proj"])
    sp.set_defaults(fn=cmd_caption)

    sp = sub.add_parser("eval", help="dual-captioning evaluation report")
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--kb", required=True)
    sp.add_argument("--data", required=True, help="manifest.json")
    sp.add_argument("--out", required=True, help="report.json path")
    sp.add_argument("--splits", default="eval", help="comma-separated split names")
    sp.set_defaults(fn=cmd_eval)
    return p


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.fn(args)
    except ProcapError as e:
        print(f"error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
