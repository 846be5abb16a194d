"""Command-line pipelines: corpus generation, base pretraining, unified
training, embedder training, sampling in both directions, inpainting and
evaluation.

Configuration comes from defaults, then an optional JSON config file, then
flags (flags win).  Every command validates its inputs before writing any
file; failures emit one machine-readable JSON object on stderr and a
non-zero exit code."""

from __future__ import annotations

import argparse
import copy
import json
import math
import os
import sys
from dataclasses import fields as dataclass_fields

import numpy as np
import torch

from . import checkpoint as ckpt_mod
from . import corpus as corpus_mod
from . import metrics as metrics_mod
from . import sampling as sampling_mod
from . import training as training_mod
from . import viz
from .corpus import build_vocabulary, normalize_frames, split_pairs
from .metrics import EvalConfig, JointEmbedder, train_embedder
from .model import ModelConfig, init_state
from .rng import derive_seed
from .sampling import SampleConfig
from .schedule import cosine_schedule
from .training import TrainConfig


class CliError(ValueError):
    pass


class ConfigSchemaError(CliError):
    pass


# ---------------------------------------------------------------------------
# Config handling
# ---------------------------------------------------------------------------

_MODEL_KEYS = tuple(f.name for f in dataclass_fields(ModelConfig)
                    if f.name != "vocab_size")
_TRAIN_KEYS = tuple(f.name for f in dataclass_fields(TrainConfig))
_SAMPLE_KEYS = tuple(f.name for f in dataclass_fields(SampleConfig))
_EVAL_KEYS = tuple(f.name for f in dataclass_fields(EvalConfig))

CONFIG_SCHEMA = {
    "model": _MODEL_KEYS,
    "train": _TRAIN_KEYS,
    "sample": _SAMPLE_KEYS,
    "eval": _EVAL_KEYS,
}


def load_config_file(path) -> dict:
    if path is None:
        return {}
    if not os.path.exists(path):
        raise CliError(f"config file not found: {path}")
    with open(path, "r", encoding="utf-8") as fh:
        try:
            blob = json.load(fh)
        except json.JSONDecodeError as exc:
            raise CliError(f"config file {path} is not valid JSON: {exc}")
    violations = []
    if not isinstance(blob, dict):
        raise ConfigSchemaError(f"config root must be an object, got {type(blob).__name__}")
    for section, entries in blob.items():
        if section not in CONFIG_SCHEMA:
            violations.append(section)
            continue
        if not isinstance(entries, dict):
            violations.append(section)
            continue
        for key in entries:
            if key not in CONFIG_SCHEMA[section]:
                violations.append(f"{section}.{key}")
    if violations:
        raise ConfigSchemaError(
            "unknown config keys: " + ", ".join(sorted(violations)))
    return blob


def merged_section(file_config: dict, section: str, overrides: dict) -> dict:
    out = copy.deepcopy(file_config.get(section, {}))
    for key, value in overrides.items():
        if value is not None:
            out[key] = value
    return out


def build_model_config(file_config: dict, overrides: dict = None) -> ModelConfig:
    vocab = build_vocabulary()
    section = merged_section(file_config, "model", overrides or {})
    return ModelConfig(vocab_size=vocab.size, **section)


def build_train_config(file_config: dict, overrides: dict = None) -> TrainConfig:
    return TrainConfig(**merged_section(file_config, "train", overrides or {}))


# ---------------------------------------------------------------------------
# Shared helpers
# ---------------------------------------------------------------------------


def require_file(path, what: str):
    if not os.path.exists(path):
        raise CliError(f"{what} not found: {path}")


def load_model_checkpoint(path, expected_roles):
    require_file(path, "checkpoint")
    ckpt = ckpt_mod.load_checkpoint(path)
    if ckpt.role not in expected_roles:
        raise CliError(
            f"checkpoint role {ckpt.role!r} unusable here (expected one of {expected_roles})")
    return ckpt


def write_motion_outputs(frames_denorm: np.ndarray, caption_text: str, stats,
                         out_path: str, plot: bool):
    """Corpus-format JSONL plus the per-frame CSV, and optionally a figure."""
    pair = corpus_mod.CorpusPair(
        caption=corpus_mod.Caption(text=caption_text, token_ids=[]),
        motion=corpus_mod.MotionSequence(normalize_frames(frames_denorm, stats)),
        family="")
    corpus_mod.save_corpus(out_path, [pair], stats)
    csv_path = os.path.splitext(out_path)[0] + ".csv"
    with open(csv_path, "w", encoding="utf-8") as fh:
        d = frames_denorm.shape[1]
        fh.write("frame," + ",".join(f"dim_{k}" for k in range(d)) + "\n")
        for i, row in enumerate(frames_denorm):
            fh.write(str(i) + "," + ",".join(repr(float(v)) for v in row) + "\n")
    if plot:
        viz.save_motion_plot(frames_denorm, os.path.splitext(out_path)[0] + ".png",
                             title=caption_text)


def load_motion_record(path, index: int) -> tuple:
    """(normalized frames, caption text, stats) from a corpus-format file."""
    require_file(path, "motion file")
    pairs, stats = corpus_mod.load_corpus(path)
    if not 0 <= index < len(pairs):
        raise CliError(f"motion index {index} out of range (file has {len(pairs)})")
    return pairs[index].motion.frames, pairs[index].caption.text, stats


def embedder_from_checkpoint(ckpt) -> JointEmbedder:
    meta = ckpt.meta["embedder_config"]
    embedder = JointEmbedder(vocab_size=meta["vocab_size"],
                             d_motion=meta["d_motion"],
                             d_hidden=meta["d_hidden"], d_emb=meta["d_emb"])
    with torch.no_grad():
        for name, param in embedder.named_parameters():
            if name not in ckpt.tensors:
                raise ckpt_mod.CheckpointError(f"embedder checkpoint missing {name!r}")
            param.copy_(torch.from_numpy(ckpt.tensors[name]))
    embedder.eval()
    return embedder


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------


def cmd_gen_corpus(args) -> int:
    pairs = corpus_mod.generate_corpus(derive_seed(args.seed, "corpus"),
                                       args.count, args.dim)
    pairs, stats = corpus_mod.normalize_corpus(pairs)
    corpus_mod.save_corpus(args.out, pairs, stats)
    print(f"wrote {len(pairs)} pairs to {args.out}")
    return 0


def cmd_pretrain_base(args) -> int:
    require_file(args.corpus, "corpus")
    file_config = load_config_file(args.config)
    model_config = build_model_config(file_config)
    train_config = build_train_config(file_config, {
        "epochs": args.epochs, "lr": args.lr, "batch_size": args.batch_size,
        "seed": args.seed})
    pairs, stats = corpus_mod.load_corpus(args.corpus)
    train_pairs, _ = split_pairs(pairs, args.test_frac)
    vocab = build_vocabulary()
    noise_schedule = cosine_schedule(model_config.T)
    model = init_state(model_config, seed=train_config.seed)
    reports = training_mod.pretrain_base(model, train_pairs, noise_schedule,
                                         vocab, train_config)
    ckpt_mod.save_checkpoint(
        args.out, ckpt_mod.model_tensors(model), role="base",
        model_config=model_config.to_dict(), stats=stats,
        noise_schedule=noise_schedule, vocab_words=vocab.id_to_token,
        extra_meta={"train_config": train_config.to_dict()},
        seed_lineage={"root": train_config.seed,
                      "streams": ["init", "pretrain", "pretrain.dropout"]})
    print(f"pretrained base: final lm loss {reports[-1].lm_loss:.4f}, "
          f"checkpoint at {args.out}")
    return 0


def cmd_train(args) -> int:
    require_file(args.corpus, "corpus")
    base = load_model_checkpoint(args.base, ("base",))
    file_config = load_config_file(args.config)
    overrides = {
        "epochs": args.epochs, "lr": args.lr, "batch_size": args.batch_size,
        "seed": args.seed, "lambda_lm": args.lambda_lm,
        "ratio_t2m": None, "ratio_m2t": None,
    }
    if args.ratio is not None:
        try:
            t2m, m2t = (int(x) for x in args.ratio.split(":"))
        except ValueError:
            raise CliError(f"bad --ratio {args.ratio!r}, expected T2M:M2T like 6:4")
        overrides["ratio_t2m"], overrides["ratio_m2t"] = t2m, m2t
    train_config = build_train_config(file_config, overrides)
    pairs, stats = corpus_mod.load_corpus(args.corpus)
    train_pairs, _ = split_pairs(pairs, args.test_frac)
    vocab = base.vocabulary()
    model = base.build_model()
    model.freeze_base()
    noise_schedule = base.noise_schedule
    if noise_schedule is None:
        raise CliError("base checkpoint carries no noise schedule")
    os.makedirs(args.out_dir, exist_ok=True)
    log_path = os.path.join(args.out_dir, "train_log.jsonl")
    records = []

    def save_unified(path):
        ckpt_mod.save_checkpoint(
            path, ckpt_mod.model_tensors(model), role="unified",
            model_config=base.meta["model_config"], stats=stats,
            noise_schedule=noise_schedule, vocab_words=vocab.id_to_token,
            extra_meta={"train_config": train_config.to_dict()},
            seed_lineage={"root": train_config.seed,
                          "streams": ["train", "train.dropout"]})

    with open(log_path, "w", encoding="utf-8") as log_fh:
        def on_step(report):
            records.append(report.to_dict())
            log_fh.write(json.dumps(records[-1], sort_keys=True) + "\n")

        def on_epoch_end(epoch, _model):
            if args.ckpt_every and (epoch + 1) % args.ckpt_every == 0:
                save_unified(os.path.join(args.out_dir, f"ckpt_epoch{epoch + 1:04d}.bin"))

        training_mod.train_loop(model, train_pairs, noise_schedule, vocab,
                                train_config, on_step=on_step,
                                on_epoch_end=on_epoch_end)
    final_path = os.path.join(args.out_dir, "ckpt_final.bin")
    save_unified(final_path)
    if records and not args.no_plot:
        viz.save_training_curves(records, os.path.join(args.out_dir, "loss_curves.png"))
    last = records[-1] if records else {}
    print(f"trained {len(records)} steps; final total loss "
          f"{last.get('total', float('nan')):.4f}; checkpoint at {final_path}")
    return 0


def cmd_train_embedder(args) -> int:
    require_file(args.corpus, "corpus")
    pairs, stats = corpus_mod.load_corpus(args.corpus)
    train_pairs, _ = split_pairs(pairs, args.test_frac)
    embedder = train_embedder(train_pairs, seed=args.seed, d_emb=args.d_emb,
                              max_epochs=args.max_epochs)
    tensors = {name: p.detach().cpu().numpy()
               for name, p in embedder.named_parameters()}
    ckpt_mod.save_checkpoint(
        args.out, tensors, role="embedder", model_config={}, stats=stats,
        vocab_words=build_vocabulary().id_to_token,
        extra_meta={"embedder_config": {
            "vocab_size": embedder.text_emb.num_embeddings,
            "d_motion": embedder.d_motion,
            "d_hidden": embedder.motion_rnn.hidden_size,
            "d_emb": embedder.d_emb}},
        seed_lineage={"root": args.seed, "streams": ["embedder"]})
    print(f"embedder checkpoint at {args.out}")
    return 0


def _sample_config_from_args(args, file_config) -> SampleConfig:
    overrides = {
        "cfg_scale": args.cfg_scale,
        "motion_length": getattr(args, "length", None),
        "seed": args.seed,
        "decode": getattr(args, "decode", None),
        "temperature": getattr(args, "temperature", None),
        "top_k": getattr(args, "top_k", None),
        "max_text_len": getattr(args, "max_text_len", None),
    }
    if getattr(args, "conditional_only", False):
        overrides["guidance"] = "conditional"
    return SampleConfig(**merged_section(file_config, "sample", overrides))


def cmd_sample(args) -> int:
    ckpt = load_model_checkpoint(args.ckpt, ("unified", "base"))
    file_config = load_config_file(args.config)
    cfg = _sample_config_from_args(args, file_config)
    model = ckpt.build_model()
    vocab = ckpt.vocabulary()
    motion = sampling_mod.sample_motion(args.caption, model, ckpt.noise_schedule,
                                        ckpt.stats, vocab, cfg)
    write_motion_outputs(motion.frames, args.caption, ckpt.stats, args.out,
                         plot=not args.no_plot)
    print(f"sampled {motion.n_frames} frames for {args.caption!r} -> {args.out}")
    return 0


def cmd_caption(args) -> int:
    ckpt = load_model_checkpoint(args.ckpt, ("unified", "base"))
    file_config = load_config_file(args.config)
    cfg = _sample_config_from_args(args, file_config)
    frames_norm, _, _ = load_motion_record(args.motion_file, args.index)
    model = ckpt.build_model()
    vocab = ckpt.vocabulary()
    caption, truncated = sampling_mod.sample_text(frames_norm, model,
                                                  ckpt.noise_schedule, vocab, cfg)
    record = {"caption": caption.text, "truncated": truncated,
              "decode": cfg.decode, "seed": cfg.seed}
    with open(args.out, "w", encoding="utf-8") as fh:
        fh.write(json.dumps(record, sort_keys=True) + "\n")
    print(f"caption: {caption.text!r} -> {args.out}")
    return 0


def cmd_inpaint(args) -> int:
    ckpt = load_model_checkpoint(args.ckpt, ("unified", "base"))
    file_config = load_config_file(args.config)
    cfg = _sample_config_from_args(args, file_config)
    frames_norm, file_caption, _ = load_motion_record(args.motion_file, args.index)
    known = sampling_mod.parse_mask_spec(args.mask, frames_norm.shape[0])
    caption = args.caption if args.caption is not None else (file_caption or None)
    model = ckpt.build_model()
    vocab = ckpt.vocabulary()
    motion = sampling_mod.inpaint_motion(frames_norm, known, caption, model,
                                         ckpt.noise_schedule, ckpt.stats, vocab, cfg)
    write_motion_outputs(motion.frames, caption or "", ckpt.stats, args.out,
                         plot=not args.no_plot)
    print(f"inpainted {int(known.sum())} known / {len(known)} frames -> {args.out}")
    return 0


def cmd_eval(args) -> int:
    ckpt = load_model_checkpoint(args.ckpt, ("unified", "base"))
    emb_ckpt = load_model_checkpoint(args.embedder, ("embedder",))
    require_file(args.corpus, "corpus")
    file_config = load_config_file(args.config)
    overrides = {"seed": args.seed, "cfg_scale": args.cfg_scale,
                 "decode": args.decode, "mm_captions": args.mm_captions,
                 "mm_repeats": args.mm_repeats}
    eval_config = EvalConfig(**merged_section(file_config, "eval", overrides))
    pairs, _stats = corpus_mod.load_corpus(args.corpus)
    train_part, test_part = split_pairs(pairs, args.test_frac)
    part = {"test": test_part, "train": train_part, "all": pairs}[args.split]
    model = ckpt.build_model()
    vocab = ckpt.vocabulary()
    embedder = embedder_from_checkpoint(emb_ckpt)
    report = metrics_mod.evaluate(model, ckpt.noise_schedule, ckpt.stats, vocab,
                                  embedder, part, eval_config)
    with open(args.out, "w", encoding="utf-8") as fh:
        fh.write(report.to_json())
    if not args.no_plot:
        viz.save_report_figure(report.to_dict(),
                               os.path.splitext(args.out)[0] + ".png")
    print(f"eval on {len(part)} pairs: fid={report.fid:.4f} "
          f"rp_top3={report.r_precision_top3:.3f} bleu4={report.bleu4:.3f} "
          f"-> {args.out}")
    return 0


# ---------------------------------------------------------------------------
# Parser
# ---------------------------------------------------------------------------


class _JsonErrorParser(argparse.ArgumentParser):
    def error(self, message):
        print(json.dumps({"error": "UsageError", "message": message}),
              file=sys.stderr)
        raise SystemExit(2)


def _add_common(p, config=True):
    p.add_argument("--threads", type=int, default=None,
                   help="pin torch CPU thread count for reproducibility")
    if config:
        p.add_argument("--config", default=None, help="JSON config file")


def build_parser() -> argparse.ArgumentParser:
    parser = _JsonErrorParser(prog="momug",
                              description="unified text-motion model pipelines")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-corpus", help="generate a synthetic paired corpus")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--count", type=int, required=True)
    p.add_argument("--dim", type=int, default=8)
    p.add_argument("--out", required=True)
    _add_common(p, config=False)
    p.set_defaults(func=cmd_gen_corpus)

    p = sub.add_parser("pretrain-base", help="pretrain the base model on captions")
    p.add_argument("--corpus", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--epochs", type=int, default=None)
    p.add_argument("--lr", type=float, default=None)
    p.add_argument("--batch-size", type=int, default=None)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--test-frac", type=float, default=0.1)
    _add_common(p)
    p.set_defaults(func=cmd_pretrain_base)

    p = sub.add_parser("train", help="unified training from a frozen base")
    p.add_argument("--corpus", required=True)
    p.add_argument("--base", required=True)
    p.add_argument("--out-dir", required=True)
    p.add_argument("--epochs", type=int, default=None)
    p.add_argument("--lr", type=float, default=None)
    p.add_argument("--batch-size", type=int, default=None)
    p.add_argument("--lambda-lm", dest="lambda_lm", type=float, default=None)
    p.add_argument("--ratio", default=None, help="task ratio T2M:M2T, e.g. 6:4")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--test-frac", type=float, default=0.1)
    p.add_argument("--ckpt-every", type=int, default=0,
                   help="write a checkpoint every N epochs (0 = final only)")
    p.add_argument("--no-plot", action="store_true")
    _add_common(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("train-embedder", help="train the joint retrieval embedder")
    p.add_argument("--corpus", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--d-emb", type=int, default=32)
    p.add_argument("--max-epochs", type=int, default=200)
    p.add_argument("--test-frac", type=float, default=0.1)
    _add_common(p, config=False)
    p.set_defaults(func=cmd_train_embedder)

    p = sub.add_parser("sample", help="text-to-motion generation")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--caption", required=True)
    p.add_argument("--length", type=int, default=None)
    p.add_argument("--cfg-scale", dest="cfg_scale", type=float, default=None)
    p.add_argument("--conditional-only", action="store_true",
                   help="debug: skip guidance and use the conditional prediction")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--out", required=True)
    p.add_argument("--no-plot", action="store_true")
    _add_common(p)
    p.set_defaults(func=cmd_sample)

    p = sub.add_parser("caption", help="motion-to-text captioning")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--motion-file", required=True)
    p.add_argument("--index", type=int, default=0)
    p.add_argument("--decode", choices=("greedy", "temperature", "topk"), default=None)
    p.add_argument("--temperature", type=float, default=None)
    p.add_argument("--top-k", dest="top_k", type=int, default=None)
    p.add_argument("--max-text-len", dest="max_text_len", type=int, default=None)
    p.add_argument("--cfg-scale", dest="cfg_scale", type=float, default=None)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--out", required=True)
    _add_common(p)
    p.set_defaults(func=cmd_caption)

    p = sub.add_parser("inpaint", help="regenerate unknown frames of a motion")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--motion-file", required=True)
    p.add_argument("--index", type=int, default=0)
    p.add_argument("--mask", required=True,
                   help="known frames: prefix:K, suffix:K or frames:a-b")
    p.add_argument("--caption", default=None)
    p.add_argument("--cfg-scale", dest="cfg_scale", type=float, default=None)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--out", required=True)
    p.add_argument("--no-plot", action="store_true")
    _add_common(p)
    p.set_defaults(func=cmd_inpaint)

    p = sub.add_parser("eval", help="metric suite over a corpus split")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--embedder", required=True)
    p.add_argument("--corpus", required=True)
    p.add_argument("--split", choices=("test", "train", "all"), default="test")
    p.add_argument("--test-frac", type=float, default=0.1)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--cfg-scale", dest="cfg_scale", type=float, default=None)
    p.add_argument("--decode", choices=("greedy", "temperature", "topk"), default=None)
    p.add_argument("--mm-captions", dest="mm_captions", type=int, default=None)
    p.add_argument("--mm-repeats", dest="mm_repeats", type=int, default=None)
    p.add_argument("--out", required=True)
    p.add_argument("--no-plot", action="store_true")
    _add_common(p)
    p.set_defaults(func=cmd_eval)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.threads:
        torch.set_num_threads(args.threads)
    try:
        return args.func(args)
    except Exception as exc:
        print(json.dumps({"error": type(exc).__name__, "message": str(exc)}),
              file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
