"""Binary checkpoint container.

Layout (little-endian): 6-byte magic "MOMUG1", u32 format version, a JSON
metadata block (u64 length prefix) carrying the configs, role tag, corpus
stats, vocabulary word list and seed lineage, then a named-tensor table
(name, shape, float32 row-major data), then an optional schedule section
(u32 T plus float64 betas)."""

from __future__ import annotations

import json
import struct

import numpy as np
import torch

from .corpus import CorpusStats, Vocabulary, build_vocabulary
from .model import ModelConfig, MotionTextTransformer, init_state
from .schedule import NoiseSchedule, schedule_from_betas

MAGIC = b"MOMUG1"
FORMAT_VERSION = 1

DTYPE_F32 = 0


class CheckpointError(ValueError):
    pass


def _stats_to_meta(stats: CorpusStats) -> dict:
    return {
        "mean": [float(x) for x in stats.mean],
        "std": [float(x) for x in stats.std],
        "length_histogram": {str(k): int(v)
                             for k, v in sorted(stats.length_histogram.items())},
    }


def _stats_from_meta(blob: dict) -> CorpusStats:
    return CorpusStats(
        mean=np.array(blob["mean"], dtype=np.float64),
        std=np.array(blob["std"], dtype=np.float64),
        length_histogram={int(k): int(v)
                          for k, v in blob["length_histogram"].items()})


def save_checkpoint(path, tensors: dict, role: str, model_config: dict,
                    stats: CorpusStats = None, noise_schedule: NoiseSchedule = None,
                    vocab_words=None, extra_meta: dict = None,
                    seed_lineage: dict = None):
    """Write a named-tensor container; tensors are stored as float32."""
    meta = {
        "role": role,
        "model_config": model_config,
        "corpus_stats": _stats_to_meta(stats) if stats is not None else None,
        "vocab_words": list(vocab_words) if vocab_words is not None else None,
        "seed_lineage": seed_lineage or {},
    }
    if extra_meta:
        meta.update(extra_meta)
    meta_bytes = json.dumps(meta, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", FORMAT_VERSION))
        fh.write(struct.pack("<Q", len(meta_bytes)))
        fh.write(meta_bytes)
        fh.write(struct.pack("<I", len(tensors)))
        for name in sorted(tensors):
            arr = np.ascontiguousarray(
                np.asarray(tensors[name], dtype=np.float32))
            name_b = name.encode("utf-8")
            fh.write(struct.pack("<H", len(name_b)))
            fh.write(name_b)
            fh.write(struct.pack("<BB", DTYPE_F32, arr.ndim))
            fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            fh.write(arr.astype("<f4").tobytes())
        if noise_schedule is not None:
            fh.write(struct.pack("<B", 1))
            fh.write(struct.pack("<I", noise_schedule.T))
            fh.write(noise_schedule.beta[1:].astype("<f8").tobytes())
        else:
            fh.write(struct.pack("<B", 0))


class Checkpoint:
    def __init__(self, meta: dict, tensors: dict, noise_schedule):
        self.meta = meta
        self.tensors = tensors
        self.noise_schedule = noise_schedule

    @property
    def role(self) -> str:
        return self.meta["role"]

    @property
    def stats(self) -> CorpusStats:
        blob = self.meta.get("corpus_stats")
        if blob is None:
            raise CheckpointError("checkpoint carries no corpus stats")
        return _stats_from_meta(blob)

    def build_model(self) -> MotionTextTransformer:
        """Reconstruct the transformer with the stored parameters (float32)."""
        config = ModelConfig(**self.meta["model_config"])
        model = init_state(config, seed=0)
        with torch.no_grad():
            for name, param in model.named_parameters():
                if name not in self.tensors:
                    raise CheckpointError(f"checkpoint missing tensor {name!r}")
                stored = self.tensors[name]
                if tuple(stored.shape) != tuple(param.shape):
                    raise CheckpointError(
                        f"tensor {name!r} shape {stored.shape} != model {tuple(param.shape)}")
                param.copy_(torch.from_numpy(stored))
        model.eval()
        return model

    def vocabulary(self) -> Vocabulary:
        vocab = build_vocabulary()
        words = self.meta.get("vocab_words")
        if words is not None and list(vocab.id_to_token) != list(words):
            raise CheckpointError(
                "checkpoint vocabulary does not match this build's vocabulary")
        return vocab


def _read_exact(fh, n: int, what: str) -> bytes:
    data = fh.read(n)
    if len(data) != n:
        raise CheckpointError(f"truncated checkpoint while reading {what}")
    return data


def load_checkpoint(path) -> Checkpoint:
    with open(path, "rb") as fh:
        magic = fh.read(len(MAGIC))
        if magic != MAGIC:
            raise CheckpointError(f"{path}: bad magic {magic!r}, not a checkpoint")
        (version,) = struct.unpack("<I", _read_exact(fh, 4, "version"))
        if version != FORMAT_VERSION:
            raise CheckpointError(
                f"{path}: unsupported checkpoint version {version} "
                f"(this build reads version {FORMAT_VERSION})")
        (meta_len,) = struct.unpack("<Q", _read_exact(fh, 8, "metadata length"))
        meta = json.loads(_read_exact(fh, meta_len, "metadata"))
        (n_tensors,) = struct.unpack("<I", _read_exact(fh, 4, "tensor count"))
        tensors = {}
        for _ in range(n_tensors):
            (name_len,) = struct.unpack("<H", _read_exact(fh, 2, "tensor name length"))
            name = _read_exact(fh, name_len, "tensor name").decode("utf-8")
            dtype, ndim = struct.unpack("<BB", _read_exact(fh, 2, "tensor header"))
            if dtype != DTYPE_F32:
                raise CheckpointError(f"{path}: unknown tensor dtype tag {dtype}")
            shape = struct.unpack(f"<{ndim}I", _read_exact(fh, 4 * ndim, "tensor shape"))
            count = int(np.prod(shape)) if ndim else 1
            data = _read_exact(fh, 4 * count, f"tensor {name!r} data")
            tensors[name] = np.frombuffer(data, dtype="<f4").reshape(shape).copy()
        (has_schedule,) = struct.unpack("<B", _read_exact(fh, 1, "schedule flag"))
        noise_schedule = None
        if has_schedule:
            (T,) = struct.unpack("<I", _read_exact(fh, 4, "schedule T"))
            betas = np.frombuffer(_read_exact(fh, 8 * T, "schedule betas"), dtype="<f8")
            noise_schedule = schedule_from_betas(betas)
    return Checkpoint(meta=meta, tensors=tensors, noise_schedule=noise_schedule)


def model_tensors(model: MotionTextTransformer) -> dict:
    return {name: p.detach().cpu().numpy()
            for name, p in model.named_parameters()}
