"""Synthetic speaker-entangled sequence corpus.

Each content symbol owns a fixed random unit prototype.  An utterance is a
run-length rendering of a symbol sequence where every frame is::

    prototype + speaker_offset + speaker_tilt @ prototype + noise

The offset is a pure speaker shift; the tilt makes the speaker signature
depend on content, which mean subtraction alone cannot undo.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .tensorio import read_tensors, write_tensors


@dataclass(frozen=True)
class CorpusConfig:
    num_speakers: int = 20
    utts_per_speaker: int = 100
    content_vocab: int = 10
    seq_len_min: int = 20
    seq_len_max: int = 40
    frames_per_symbol_min: int = 2
    frames_per_symbol_max: int = 4
    input_dim: int = 16
    # scales are norms: each vector term has expected length ~ its scale
    speaker_offset_scale: float = 0.3
    speaker_tilt_scale: float = 0.1
    noise_scale: float = 0.6
    seed: int = 0

    def validate(self):
        if not 1 <= self.seq_len_min <= self.seq_len_max:
            raise ValueError("need 1 <= seq_len_min <= seq_len_max")
        if not 1 <= self.frames_per_symbol_min <= self.frames_per_symbol_max:
            raise ValueError("need 1 <= frames_per_symbol_min <= frames_per_symbol_max")
        if self.content_vocab < 2:
            raise ValueError("content_vocab must be >= 2 (adjacent symbols differ)")
        if self.num_speakers < 1 or self.utts_per_speaker < 1 or self.input_dim < 1:
            raise ValueError("num_speakers, utts_per_speaker and input_dim must be positive")
        for name in ("speaker_offset_scale", "speaker_tilt_scale", "noise_scale"):
            v = getattr(self, name)
            if not np.isfinite(v) or v < 0:
                raise ValueError(f"{name} must be finite and >= 0, got {v}")


@dataclass
class Utterance:
    uid: str
    features: np.ndarray  # (T, F)
    content: list
    speaker: int

    @property
    def num_frames(self):
        return self.features.shape[0]


@dataclass
class SpeakerModel:
    prototypes: np.ndarray  # (V, F)
    offsets: np.ndarray     # (S, F)
    tilts: np.ndarray       # (S, F, F)


def speaker_model(cfg: CorpusConfig) -> SpeakerModel:
    rng = np.random.default_rng([cfg.seed, 0])
    F = cfg.input_dim
    protos = rng.normal(size=(cfg.content_vocab, F))
    protos /= np.linalg.norm(protos, axis=1, keepdims=True)
    offsets = rng.normal(size=(cfg.num_speakers, F)) * (cfg.speaker_offset_scale / np.sqrt(F))
    tilts = rng.normal(size=(cfg.num_speakers, F, F)) * (cfg.speaker_tilt_scale / np.sqrt(F))
    return SpeakerModel(protos, offsets, tilts)


def _content_runs(rng, cfg):
    """Symbols and run lengths filling a drawn frame budget; adjacent symbols differ."""
    total = int(rng.integers(cfg.seq_len_min, cfg.seq_len_max + 1))
    symbols, runs, used = [], [], 0
    while used < total:
        if symbols:
            s = int(rng.integers(cfg.content_vocab - 1))
            s += s >= symbols[-1]
        else:
            s = int(rng.integers(cfg.content_vocab))
        run = int(rng.integers(cfg.frames_per_symbol_min, cfg.frames_per_symbol_max + 1))
        run = min(run, total - used)
        symbols.append(s)
        runs.append(run)
        used += run
    return symbols, runs


def generate_corpus(cfg: CorpusConfig) -> list[Utterance]:
    """Deterministic corpus of ``num_speakers * utts_per_speaker`` utterances."""
    cfg.validate()
    model = speaker_model(cfg)
    rng = np.random.default_rng([cfg.seed, 1])
    noise_std = cfg.noise_scale / np.sqrt(cfg.input_dim)
    corpus = []
    for spk in range(cfg.num_speakers):
        warped = model.prototypes + model.prototypes @ model.tilts[spk].T + model.offsets[spk]
        for u in range(cfg.utts_per_speaker):
            symbols, runs = _content_runs(rng, cfg)
            frames = np.repeat(warped[symbols], runs, axis=0)
            frames = frames + rng.normal(size=frames.shape) * noise_std
            corpus.append(Utterance(f"s{spk:03d}u{u:04d}", frames, symbols, spk))
    return corpus


def split(corpus, eval_fraction, seed=0):
    """Stratified utterance-level split: every speaker lands in both halves."""
    if not 0 < eval_fraction < 1:
        raise ValueError("eval_fraction must lie in (0, 1)")
    by_spk: dict[int, list[int]] = {}
    for i, utt in enumerate(corpus):
        by_spk.setdefault(utt.speaker, []).append(i)
    rng = np.random.default_rng(seed)
    eval_idx = set()
    for spk in sorted(by_spk):
        idx = by_spk[spk]
        if len(idx) < 2:
            raise ValueError(f"speaker {spk} has {len(idx)} utterance(s); need >= 2 to split")
        k = min(max(int(round(eval_fraction * len(idx))), 1), len(idx) - 1)
        eval_idx.update(rng.permutation(idx)[:k].tolist())
    train = [u for i, u in enumerate(corpus) if i not in eval_idx]
    held = [u for i, u in enumerate(corpus) if i in eval_idx]
    return train, held


@dataclass
class Batch:
    features: np.ndarray  # (N, T_max, F), zero padded
    mask: np.ndarray      # (N, T_max) bool
    lengths: np.ndarray
    labels: list
    speakers: np.ndarray
    uids: list = field(default_factory=list)

    def __len__(self):
        return len(self.labels)


def make_batch(utts) -> Batch:
    lengths = np.array([u.num_frames for u in utts])
    T, F = lengths.max(), utts[0].features.shape[1]
    feats = np.zeros((len(utts), T, F))
    for i, u in enumerate(utts):
        feats[i, :u.num_frames] = u.features
    mask = np.arange(T)[None, :] < lengths[:, None]
    return Batch(feats, mask, lengths, [list(u.content) for u in utts],
                 np.array([u.speaker for u in utts]), [u.uid for u in utts])


def batch_iterator(dataset, batch_size, shuffle_seed=None, epoch=0):
    """Yield padded batches; order is a deterministic function of (seed, epoch)."""
    if batch_size < 1:
        raise ValueError("batch_size must be >= 1")
    order = np.arange(len(dataset))
    if shuffle_seed is not None:
        order = np.random.default_rng([shuffle_seed, epoch]).permutation(len(dataset))
    for start in range(0, len(order), batch_size):
        yield make_batch([dataset[i] for i in order[start:start + batch_size]])


def write_corpus(prefix, corpus) -> None:
    write_tensors(f"{prefix}.tensors", {u.uid: u.features for u in corpus})
    with open(f"{prefix}.index.jsonl", "w") as fh:
        for u in corpus:
            fh.write(json.dumps({"id": u.uid, "speaker": u.speaker,
                                 "content": list(u.content), "frames": u.num_frames}) + "\n")


def read_corpus(prefix) -> list[Utterance]:
    tensors = read_tensors(f"{prefix}.tensors")
    corpus = []
    with open(f"{prefix}.index.jsonl") as fh:
        for line in fh:
            rec = json.loads(line)
            feats = tensors[rec["id"]]
            if feats.shape[0] != rec["frames"]:
                raise ValueError(f"{rec['id']}: index says {rec['frames']} frames, "
                                 f"tensor has {feats.shape[0]}")
            corpus.append(Utterance(rec["id"], feats, rec["content"], rec["speaker"]))
    return corpus


def nearest_centroid_accuracy(train, held) -> float:
    """Speaker ID on utterance-mean raw features by nearest class centroid."""
    def means(utts):
        return np.stack([u.features.mean(axis=0) for u in utts]), np.array([u.speaker for u in utts])

    xtr, ytr = means(train)
    xev, yev = means(held)
    spks = np.unique(ytr)
    cents = np.stack([xtr[ytr == s].mean(axis=0) for s in spks])
    d = ((xev[:, None, :] - cents[None]) ** 2).sum(-1)
    return float(np.mean(spks[np.argmin(d, axis=1)] == yev))
