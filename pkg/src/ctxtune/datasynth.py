"""Synthetic streaming corpora where some tokens are only decodable with
stream-level context.

Each stream belongs to one topic. Most tokens come from the topic's own
word list and get their own feature codeword, so they are easy to
recognize. "Ambiguous" positions emit a codeword whose feature mean is
shared by exactly two candidate words; which candidate is correct
depends on the stream's topic, so frame-level features carry zero
information about it by construction.
"""

from __future__ import annotations

import json
import zlib
from dataclasses import dataclass, field, asdict

import numpy as np

from .nn import save_arrays, load_arrays

MANIFEST_VERSION = 1

NER_TAGS = ["PLACE", "PERSON", "ORG", "EVENT", "WORK", "MISC"]


class ManifestError(IOError):
    """Corrupt, truncated, or wrong-version manifest file."""


@dataclass
class CorpusConfig:
    topics: int = 20
    train_streams: int = 50
    eval_streams: int = 10
    segments_per_stream: int = 10
    tokens_per_segment: int = 12
    ambiguity_rate: float = 0.3
    sigma: float = 0.1
    d_feat: int = 16
    # topic word lists are subsets of a shared pool: one word is weak
    # evidence for the topic, the whole segment's histogram is strong
    pool_words: int = 16
    words_per_topic: int = 6
    # most non-ambiguous tokens are drawn from a topic-independent common
    # vocabulary; topical words appear at this rate
    common_words: int = 12
    topical_prob: float = 0.15
    num_ambiguous: int = 8
    frames_min: int = 1
    frames_max: int = 3
    # extra keyword occurrences beyond the anchor (0 keeps the keyword's
    # share of each segment fixed)
    keyword_prob: float = 0.0
    seed: int = 0

    def validate(self):
        if self.topics < 2:
            raise ValueError("need at least 2 topics")
        if not 0.0 <= self.ambiguity_rate <= 1.0:
            raise ValueError("ambiguity_rate must be in [0, 1]")
        if self.train_streams < 1 or self.eval_streams < 1:
            raise ValueError("need at least 1 stream per split")
        if self.tokens_per_segment < 1 or self.segments_per_stream < 1:
            raise ValueError("degenerate corpus config")


@dataclass
class Topic:
    id: int
    keyword: str
    tag: str
    words: list
    resolution: dict  # codeword index -> word string


@dataclass
class Segment:
    stream_id: str
    index: int
    transcript: list          # word strings
    ner: list                 # (phrase, tag) pairs
    sentiment: int            # topic id mod 3
    token_spans: list         # (start_frame, end_frame) per token
    ambiguous: list           # codeword index per token, or None
    features: np.ndarray = None  # T x d_feat, stored separately

    def key(self):
        return f"{self.stream_id}/{self.index}"


@dataclass
class StreamManifest:
    config: CorpusConfig
    topics: list
    codebook: dict            # word -> mean vector
    candidates: list          # per codeword, (word_a, word_b)
    common: list              # topic-independent filler vocabulary
    streams: dict             # stream id -> list of Segment (index order)
    stream_topic: dict        # stream id -> topic id
    splits: dict              # split name -> list of stream ids

    def segments(self, split=None):
        ids = self.splits[split] if split else [s for v in self.splits.values() for s in v]
        for sid in ids:
            yield from self.streams[sid]

    def topic_of(self, stream_id):
        return self.topics[self.stream_topic[stream_id]]

    def vocabulary(self):
        """All words that can appear in transcripts, sorted."""
        words = set()
        for t in self.topics:
            words.add(t.keyword)
            words.update(t.words)
        for a, b in self.candidates:
            words.update((a, b))
        words.update(self.common)
        return sorted(words)

    def previous_text_of(self, stream_id, index):
        """Ground-truth transcript of segment index-1, or None at a stream start."""
        segs = self.streams.get(stream_id)
        if segs is None or not 0 <= index < len(segs):
            raise KeyError(f"unknown segment {stream_id}/{index}")
        if index == 0:
            return None
        return list(segs[index - 1].transcript)


def _build_topics(cfg, rng):
    topics = []
    n_cand = cfg.num_ambiguous
    # balanced assignment of topics to each codeword's two candidates
    assignments = []
    for c in range(n_cand):
        order = rng.permutation(cfg.topics)
        side = np.zeros(cfg.topics, dtype=int)
        side[order[cfg.topics // 2:]] = 1
        assignments.append(side)
    pool = [f"c{j:02d}" for j in range(cfg.pool_words)]
    for k in range(cfg.topics):
        resolution = {}
        for c in range(n_cand):
            resolution[c] = f"amb{c:02d}{'ab'[assignments[c][k]]}"
        picks = rng.choice(cfg.pool_words, size=min(cfg.words_per_topic,
                                                    cfg.pool_words), replace=False)
        topics.append(Topic(
            id=k,
            keyword=f"key{k:02d}",
            tag=NER_TAGS[k % len(NER_TAGS)],
            words=[pool[int(j)] for j in sorted(picks)],
            resolution=resolution,
        ))
    return topics


def _common_words(cfg):
    return [f"f{j:02d}" for j in range(cfg.common_words)]


def _build_codebook(cfg, topics, rng):
    """Per-word feature means; the two candidates of a codeword share one mean."""
    codebook = {}
    candidates = []
    for t in topics:
        for w in [t.keyword] + t.words:
            if w not in codebook:
                codebook[w] = rng.normal(0.0, 1.0, size=cfg.d_feat)
    for w in _common_words(cfg):
        codebook[w] = rng.normal(0.0, 1.0, size=cfg.d_feat)
    for c in range(cfg.num_ambiguous):
        mean = rng.normal(0.0, 1.0, size=cfg.d_feat)
        wa, wb = f"amb{c:02d}a", f"amb{c:02d}b"
        codebook[wa] = mean
        codebook[wb] = mean.copy()
        candidates.append((wa, wb))
    return codebook, candidates


# ambiguous tokens keep this many positions of clearance from the opening
# keyword so narrow-context models cannot reach it
_AMBIGUOUS_MIN_POS = 3


def _generate_segment(cfg, topic, codebook, common, stream_id, index, rng):
    """One segment: an opening topic-keyword anchor, then mostly common
    filler words with ambiguous codewords mixed in away from the anchor."""
    transcript, spans, amb_flags, feats, ner = [], [], [], [], []
    t = 0
    for pos in range(cfg.tokens_per_segment):
        if pos == 0:
            word = topic.keyword
            amb_flags.append(None)
        elif pos >= _AMBIGUOUS_MIN_POS and rng.random() < cfg.ambiguity_rate:
            c = int(rng.integers(cfg.num_ambiguous))
            word = topic.resolution[c]
            amb_flags.append(c)
        elif rng.random() < cfg.keyword_prob:
            word = topic.keyword
            amb_flags.append(None)
        elif rng.random() < cfg.topical_prob:
            word = topic.words[int(rng.integers(len(topic.words)))]
            amb_flags.append(None)
        else:
            word = common[int(rng.integers(len(common)))]
            amb_flags.append(None)
        # the anchor keeps a fixed span so its share of the segment's
        # pooled mass is stable; other tokens vary
        if pos == 0:
            n_frames = cfg.frames_max
        else:
            n_frames = int(rng.integers(cfg.frames_min, cfg.frames_max + 1))
        mean = codebook[word]
        for _ in range(n_frames):
            feats.append(mean + rng.normal(0.0, cfg.sigma, size=cfg.d_feat))
        transcript.append(word)
        spans.append((t, t + n_frames))
        t += n_frames
        if word == topic.keyword:
            ner.append((word, topic.tag))
    return Segment(stream_id=stream_id, index=index, transcript=transcript,
                   ner=ner, sentiment=topic.id % 3, token_spans=spans,
                   ambiguous=amb_flags, features=np.array(feats))


def generate_corpus(cfg: CorpusConfig) -> StreamManifest:
    cfg.validate()
    root = np.random.default_rng(cfg.seed)
    topics = _build_topics(cfg, np.random.default_rng(root.integers(2**63)))
    codebook, candidates = _build_codebook(cfg, topics,
                                           np.random.default_rng(root.integers(2**63)))
    common = _common_words(cfg)
    streams, stream_topic = {}, {}
    splits = {"train": [], "eval": []}
    spec = [("train", cfg.train_streams), ("eval", cfg.eval_streams)]
    for split, n in spec:
        for s in range(n):
            sid = f"{split}-{s:03d}"
            srng = np.random.default_rng(np.random.default_rng(
                (cfg.seed, 7 if split == "train" else 11, s)).integers(2**63))
            # round-robin keeps topic coverage balanced across streams
            topic = topics[s % cfg.topics]
            segs = [_generate_segment(cfg, topic, codebook, common, sid, i, srng)
                    for i in range(cfg.segments_per_stream)]
            streams[sid] = segs
            stream_topic[sid] = topic.id
            splits[split].append(sid)
    return StreamManifest(config=cfg, topics=topics, codebook=codebook,
                          candidates=candidates, common=common, streams=streams,
                          stream_topic=stream_topic, splits=splits)


def codebook_argmax_accuracy(manifest, split="train"):
    """Accuracy of a context-free nearest-mean classifier on ambiguous tokens.

    The two candidates of a codeword tie by construction; ties break to
    the lexicographically first candidate.
    """
    words = manifest.vocabulary()
    means = np.stack([manifest.codebook[w] for w in words])
    correct = total = 0
    for seg in manifest.segments(split):
        for tok, span, amb in zip(seg.transcript, seg.token_spans, seg.ambiguous):
            if amb is None:
                continue
            for t in range(span[0], span[1]):
                d = np.linalg.norm(means - seg.features[t], axis=1)
                pred = words[int(np.argmin(d))]
                correct += pred == tok
                total += 1
    return correct / total if total else 0.0


# --- manifest I/O ---

def _record_line(obj):
    payload = json.dumps(obj, sort_keys=True)
    return json.dumps({"crc": zlib.crc32(payload.encode()), "rec": obj},
                      sort_keys=True) + "\n"


def _parse_line(line, path):
    try:
        wrapper = json.loads(line)
        payload = json.dumps(wrapper["rec"], sort_keys=True)
        if zlib.crc32(payload.encode()) != wrapper["crc"]:
            raise ManifestError(f"{path}: record checksum mismatch")
        return wrapper["rec"]
    except (json.JSONDecodeError, KeyError, TypeError) as e:
        raise ManifestError(f"{path}: corrupt record ({e})") from e


def write_manifest(manifest, path, features_path):
    """Segment records as checksummed JSON lines; features in the binary
    container keyed by "stream/index"."""
    with open(path, "w", encoding="utf-8") as f:
        header = {"version": MANIFEST_VERSION, "config": asdict(manifest.config),
                  "splits": manifest.splits, "stream_topic": manifest.stream_topic}
        f.write(_record_line(header))
        for seg in manifest.segments():
            f.write(_record_line({
                "stream": seg.stream_id, "index": seg.index,
                "transcript": seg.transcript, "ner": seg.ner,
                "sentiment": seg.sentiment, "token_spans": seg.token_spans,
                "ambiguous": seg.ambiguous,
            }))
    save_arrays(features_path, {seg.key(): seg.features for seg in manifest.segments()},
                meta={"version": MANIFEST_VERSION})


def read_manifest(path, features_path) -> StreamManifest:
    with open(path, encoding="utf-8") as f:
        lines = f.readlines()
    if not lines:
        raise ManifestError(f"{path}: empty manifest")
    header = _parse_line(lines[0], path)
    if header.get("version") != MANIFEST_VERSION:
        raise ManifestError(f"{path}: unsupported manifest version {header.get('version')}")
    cfg = CorpusConfig(**header["config"])
    # topics and codebook are a pure function of (seed, config)
    root = np.random.default_rng(cfg.seed)
    topics = _build_topics(cfg, np.random.default_rng(root.integers(2**63)))
    codebook, candidates = _build_codebook(cfg, topics,
                                           np.random.default_rng(root.integers(2**63)))
    features, _ = load_arrays(features_path)
    streams = {sid: [] for split in header["splits"].values() for sid in split}
    for line in lines[1:]:
        rec = _parse_line(line, path)
        seg = Segment(stream_id=rec["stream"], index=rec["index"],
                      transcript=rec["transcript"],
                      ner=[tuple(p) for p in rec["ner"]],
                      sentiment=rec["sentiment"],
                      token_spans=[tuple(s) for s in rec["token_spans"]],
                      ambiguous=rec["ambiguous"],
                      features=features[f"{rec['stream']}/{rec['index']}"])
        streams[seg.stream_id].append(seg)
    for segs in streams.values():
        segs.sort(key=lambda s: s.index)
        if [s.index for s in segs] != list(range(len(segs))):
            raise ManifestError(f"{path}: non-contiguous segment indices")
    return StreamManifest(config=cfg, topics=topics, codebook=codebook,
                          candidates=candidates, common=_common_words(cfg),
                          streams=streams,
                          stream_topic=header["stream_topic"],
                          splits=header["splits"])
