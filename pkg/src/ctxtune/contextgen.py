"""Context text generation: the four prompt templates, a deterministic
synthetic oracle generator, an HTTP client for a real completion server,
and an append-only generation cache."""

from __future__ import annotations

import json
import os
import zlib
from dataclasses import dataclass, field

import numpy as np
import requests

MAX_TOKENS = 256

PROMPTS = {
    "P1": "Provide a next sentence for the given text:",
    "P2": "This is part of the answer. Can you predict what was the question? text :",
    "P3": "Predict topic of the given text:",
    "P4": "Predict title of the given text:",
}


class GenerationError(RuntimeError):
    pass


class TransportError(GenerationError):
    """HTTP backend failed after all retries."""


class CacheIntegrityError(IOError):
    pass


def tokenize(text):
    return text.split()


@dataclass
class PromptTemplate:
    id: str

    def __post_init__(self):
        if self.id not in PROMPTS:
            raise ValueError(f"unknown prompt id {self.id!r}, expected one of {sorted(PROMPTS)}")

    @property
    def template(self):
        return PROMPTS[self.id]

    def render(self, prev_text):
        return f"{self.template} {prev_text}"


def render_prompt(prompt_id, prev_text):
    return PromptTemplate(prompt_id).render(prev_text)


@dataclass
class GeneratedContext:
    segment_key: str
    prompt_id: str
    text: str
    token_count: int
    backend: str


@dataclass
class GeneratorBackend:
    kind: str = "oracle"            # oracle | echo | http
    seed: int = 0
    p_noise: float = 0.0
    overlap: dict = field(default_factory=lambda: {"P1": 0.5, "P2": 0.0, "P3": 0.0, "P4": 0.0})
    endpoint: str = ""
    timeout: float = 10.0
    retries: int = 2
    model_name: str = ""

    def fingerprint(self):
        if self.kind == "oracle":
            return f"oracle:{self.seed}:{self.p_noise}"
        if self.kind == "echo":
            return "echo"
        return f"http:{self.endpoint}:{self.model_name}"


def oracle_generate(prompt_id, manifest, stream_id, index, p_noise=0.0, seed=0,
                    overlap=None):
    """Deterministic stand-in for an LLM prompted with segment index's text.

    Output always names the stream's topic keyword; with probability
    p_noise the keyword is swapped for a uniformly chosen wrong one. P1
    mimics next-sentence prediction by borrowing words from the actual
    following segment at the configured overlap rate; P4 stays short and
    abstractive.
    """
    if prompt_id not in PROMPTS:
        raise GenerationError(f"unknown prompt id {prompt_id!r}")
    overlap = overlap or {}
    topic = manifest.topic_of(stream_id)
    rng = np.random.default_rng(
        zlib.crc32(f"{seed}|{stream_id}|{index}|{prompt_id}|{p_noise}".encode()))
    keyword = topic.keyword
    if p_noise > 0 and rng.random() < p_noise:
        others = [t.keyword for t in manifest.topics if t.id != topic.id]
        keyword = others[int(rng.integers(len(others)))]

    # abstractive prompts describe the topic, not the segment: their filler
    # words are a function of the topic alone, so one topic has one summary
    trng = np.random.default_rng(zlib.crc32(f"{seed}|topic{topic.id}|{prompt_id}".encode()))

    def topic_words(n, gen):
        return [topic.words[int(gen.integers(len(topic.words)))] for _ in range(n)]

    if prompt_id == "P4":
        words = ["notes", "on", keyword] + topic_words(2, trng)
    elif prompt_id == "P3":
        words = ["the", "topic", "is", keyword] + topic_words(4, trng)
    elif prompt_id == "P2":
        words = ["what", "was", "said", "about", keyword] + topic_words(3, trng)
    else:  # P1: next-sentence flavor, overlapping the following segment
        rate = overlap.get("P1", 0.5)
        segs = manifest.streams[stream_id]
        nxt = segs[index + 1].transcript if index + 1 < len(segs) else segs[index].transcript
        words = [keyword]
        for _ in range(11):
            if rng.random() < rate:
                words.append(nxt[int(rng.integers(len(nxt)))])
            else:
                words.extend(topic_words(1, rng))
    return " ".join(words[:MAX_TOKENS])


def llm_generate(backend: GeneratorBackend, prompt):
    """One greedy-decoding completion request; retries transient failures."""
    payload = {"prompt": prompt, "max_tokens": MAX_TOKENS, "temperature": 0}
    last_error = None
    for _ in range(backend.retries + 1):
        try:
            resp = requests.post(backend.endpoint, json=payload, timeout=backend.timeout)
            if resp.status_code != 200:
                last_error = f"status {resp.status_code}"
                continue
            try:
                body = resp.json()
                text = body["text"]
            except (ValueError, KeyError) as e:
                raise GenerationError(f"malformed response body from {backend.endpoint}: {e}")
            return " ".join(tokenize(text)[:MAX_TOKENS])
        except requests.RequestException as e:
            last_error = str(e)
    raise TransportError(f"backend {backend.endpoint} failed after "
                         f"{backend.retries + 1} attempts: {last_error}")


def generate(backend: GeneratorBackend, manifest, stream_id, index, prompt_id):
    """Generate context text from segment (stream_id, index) under prompt_id."""
    prev_text = " ".join(manifest.streams[stream_id][index].transcript)
    if backend.kind == "echo":
        text = prev_text
    elif backend.kind == "oracle":
        text = oracle_generate(prompt_id, manifest, stream_id, index,
                               p_noise=backend.p_noise, seed=backend.seed,
                               overlap=backend.overlap)
    elif backend.kind == "http":
        text = llm_generate(backend, render_prompt(prompt_id, prev_text))
    else:
        raise GenerationError(f"unknown backend kind {backend.kind!r}")
    return GeneratedContext(segment_key=f"{stream_id}/{index}", prompt_id=prompt_id,
                            text=text, token_count=len(tokenize(text)),
                            backend=backend.kind)


class ContextCache:
    """Append-only on-disk store of generated contexts.

    One JSON record per line with a crc32 checksum; entries are immutable
    once written and a hit never touches the backend.
    """

    def __init__(self, path):
        self.path = path
        self._entries = {}
        if path and os.path.exists(path):
            self._load()

    @staticmethod
    def _key(segment_key, prompt_id, fingerprint):
        return (segment_key, prompt_id, fingerprint)

    def _load(self):
        with open(self.path, encoding="utf-8") as f:
            for ln, line in enumerate(f, 1):
                if not line.strip():
                    continue
                try:
                    rec = json.loads(line)
                    body = {k: rec[k] for k in
                            ("segment", "prompt", "fingerprint", "text", "tokens", "backend")}
                    payload = json.dumps(body, sort_keys=True)
                    if zlib.crc32(payload.encode()) != rec["crc"]:
                        raise CacheIntegrityError(
                            f"{self.path}:{ln}: record checksum mismatch")
                except (json.JSONDecodeError, KeyError, TypeError) as e:
                    raise CacheIntegrityError(f"{self.path}:{ln}: corrupt record ({e})") from e
                key = self._key(body["segment"], body["prompt"], body["fingerprint"])
                self._entries.setdefault(key, GeneratedContext(
                    segment_key=body["segment"], prompt_id=body["prompt"],
                    text=body["text"], token_count=body["tokens"],
                    backend=body["backend"]))

    def get(self, segment_key, prompt_id, fingerprint):
        return self._entries.get(self._key(segment_key, prompt_id, fingerprint))

    def put(self, ctx: GeneratedContext, fingerprint):
        key = self._key(ctx.segment_key, ctx.prompt_id, fingerprint)
        if key in self._entries:
            return
        self._entries[key] = ctx
        if self.path:
            body = {"segment": ctx.segment_key, "prompt": ctx.prompt_id,
                    "fingerprint": fingerprint, "text": ctx.text,
                    "tokens": ctx.token_count, "backend": ctx.backend}
            payload = json.dumps(body, sort_keys=True)
            rec = dict(body, crc=zlib.crc32(payload.encode()))
            with open(self.path, "a", encoding="utf-8") as f:
                f.write(json.dumps(rec, sort_keys=True) + "\n")


def get_or_generate(cache: ContextCache, backend: GeneratorBackend, manifest,
                    stream_id, index, prompt_id):
    fp = backend.fingerprint()
    hit = cache.get(f"{stream_id}/{index}", prompt_id, fp)
    if hit is not None:
        return hit
    ctx = generate(backend, manifest, stream_id, index, prompt_id)
    cache.put(ctx, fp)
    return ctx
