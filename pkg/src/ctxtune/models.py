"""The four system variants: baseline, context injection, generative
context injection, and generative context-aware (distilled student).

All variants share parameter names, so two variants built from the same
seed start from identical weights on their common sub-networks.
"""

from __future__ import annotations

from dataclasses import dataclass, field, asdict
from types import SimpleNamespace

import numpy as np

from . import tensor as T
from .nn import (AttentionConfig, Linear, MultiHeadAttention, ParameterStore,
                 TransformerLayer, load_arrays, mean_pool, save_arrays)
from .tensor import Tensor

VARIANTS = ("baseline", "context_injection", "generative_injection", "generative_aware")

# words the oracle generator may emit beyond corpus vocabulary
TEMPLATE_WORDS = ["about", "is", "notes", "on", "said", "the", "topic", "was", "what"]

CLS_ID = 0
UNK_ID = 1


@dataclass
class TextVocab:
    words: list

    @classmethod
    def from_manifest(cls, manifest):
        return cls(sorted(set(manifest.vocabulary()) | set(TEMPLATE_WORDS)))

    @property
    def size(self):
        return len(self.words) + 2  # cls + unk

    def encode(self, text):
        index = {w: i + 2 for i, w in enumerate(self.words)}
        return [CLS_ID] + [index.get(w, UNK_ID) for w in text.lower().split()]


@dataclass
class LabelVocab:
    """CTC label inventory; blank is id 0, real tokens follow sorted."""
    words: list

    @classmethod
    def from_manifest(cls, manifest):
        return cls(sorted(manifest.vocabulary()))

    @property
    def size(self):
        return len(self.words) + 1

    @property
    def blank(self):
        return 0

    def encode(self, tokens):
        index = {w: i + 1 for i, w in enumerate(self.words)}
        return [index[t] for t in tokens]

    def decode(self, ids):
        return [self.words[i - 1] for i in ids]


@dataclass
class ModelConfig:
    d_feat: int = 16
    d_model: int = 64
    d_text: int = 32
    acoustic_layers: int = 2
    text_layers: int = 2
    encoder_heads: int = 4
    ffn_mult: int = 4
    fusion_heads: int = 1
    fusion_head_dim: int = 32
    # frames each side an acoustic frame may attend to; 0 means unrestricted.
    # Local attention keeps frame-level paths from aggregating segment-global
    # evidence, which is what makes stream context worth injecting.
    acoustic_window: int = 1
    label_vocab_size: int = 0
    text_vocab_size: int = 0
    task: str = "asr"               # asr | sentiment
    embedding_mode: str = "cls"     # cls | sequence
    sentiment_classes: int = 3

    def head_out_dim(self):
        return self.sentiment_classes if self.task == "sentiment" else self.label_vocab_size


class AcousticEncoder:
    def __init__(self, store, cfg):
        self.cfg = cfg
        self.proj = Linear(store, "acoustic.proj", cfg.d_feat, cfg.d_model)
        window = cfg.acoustic_window if cfg.acoustic_window > 0 else None
        self.layers = [TransformerLayer(store, f"acoustic.layer{i}", cfg.d_model,
                                        cfg.encoder_heads, cfg.ffn_mult,
                                        window=window)
                       for i in range(cfg.acoustic_layers)]

    def __call__(self, features):
        x = T.as_tensor(features)
        if x.shape[0] < 1:
            raise ValueError("encode_audio: empty feature sequence")
        if x.shape[1] != self.cfg.d_feat:
            raise T.ShapeMismatchError("encode_audio", x.shape, (self.cfg.d_feat,))
        z = self.proj(x)
        for layer in self.layers:
            z = layer(z)
        return z


class TextEncoder:
    """Token embedding + transformer stack with a reserved leading
    classification token; returns both the cls state and the full sequence."""

    def __init__(self, store, cfg):
        self.cfg = cfg
        self.table = store.create("text.embed", (cfg.text_vocab_size, cfg.d_text),
                                  fan_in=cfg.d_text)
        self.layers = [TransformerLayer(store, f"text.layer{i}", cfg.d_text,
                                        1, cfg.ffn_mult, active_init=True)
                       for i in range(cfg.text_layers)]

    def __call__(self, token_ids):
        ids = list(token_ids)
        if not ids or ids[0] != CLS_ID:
            ids = [CLS_ID] + ids
        h = T.embed_rows(ids, self.table)
        for layer in self.layers:
            h = layer(h)
        cls = T.slice_cols(T.transpose(h), 0, 1)  # d_text x 1
        return SimpleNamespace(cls=T.transpose(cls), sequence=h)


class ContextFusion:
    """Cross-attention merge of a context embedding into the frame
    sequence: fused = CA(Z, e) + Z. A fixed-length embedding acts as a
    length-1 key/value sequence. The output projection starts at zero, so
    zeroing the value projection (or fresh init) leaves Z untouched."""

    def __init__(self, store, cfg):
        self.cfg = cfg
        attn_cfg = AttentionConfig(num_heads=cfg.fusion_heads, head_dim=cfg.fusion_head_dim,
                                   query_dim=cfg.d_model, kv_dim=cfg.d_text,
                                   out_dim=cfg.d_model)
        self.attn = MultiHeadAttention(store, "fusion", attn_cfg, zero_init_out=False)

    def __call__(self, z, e):
        e = T.as_tensor(e)
        if e.data.ndim == 1:
            e = T.reshape(e, (1, e.shape[0]))
        if e.shape[1] != self.cfg.d_text:
            raise T.ShapeMismatchError("fuse_context", z.shape, e.shape)
        return T.add(self.attn(z, e), z)


class ContextStudent:
    """Mean pool over frames + one linear layer to the teacher dimension."""

    def __init__(self, store, cfg):
        self.proj = Linear(store, "student.proj", cfg.d_model, cfg.d_text)

    def __call__(self, z):
        return self.proj(mean_pool(z))


class TaskHead:
    def __init__(self, store, cfg):
        self.cfg = cfg
        self.proj = Linear(store, "head.proj", cfg.d_model, cfg.head_out_dim())

    def __call__(self, z):
        if self.cfg.task == "sentiment":
            return self.proj(mean_pool(z))
        return self.proj(z)


class ContextModel:
    """One system variant assembled from the shared building blocks.

    A generative_aware model needs no text encoder at inference time;
    pass with_text_encoder=False to build it without one entirely.
    """

    def __init__(self, cfg: ModelConfig, variant, seed=0, with_text_encoder=None):
        if variant not in VARIANTS:
            raise ValueError(f"unknown variant {variant!r}")
        if cfg.embedding_mode not in ("cls", "sequence"):
            raise ValueError(f"unknown embedding mode {cfg.embedding_mode!r}")
        self.cfg = cfg
        self.variant = variant
        self.seed = seed
        self.store = ParameterStore(seed)
        self.acoustic = AcousticEncoder(self.store, cfg)
        self.head = TaskHead(self.store, cfg)
        if with_text_encoder is None:
            with_text_encoder = variant in ("context_injection", "generative_injection")
        self.text_encoder = TextEncoder(self.store, cfg) if with_text_encoder else None
        self.fusion = ContextFusion(self.store, cfg) if variant != "baseline" else None
        self.student = ContextStudent(self.store, cfg) if variant == "generative_aware" else None

    # --- component passes ---

    def encode_audio(self, features):
        return self.acoustic(features)

    def encode_text(self, token_ids):
        if self.text_encoder is None:
            raise RuntimeError(f"{self.variant} model was built without a text encoder")
        return self.text_encoder(token_ids)

    def context_embedding(self, token_ids):
        enc = self.encode_text(token_ids)
        return enc.cls if self.cfg.embedding_mode == "cls" else enc.sequence

    def zero_context(self):
        rows = 1
        return Tensor(np.zeros((rows, self.cfg.d_text)))

    def fuse_context(self, z, e):
        return self.fusion(z, e)

    def student_embed(self, z):
        return self.student(z)

    def forward(self, features, context_text_ids=None, training=False):
        """Run the variant's forward path.

        context_text_ids: token ids of the context text. Injection
        variants require it except at a stream start, where None selects
        the zero-embedding fallback. generative_aware uses it only when
        training=True, to produce the teacher embedding.
        """
        z = self.encode_audio(features)
        e_hat = e_teacher = None
        if self.variant == "baseline":
            fused = z
        elif self.variant in ("context_injection", "generative_injection"):
            e = (self.zero_context() if context_text_ids is None
                 else self.context_embedding(context_text_ids))
            fused = self.fuse_context(z, e)
        else:  # generative_aware
            e_hat = self.student_embed(z)
            fused = self.fuse_context(z, e_hat)
            if training and context_text_ids is not None:
                # teacher is a constant distillation target
                e_teacher = self.context_embedding(context_text_ids).detach()
        logits = self.head(fused)
        return SimpleNamespace(logits=logits, e_hat=e_hat, e_teacher=e_teacher, z=z)

    # --- bookkeeping ---

    def _inference_prefixes(self):
        prefixes = ["acoustic.", "head."]
        if self.variant in ("context_injection", "generative_injection"):
            prefixes += ["text.", "fusion."]
        elif self.variant == "generative_aware":
            prefixes += ["fusion.", "student."]
        return prefixes

    def count_inference_params(self):
        return self.store.count(self._inference_prefixes())

    def count_params(self):
        return self.store.count()

    def zero_grad(self):
        self.store.zero_grad()

    def save(self, path):
        save_arrays(path, self.store.state_dict(),
                    meta={"variant": self.variant, "seed": self.seed,
                          "config": asdict(self.cfg)})

    @classmethod
    def load(cls, path, with_text_encoder=None):
        arrays, meta = load_arrays(path)
        cfg = ModelConfig(**meta["config"])
        model = cls(cfg, meta["variant"], seed=meta["seed"],
                    with_text_encoder=with_text_encoder)
        state = {k: v for k, v in arrays.items()
                 if model.text_encoder is not None or not k.startswith("text.")}
        model.store.load_state_dict(state)
        return model


def fusion_param_count(cfg: ModelConfig):
    width = cfg.fusion_heads * cfg.fusion_head_dim
    return width * (2 * cfg.d_model + 2 * cfg.d_text)


def student_param_count(cfg: ModelConfig):
    return cfg.d_model * cfg.d_text + cfg.d_text
