"""Training loop, evaluation driver, and the variant-comparison
experiment."""

from __future__ import annotations

import json
import os
import time
from dataclasses import dataclass, field, asdict

import numpy as np

from . import tensor as T
from . import losses as L
from .config import TrainConfig, config_fingerprint
from .contextgen import ContextCache, GeneratorBackend, get_or_generate
from .metrics import MetricReport, corpus_ner_f1, corpus_wer, format_table, macro_f1
from .models import (ContextModel, LabelVocab, ModelConfig, TextVocab, VARIANTS)


class TrainingDiverged(RuntimeError):
    pass


@dataclass
class TrainResult:
    variant: str
    seed: int
    checkpoint_path: str
    losses: list
    context_eval: list          # (step, mean held-out context loss)
    skipped_infeasible: int


def make_backend(cfg: TrainConfig):
    g = cfg.generator
    return GeneratorBackend(kind=g.kind, seed=g.seed, p_noise=g.p_noise,
                            overlap={"P1": g.overlap_p1, "P2": 0.0, "P3": 0.0, "P4": 0.0},
                            endpoint=g.endpoint, timeout=g.timeout,
                            retries=g.retries, model_name=g.model_name)


def build_model_config(cfg: TrainConfig, manifest):
    label_vocab = LabelVocab.from_manifest(manifest)
    text_vocab = TextVocab.from_manifest(manifest)
    m = cfg.model
    return ModelConfig(
        d_feat=m.d_feat, d_model=m.d_model, d_text=m.d_text,
        acoustic_layers=m.acoustic_layers, text_layers=m.text_layers,
        encoder_heads=m.encoder_heads, ffn_mult=m.ffn_mult,
        fusion_heads=m.fusion_heads, fusion_head_dim=m.fusion_head_dim,
        acoustic_window=m.acoustic_window,
        label_vocab_size=label_vocab.size, text_vocab_size=text_vocab.size,
        task=cfg.train.task, embedding_mode=cfg.model.embedding_mode,
    ), label_vocab, text_vocab


class Adam:
    def __init__(self, store, lr=1e-3, betas=(0.9, 0.999), eps=1e-8, clip_norm=5.0):
        self.store = store
        self.lr = lr
        self.b1, self.b2 = betas
        self.eps = eps
        self.clip_norm = clip_norm
        self.t = 0
        self.m = {k: np.zeros_like(p.data) for k, p in store.params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in store.params.items()}

    def step(self):
        grads = {k: p.grad for k, p in self.store.params.items() if p.grad is not None}
        total = np.sqrt(sum(float(np.sum(g * g)) for g in grads.values()))
        scale = self.clip_norm / total if total > self.clip_norm else 1.0
        self.t += 1
        bias1 = 1.0 - self.b1 ** self.t
        bias2 = 1.0 - self.b2 ** self.t
        for k, g in grads.items():
            g = g * scale
            self.m[k] = self.b1 * self.m[k] + (1 - self.b1) * g
            self.v[k] = self.b2 * self.v[k] + (1 - self.b2) * g * g
            self.store.params[k].data -= (self.lr * (self.m[k] / bias1)
                                          / (np.sqrt(self.v[k] / bias2) + self.eps))


class WeightAverage:
    """Polyak average of the parameters; checkpoints and held-out
    evaluation use the average, which is much quieter than the raw
    iterate late in training."""

    def __init__(self, store, decay):
        self.store = store
        self.decay = decay
        self.t = 0
        self.avg = {k: p.data.copy() for k, p in store.params.items()}

    def update(self):
        self.t += 1
        # warm up the horizon so early averages track the iterate
        d = min(self.decay, (1.0 + self.t) / (10.0 + self.t))
        for k, p in self.store.params.items():
            self.avg[k] *= d
            self.avg[k] += (1.0 - d) * p.data

    def swap_in(self):
        raw = {k: p.data.copy() for k, p in self.store.params.items()}
        for k, p in self.store.params.items():
            p.data[...] = self.avg[k]
        return raw

    def swap_out(self, raw):
        for k, p in self.store.params.items():
            p.data[...] = raw[k]


def _context_text(cfg, manifest, backend, cache, seg, decoded_prev=None,
                  variant=None):
    """Context text for one segment under the configured variant, or None
    at a stream start (zero-embedding fallback / no teacher)."""
    if seg.index == 0:
        return None
    variant = variant or cfg.train.variant
    if variant == "context_injection":
        if decoded_prev is not None:
            return " ".join(decoded_prev)
        return " ".join(manifest.previous_text_of(seg.stream_id, seg.index))
    if variant in ("generative_injection", "generative_aware"):
        if decoded_prev is not None and backend.kind == "echo":
            return " ".join(decoded_prev)
        ctx = get_or_generate(cache, backend, manifest, seg.stream_id,
                              seg.index - 1, cfg.train.prompt)
        return ctx.text
    return None


def _segment_loss(cfg, model, label_vocab, text_vocab, seg, context_text,
                  loss_cfg):
    """Returns (loss Tensor or None-if-infeasible, aux namespace)."""
    ids = text_vocab.encode(context_text) if context_text is not None else None
    out = model.forward(seg.features, context_text_ids=ids, training=True)
    if cfg.train.task == "sentiment":
        task = L.cross_entropy(out.logits, seg.sentiment)
    else:
        logp = T.log_softmax(out.logits, axis=-1)
        try:
            task = L.ctc_loss(logp, label_vocab.encode(seg.transcript),
                              blank=label_vocab.blank)
        except L.InfeasibleTargetError:
            return None, out
    ctx_loss = None
    if out.e_teacher is not None and out.e_hat is not None:
        ctx_loss = L.context_l2(out.e_teacher, out.e_hat,
                                squared=loss_cfg.squared_context_loss)
    return L.combined_loss(task, ctx_loss, loss_cfg), out


def _held_out_context_loss(cfg, model, manifest, backend, cache,
                           label_vocab, text_vocab):
    vals = []
    for seg in manifest.segments("eval"):
        text = _context_text(cfg, manifest, backend, cache, seg)
        if text is None:
            continue
        ids = text_vocab.encode(text)
        out = model.forward(seg.features, context_text_ids=ids, training=True)
        vals.append(float(L.context_l2(out.e_teacher, out.e_hat).data))
    return float(np.mean(vals))


def train_one(cfg: TrainConfig, manifest, seed, out_dir=None):
    """Train the configured variant for one seed; returns a TrainResult."""
    model_cfg, label_vocab, text_vocab = build_model_config(cfg, manifest)
    variant = cfg.train.variant
    needs_context = variant != "baseline"
    with_text = variant != "baseline"
    model = ContextModel(model_cfg, variant, seed=seed, with_text_encoder=with_text)
    backend = make_backend(cfg)
    cache = ContextCache(cfg.paths.cache if needs_context else None)
    loss_cfg = L.LossConfig(alpha=cfg.train.alpha, blank_id=label_vocab.blank,
                            squared_context_loss=cfg.train.squared_context_loss)
    opt = Adam(model.store, lr=cfg.train.lr, clip_norm=cfg.train.clip_norm)
    segments = list(manifest.segments("train"))
    rng = np.random.default_rng((seed, 0xC0FFEE))

    losses, context_eval = [], []
    skipped = 0
    base_lr = cfg.train.lr
    ema = WeightAverage(model.store, cfg.train.ema_decay) \
        if cfg.train.ema_decay > 0 else None
    eval_every = max(1, cfg.train.steps // max(1, cfg.train.checkpoints))
    for step in range(cfg.train.steps):
        if cfg.train.lr_decay == "cosine":
            # decay to 10% of base; quiets late-phase optimizer noise
            frac = step / max(1, cfg.train.steps)
            opt.lr = base_lr * (0.1 + 0.9 * 0.5 * (1.0 + np.cos(np.pi * frac)))
        model.zero_grad()
        batch_idx = rng.choice(len(segments), size=min(cfg.train.batch_size,
                                                       len(segments)), replace=False)
        batch_losses = []
        for i in batch_idx:
            seg = segments[i]
            text = _context_text(cfg, manifest, backend, cache, seg)
            loss, _ = _segment_loss(cfg, model, label_vocab, text_vocab, seg,
                                    text, loss_cfg)
            if loss is None:
                skipped += 1
                continue
            batch_losses.append(loss)
        if not batch_losses:
            continue
        total = batch_losses[0]
        for extra in batch_losses[1:]:
            total = T.add(total, extra)
        total = T.scale(total, 1.0 / len(batch_losses))
        if not np.isfinite(total.data):
            raise TrainingDiverged(f"non-finite loss at step {step} "
                                   f"(variant={variant}, seed={seed})")
        total.backward()
        opt.step()
        if ema is not None:
            ema.update()
        losses.append(float(total.data))
        if variant == "generative_aware" and (step + 1) % eval_every == 0:
            raw = ema.swap_in() if ema is not None else None
            context_eval.append((step + 1, _held_out_context_loss(
                cfg, model, manifest, backend, cache, label_vocab, text_vocab)))
            if raw is not None:
                ema.swap_out(raw)

    if ema is not None:
        ema.swap_in()   # final weights are the average
    ckpt = ""
    if out_dir:
        os.makedirs(out_dir, exist_ok=True)
        ckpt = os.path.join(out_dir, f"{variant}_seed{seed}.ckpt")
        model.save(ckpt)
    return TrainResult(variant=variant, seed=seed, checkpoint_path=ckpt,
                       losses=losses, context_eval=context_eval,
                       skipped_infeasible=skipped), model


def _decode_segment(model, label_vocab, seg):
    out = model.forward(seg.features, context_text_ids=None, training=False)
    logp = T.log_softmax(out.logits, axis=-1)
    return label_vocab.decode(L.ctc_greedy_decode(logp.data, blank=label_vocab.blank))


def evaluate_system(cfg: TrainConfig, model, manifest, split="eval"):
    """Run the eval split through a trained model; returns {metric: value}.

    generative_aware is evaluated with no context input at all. Injection
    variants use the previous ground-truth transcript, or a greedy-decoded
    one when train.eval_context_source = "decoded".
    """
    model_cfg, label_vocab, text_vocab = build_model_config(cfg, manifest)
    variant = model.variant
    needs_context = variant in ("context_injection", "generative_injection")
    backend = make_backend(cfg) if needs_context else None
    cache = ContextCache(cfg.paths.cache) if needs_context else None
    use_decoded = cfg.train.eval_context_source == "decoded"
    keyword_tags = {t.keyword: t.tag for t in manifest.topics}
    candidate_of = {}
    for c, (wa, wb) in enumerate(manifest.candidates):
        candidate_of[c] = (wa, wb)

    label_index = {w: i + 1 for i, w in enumerate(label_vocab.words)}
    wer_pairs, ner_pairs = [], []
    sent_preds, sent_golds = [], []
    amb_err = amb_total = 0
    for seg in manifest.segments(split):
        text = None
        if needs_context and seg.index > 0:
            decoded_prev = None
            if use_decoded:
                prev = manifest.streams[seg.stream_id][seg.index - 1]
                decoded_prev = _decode_segment(model, label_vocab, prev)
            text = _context_text(cfg, manifest, backend, cache, seg,
                                 decoded_prev=decoded_prev, variant=variant)
        ids = text_vocab.encode(text) if text is not None else None
        out = model.forward(seg.features, context_text_ids=ids, training=False)

        if cfg.train.task == "sentiment":
            sent_preds.append(int(np.argmax(out.logits.data)))
            sent_golds.append(seg.sentiment)
            continue

        logp = T.log_softmax(out.logits, axis=-1).data
        hyp = label_vocab.decode(L.ctc_greedy_decode(logp, blank=label_vocab.blank))
        wer_pairs.append((seg.transcript, hyp))
        pred_ner = [(w, keyword_tags[w]) for w in hyp if w in keyword_tags]
        ner_pairs.append((pred_ner, seg.ner))
        # forced choice between the two candidates of each ambiguous token
        for tok, span, amb in zip(seg.transcript, seg.token_spans, seg.ambiguous):
            if amb is None:
                continue
            wa, wb = candidate_of[amb]
            sa = logp[span[0]:span[1], label_index[wa]].max()
            sb = logp[span[0]:span[1], label_index[wb]].max()
            pred = wa if sa >= sb else wb
            amb_err += pred != tok
            amb_total += 1

    if cfg.train.task == "sentiment":
        return {"macro_f1": macro_f1(sent_preds, sent_golds)}
    return {
        "wer": corpus_wer(wer_pairs),
        "ner_f1": corpus_ner_f1(ner_pairs),
        "ambiguous_error": 100.0 * amb_err / amb_total if amb_total else 0.0,
    }


def distillation_cosine(cfg: TrainConfig, model, manifest, split="eval"):
    """Mean cosine similarity between the student embedding and the
    teacher embedding over a split (training-time diagnostic)."""
    _, label_vocab, text_vocab = build_model_config(cfg, manifest)
    backend = make_backend(cfg)
    cache = ContextCache(cfg.paths.cache)
    sims = []
    for seg in manifest.segments(split):
        text = _context_text(cfg, manifest, backend, cache, seg)
        if text is None:
            continue
        out = model.forward(seg.features, context_text_ids=text_vocab.encode(text),
                            training=True)
        a = out.e_hat.data.reshape(-1)
        b = out.e_teacher.data.reshape(-1)
        sims.append(float(a @ b / (np.linalg.norm(a) * np.linalg.norm(b) + 1e-12)))
    return float(np.mean(sims))


@dataclass
class ExperimentReport:
    fingerprint: str
    wall_clock: float
    rows: list                  # one dict per variant
    metric_reports: list        # MetricReport dicts
    d_vs_e_delta: float
    config: dict

    def to_dict(self):
        return asdict(self)


def compare_variants(cfg: TrainConfig, manifest, variants=VARIANTS,
                     progress=None):
    """Train and evaluate every variant over the shared seed list."""
    import dataclasses

    t0 = time.time()
    out_dir = cfg.paths.out_dir
    os.makedirs(out_dir, exist_ok=True)
    rows, metric_reports = [], []
    per_variant = {}
    for variant in variants:
        vcfg = dataclasses.replace(cfg, train=dataclasses.replace(
            cfg.train, variant=variant))
        per_seed_metrics, results, models = [], [], []
        for seed in cfg.train.seeds:
            result, model = train_one(vcfg, manifest, seed, out_dir=out_dir)
            metrics = evaluate_system(vcfg, model, manifest, split="eval")
            per_seed_metrics.append(metrics)
            results.append(result)
            models.append(model)
            if progress:
                progress(f"{variant} seed={seed}: " + "  ".join(
                    f"{k}={v:.2f}" for k, v in metrics.items()))
        sample = ContextModel(build_model_config(vcfg, manifest)[0], variant,
                              seed=cfg.train.seeds[0],
                              with_text_encoder=variant in
                              ("context_injection", "generative_injection"))
        row = {"variant": variant,
               "inference_params": sample.count_inference_params(),
               "train_params": models[0].count_params()}
        for name in per_seed_metrics[0]:
            values = [m[name] for m in per_seed_metrics]
            report = MetricReport(metric=f"{variant}.{name}", split="eval",
                                  seeds=list(cfg.train.seeds), values=values)
            metric_reports.append(report)
            row[name] = report.mean
        rows.append(row)
        per_variant[variant] = {"results": results, "models": models,
                                "metrics": per_seed_metrics}

    key = "ambiguous_error" if cfg.train.task == "asr" else "macro_f1"
    delta = 0.0
    if ("generative_injection" in per_variant and "generative_aware" in per_variant):
        d = np.mean([m[key] for m in per_variant["generative_injection"]["metrics"]])
        e = np.mean([m[key] for m in per_variant["generative_aware"]["metrics"]])
        delta = float(abs(d - e))

    report = ExperimentReport(
        fingerprint=config_fingerprint(cfg), wall_clock=time.time() - t0,
        rows=rows, metric_reports=[r.to_dict() for r in metric_reports],
        d_vs_e_delta=delta, config=dataclasses.asdict(cfg))
    fp = report.fingerprint
    with open(os.path.join(out_dir, f"report_{fp}.json"), "w") as f:
        json.dump(report.to_dict(), f, indent=2, sort_keys=True)
    columns = ["variant", "inference_params", "train_params"] + \
        sorted(k for k in rows[0] if k not in ("variant", "inference_params",
                                               "train_params"))
    with open(os.path.join(out_dir, f"table_{fp}.txt"), "w") as f:
        f.write(format_table(rows, columns) + "\n")
    return report, per_variant
