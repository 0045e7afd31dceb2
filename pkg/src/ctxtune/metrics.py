"""Evaluation arithmetic: WER, unordered NER-pair F1, macro sentiment F1,
ROUGE-1 F, and seed-averaged report assembly."""

from __future__ import annotations

import json
import math
from collections import Counter
from dataclasses import dataclass, field


def levenshtein(ref, hyp):
    """Unit-cost edit distance between two token sequences."""
    n, m = len(ref), len(hyp)
    prev = list(range(m + 1))
    for i in range(1, n + 1):
        cur = [i] + [0] * m
        for j in range(1, m + 1):
            cur[j] = min(prev[j] + 1, cur[j - 1] + 1,
                         prev[j - 1] + (ref[i - 1] != hyp[j - 1]))
        prev = cur
    return prev[m]


def wer(ref_tokens, hyp_tokens):
    """100 * edit_distance / |ref|. Reference must be non-empty."""
    if len(ref_tokens) == 0:
        raise ValueError("wer: empty reference")
    return 100.0 * levenshtein(ref_tokens, hyp_tokens) / len(ref_tokens)


def corpus_wer(pairs):
    """Corpus-level WER: total edits over total reference length."""
    edits = ref_len = 0
    for ref, hyp in pairs:
        if len(ref) == 0:
            raise ValueError("wer: empty reference")
        edits += levenshtein(ref, hyp)
        ref_len += len(ref)
    return 100.0 * edits / ref_len


def ner_pair_f1(pred, gold):
    """Sentence-level F1 over unordered (phrase, tag) multisets.

    Both-empty scores 1.0 by convention.
    """
    if not pred and not gold:
        return 1.0
    tp = sum((Counter(pred) & Counter(gold)).values())
    p = tp / len(pred) if pred else 0.0
    r = tp / len(gold) if gold else 0.0
    return 2 * p * r / (p + r) if p + r else 0.0


def corpus_ner_f1(sentence_pairs):
    """Micro-averaged F1 over (pred multiset, gold multiset) sentences."""
    tp = n_pred = n_gold = 0
    for pred, gold in sentence_pairs:
        tp += sum((Counter(pred) & Counter(gold)).values())
        n_pred += len(pred)
        n_gold += len(gold)
    if n_pred == 0 and n_gold == 0:
        return 1.0
    p = tp / n_pred if n_pred else 0.0
    r = tp / n_gold if n_gold else 0.0
    return 2 * p * r / (p + r) if p + r else 0.0


def macro_f1(preds, golds, num_classes=3):
    """Unweighted mean of per-class F1; a class absent from both
    predictions and gold contributes 0."""
    if len(preds) != len(golds):
        raise ValueError(f"macro_f1: length mismatch {len(preds)} vs {len(golds)}")
    total = 0.0
    for c in range(num_classes):
        tp = sum(1 for p, g in zip(preds, golds) if p == c and g == c)
        np_ = sum(1 for p in preds if p == c)
        ng = sum(1 for g in golds if g == c)
        p = tp / np_ if np_ else 0.0
        r = tp / ng if ng else 0.0
        total += 2 * p * r / (p + r) if p + r else 0.0
    return total / num_classes


def rouge1_f(candidate, reference):
    """Unigram-overlap F with clipped counts over lowercased whitespace tokens."""
    cand = candidate.lower().split()
    ref = reference.lower().split()
    if not cand or not ref:
        return 0.0
    overlap = sum((Counter(cand) & Counter(ref)).values())
    p = overlap / len(cand)
    r = overlap / len(ref)
    return 2 * p * r / (p + r) if p + r else 0.0


@dataclass
class MetricReport:
    metric: str
    split: str
    seeds: list
    values: list

    @property
    def mean(self):
        return sum(self.values) / len(self.values)

    @property
    def std(self):
        mu = self.mean
        return math.sqrt(sum((v - mu) ** 2 for v in self.values) / len(self.values))

    def to_dict(self):
        return {"metric": self.metric, "split": self.split, "seeds": self.seeds,
                "values": self.values, "mean": self.mean, "std": self.std}


def context_report(manifest, contexts_by_prompt, split="train"):
    """Per-prompt mean ROUGE-1 against the current transcript and mean word
    count, plus a row for the previous ground-truth text.

    contexts_by_prompt: {prompt_id: {segment_key_of_previous_segment: text}}.
    Generations from segment i-1 are scored against the transcript of
    segment i.
    """
    rows = []
    sources = [("previous_gt", None)] + [(p, p) for p in sorted(contexts_by_prompt)]
    for label, prompt_id in sources:
        scores, lengths = [], []
        for sid in manifest.splits[split]:
            segs = manifest.streams[sid]
            for i in range(1, len(segs)):
                current = " ".join(segs[i].transcript)
                if prompt_id is None:
                    text = " ".join(segs[i - 1].transcript)
                else:
                    key = f"{sid}/{i - 1}"
                    if key not in contexts_by_prompt[prompt_id]:
                        raise KeyError(f"missing generation for {key} under {prompt_id}")
                    text = contexts_by_prompt[prompt_id][key]
                scores.append(rouge1_f(text, current))
                lengths.append(len(text.split()))
        rows.append({"source": label,
                     "rouge1_f": sum(scores) / len(scores),
                     "mean_words": sum(lengths) / len(lengths)})
    return rows


def format_table(rows, columns):
    """Aligned-column text table from a list of dicts."""
    widths = {c: max(len(c), *(len(_fmt(r.get(c, ""))) for r in rows)) for c in columns}
    lines = ["  ".join(c.ljust(widths[c]) for c in columns)]
    lines.append("  ".join("-" * widths[c] for c in columns))
    for r in rows:
        lines.append("  ".join(_fmt(r.get(c, "")).ljust(widths[c]) for c in columns))
    return "\n".join(lines)


def _fmt(v):
    if isinstance(v, float):
        return f"{v:.4f}"
    return str(v)


def write_reports(path, reports):
    with open(path, "w", encoding="utf-8") as f:
        for r in reports:
            f.write(json.dumps(r.to_dict() if hasattr(r, "to_dict") else r,
                               sort_keys=True) + "\n")
