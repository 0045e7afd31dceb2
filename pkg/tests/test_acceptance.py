"""Acceptance gate: one test per release criterion, each printing a
single PASS/FAIL line with the measured value and tolerance.

The ordering experiment (criteria 6 and 7) trains all four variants over
three seeds at the default configuration and takes roughly 25 minutes;
everything else is fast.
"""

import dataclasses
import itertools
import math
import time
from types import SimpleNamespace

import numpy as np
import pytest

from ctxtune import losses as L
from ctxtune.config import load_config
from ctxtune.datasynth import CorpusConfig, generate_corpus
from ctxtune.gradsuite import run_grad_suite
from ctxtune.metrics import macro_f1, ner_pair_f1, rouge1_f, wer
from ctxtune.models import (ContextModel, ModelConfig, fusion_param_count,
                            student_param_count)
from ctxtune.tensor import Tensor
from ctxtune.training import (build_model_config, compare_variants,
                              distillation_cosine, evaluate_system, train_one)


def _verdict(num, ok, detail):
    print(f"\ncriterion {num}: {'PASS' if ok else 'FAIL'} - {detail}")
    assert ok, f"criterion {num}: {detail}"


# --- criterion 1: gradient suite ---

def test_criterion_1_gradient_suite():
    t0 = time.time()
    report = run_grad_suite()
    elapsed = time.time() - t0
    ok = report["pass"] and elapsed < 120.0
    _verdict(1, ok, f"max relative error {report['max_rel_err']:.3e} "
                    f"(tol 1e-4), {elapsed:.1f}s (limit 120s)")


# --- criterion 2: CTC against exhaustive path enumeration ---

def _collapse(path, blank):
    out, prev = [], None
    for p in path:
        if p != prev and p != blank:
            out.append(p)
        prev = p
    return out


def _brute_force_ctc(log_probs, target, blank=0):
    t_len, vocab = log_probs.shape
    total = -np.inf
    for path in itertools.product(range(vocab), repeat=t_len):
        if _collapse(path, blank) == list(target):
            total = np.logaddexp(total, sum(log_probs[t, c]
                                            for t, c in enumerate(path)))
    return -total


def test_criterion_2_ctc_matches_enumeration():
    logp = np.full((3, 3), np.log(1.0 / 3.0))
    uniform = float(L.ctc_loss(Tensor(logp), [1, 2]).data)
    golden_ok = f"{uniform:.4f}" == "1.6864" and \
        abs(uniform - (-math.log(5.0 / 27.0))) < 1e-12

    rng = np.random.default_rng(0)
    checked, max_err = 0, 0.0
    while checked < 200:
        t = int(rng.integers(1, 7))          # T <= 6
        v = int(rng.integers(2, 5))          # V <= 4
        target = list(rng.integers(1, v, size=int(rng.integers(1, 4))))
        if t < L.ctc_required_length(target):
            continue
        logits = rng.normal(0, 2, size=(t, v))
        lp = logits - np.log(np.exp(logits).sum(axis=-1, keepdims=True))
        got = float(L.ctc_loss(Tensor(lp), target).data)
        max_err = max(max_err, abs(got - _brute_force_ctc(lp, target)))
        checked += 1
    ok = golden_ok and max_err < 1e-8
    _verdict(2, ok, f"uniform case {uniform:.4f} (want 1.6864); "
                    f"{checked} random instances, max |diff| {max_err:.2e} "
                    f"(tol 1e-8)")


# --- criterion 3: residual identity of the fusion block ---

def test_criterion_3_fusion_residual_identity():
    cfg = ModelConfig(label_vocab_size=50, text_vocab_size=60)
    model = ContextModel(cfg, "generative_aware", seed=0)
    model.store["fusion.wv"].data[...] = 0.0
    rng = np.random.default_rng(7)
    exact = 0
    for _ in range(100):
        z = Tensor(rng.normal(size=(int(rng.integers(1, 17)), cfg.d_model)))
        e = Tensor(rng.normal(size=(cfg.d_text,)))
        exact += np.array_equal(model.fuse_context(z, e).data, z.data)
    _verdict(3, exact == 100,
             f"{exact}/100 random (Z, e) pairs bitwise identical with "
             f"zeroed value projection")


# --- criterion 4: generative-aware inference without text modules ---

def test_criterion_4_inference_without_text_encoder(tmp_path):
    cfg = load_config(None, {"corpus.topics": "3", "corpus.train_streams": "3",
                             "corpus.eval_streams": "2",
                             "corpus.segments_per_stream": "3",
                             "corpus.tokens_per_segment": "6",
                             "corpus.seed": "5"})
    manifest = generate_corpus(cfg.corpus)
    model_cfg, _, _ = build_model_config(cfg, manifest)
    model = ContextModel(model_cfg, "generative_aware", seed=0,
                         with_text_encoder=False)
    metrics = evaluate_system(cfg, model, manifest)
    ok = model.text_encoder is None and \
        set(metrics) == {"wer", "ner_f1", "ambiguous_error"}
    _verdict(4, ok, f"evaluation without text encoder or generator "
                    f"produced {sorted(metrics)}")


# --- criterion 5: parameter arithmetic ---

def test_criterion_5_parameter_arithmetic():
    cfg = ModelConfig(label_vocab_size=50, text_vocab_size=60)
    counts = {v: ContextModel(cfg, v, seed=0).count_inference_params()
              for v in ("baseline", "context_injection",
                        "generative_injection", "generative_aware")}
    extra = counts["generative_aware"] - counts["baseline"]
    want = fusion_param_count(cfg) + student_param_count(cfg)
    ok = extra == want and counts["generative_aware"] < counts["generative_injection"]
    _verdict(5, ok, f"GA - baseline = {extra} (want fusion+student = {want}); "
                    f"GA {counts['generative_aware']} < "
                    f"GI {counts['generative_injection']}")


# --- criteria 6 and 7: the full ordering experiment ---

@pytest.fixture(scope="module")
def experiment(tmp_path_factory):
    root = tmp_path_factory.mktemp("acceptance")
    cfg = load_config()
    cfg.paths.cache = str(root / "cache.jsonl")
    cfg.paths.out_dir = str(root / "runs")
    manifest = generate_corpus(cfg.corpus)
    report, per_variant = compare_variants(cfg, manifest)
    return SimpleNamespace(cfg=cfg, manifest=manifest, report=report,
                           per_variant=per_variant)


def _mean(per_variant, variant, key):
    return float(np.mean([m[key] for m in per_variant[variant]["metrics"]]))


def test_criterion_6_variant_ordering(experiment):
    pv = experiment.per_variant
    base = _mean(pv, "baseline", "ambiguous_error")
    gi = _mean(pv, "generative_injection", "ambiguous_error")
    ga = _mean(pv, "generative_aware", "ambiguous_error")
    delta = experiment.report.d_vs_e_delta
    minutes = experiment.report.wall_clock / 60.0
    ok = base >= 40.0 and gi <= 25.0 and ga <= 25.0 and delta <= 2.0 \
        and minutes <= 30.0
    _verdict(6, ok, f"ambiguous error: baseline {base:.2f} (>=40), "
                    f"GI {gi:.2f} (<=25), GA {ga:.2f} (<=25), "
                    f"|D-E| {delta:.2f} (<=2); "
                    f"wall clock {minutes:.1f} min (<=30)")


def test_criterion_7_distillation_quality(experiment):
    cfg, manifest = experiment.cfg, experiment.manifest
    ga = experiment.per_variant["generative_aware"]
    cosines = [distillation_cosine(cfg, model, manifest)
               for model in ga["models"]]
    bad_transitions = []
    for result in ga["results"]:
        curve = [v for _, v in result.context_eval]
        bad_transitions.append(sum(b >= a for a, b in zip(curve, curve[1:])))
    ok = min(cosines) > 0.9 and all(b <= 1 for b in bad_transitions)
    _verdict(7, ok, f"student/teacher cosine per seed "
                    f"{[f'{c:.3f}' for c in cosines]} (>0.9); "
                    f"non-decreasing held-out checkpoints per seed "
                    f"{bad_transitions} (<=1 of {len(ga['results'][0].context_eval)})")


# --- criterion 8: metric golden values ---

def test_criterion_8_metric_goldens():
    checks = [
        ("wer 66.67", abs(wer(["a", "b", "c"], ["a", "x", "c", "d"]) -
                          200.0 / 3.0) < 1e-9),
        ("wer empty hyp 100", wer(["a"], []) == 100.0),
        ("ner f1 0.5", ner_pair_f1([("john", "PER"), ("paris", "LOC")],
                                   [("john", "PER"), ("london", "LOC")]) == 0.5),
        ("ner both empty 1.0", ner_pair_f1([], []) == 1.0),
        ("rouge1 0.5714", round(rouge1_f("the cat sat", "the cat ran fast"), 4)
         == 0.5714),
        ("macro f1 2/3", abs(macro_f1([0, 1], [0, 1]) - 2.0 / 3.0) < 1e-9),
        ("cross entropy ln 3",
         abs(float(L.cross_entropy(Tensor([[0.0, 0.0, 0.0]]), 1).data) -
             math.log(3.0)) < 1e-12),
        ("cross entropy saturated",
         float(L.cross_entropy(Tensor([[20.0, 0.0, 0.0]]), 0).data) < 1e-8),
    ]
    failed = [name for name, ok in checks if not ok]
    _verdict(8, not failed, f"{len(checks) - len(failed)}/{len(checks)} golden "
                            f"values exact" + (f"; failed: {failed}" if failed else ""))


# --- criterion 9: echo generator makes GI and CI coincide ---

def test_criterion_9_echo_generator_bit_identity(tmp_path):
    cfg = load_config(None, {
        "corpus.topics": "3", "corpus.train_streams": "3",
        "corpus.eval_streams": "2", "corpus.segments_per_stream": "3",
        "corpus.tokens_per_segment": "6", "corpus.seed": "9",
        "model.d_model": "16", "model.encoder_heads": "2", "model.d_text": "8",
        "model.fusion_head_dim": "8", "model.ffn_mult": "2",
        "model.acoustic_layers": "1", "model.text_layers": "1",
        "generator.kind": "echo", "train.steps": "40", "train.seeds": "0,1"})
    cfg.paths.cache = str(tmp_path / "cache.jsonl")
    manifest = generate_corpus(cfg.corpus)
    identical = True
    for seed in cfg.train.seeds:
        runs = {}
        for variant in ("context_injection", "generative_injection"):
            vcfg = dataclasses.replace(cfg, train=dataclasses.replace(
                cfg.train, variant=variant))
            result, model = train_one(vcfg, manifest, seed)
            runs[variant] = (result, model, evaluate_system(vcfg, model, manifest))
        (res_ci, m_ci, met_ci), (res_gi, m_gi, met_gi) = \
            runs["context_injection"], runs["generative_injection"]
        identical &= res_ci.losses == res_gi.losses
        identical &= met_ci == met_gi
        identical &= all(np.array_equal(p.data, m_gi.store.params[n].data)
                         for n, p in m_ci.store.params.items())
    _verdict(9, identical, "context_injection and generative_injection "
                           "bit-identical (losses, weights, metrics) under an "
                           "echo generator, seeds [0, 1]")
