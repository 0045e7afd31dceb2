from types import SimpleNamespace

import numpy as np
import pytest

from ctxtune import losses as L
from ctxtune.config import load_config
from ctxtune.datasynth import CorpusConfig, generate_corpus
from ctxtune.models import ContextModel
from ctxtune.nn import ParameterStore
from ctxtune.training import (Adam, TrainingDiverged, WeightAverage,
                              _segment_loss, build_model_config,
                              evaluate_system, train_one)

FAST_MODEL = {"model.d_model": "16", "model.encoder_heads": "2",
              "model.d_text": "8", "model.fusion_head_dim": "8",
              "model.ffn_mult": "2", "model.acoustic_layers": "1",
              "model.text_layers": "1"}


@pytest.fixture(scope="module")
def manifest():
    return generate_corpus(CorpusConfig(topics=3, train_streams=3, eval_streams=2,
                                        segments_per_stream=3, tokens_per_segment=6,
                                        seed=21))


def fast_cfg(tmp_path, **overrides):
    ov = dict(FAST_MODEL)
    ov.update({k: str(v) for k, v in overrides.items()})
    cfg = load_config(None, ov)
    cfg.paths.cache = str(tmp_path / "cache.jsonl")
    cfg.paths.out_dir = str(tmp_path / "runs")
    return cfg


def test_zero_steps_keeps_init_weights(manifest, tmp_path):
    cfg = fast_cfg(tmp_path, **{"train.steps": 0, "train.variant": "baseline"})
    _, model = train_one(cfg, manifest, seed=4)
    model_cfg, _, _ = build_model_config(cfg, manifest)
    fresh = ContextModel(model_cfg, "baseline", seed=4)
    for name, p in fresh.store.params.items():
        assert np.array_equal(p.data, model.store.params[name].data), name


def test_training_overfits_small_corpus(manifest, tmp_path):
    cfg = fast_cfg(tmp_path, **{"train.steps": 300, "train.variant": "baseline",
                                "train.lr": "3e-3"})
    result, _ = train_one(cfg, manifest, seed=0)
    assert result.losses[-1] < 0.1 * result.losses[0], \
        (result.losses[0], result.losses[-1])


def test_fixed_seed_reproduces_loss_trajectory(manifest, tmp_path):
    cfg = fast_cfg(tmp_path, **{"train.steps": 20, "train.variant": "generative_aware"})
    a, _ = train_one(cfg, manifest, seed=1)
    b, _ = train_one(cfg, manifest, seed=1)
    assert a.losses == b.losses
    assert a.context_eval == b.context_eval


def test_different_seeds_differ(manifest, tmp_path):
    cfg = fast_cfg(tmp_path, **{"train.steps": 10, "train.variant": "baseline"})
    a, _ = train_one(cfg, manifest, seed=1)
    b, _ = train_one(cfg, manifest, seed=2)
    assert a.losses != b.losses


def test_infeasible_ctc_segment_is_skipped(manifest, tmp_path):
    cfg = fast_cfg(tmp_path, **{"train.variant": "baseline"})
    model_cfg, label_vocab, text_vocab = build_model_config(cfg, manifest)
    model = ContextModel(model_cfg, "baseline", seed=0)
    words = label_vocab.words[:3]
    seg = SimpleNamespace(features=np.zeros((1, model_cfg.d_feat)),
                          transcript=words, sentiment=0)
    loss, _ = _segment_loss(cfg, model, label_vocab, text_vocab, seg, None,
                            L.LossConfig(alpha=cfg.train.alpha))
    assert loss is None  # 1 frame cannot emit a 3-token target


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_divergence_raises(manifest, tmp_path):
    cfg = fast_cfg(tmp_path, **{"train.steps": 8, "train.variant": "baseline",
                                "train.lr": "1e30", "train.clip_norm": "1e30",
                                "train.ema_decay": "0"})
    with pytest.raises(TrainingDiverged):
        train_one(cfg, manifest, seed=0)


def test_evaluate_asr_metric_keys(manifest, tmp_path):
    cfg = fast_cfg(tmp_path, **{"train.steps": 0, "train.variant": "baseline"})
    _, model = train_one(cfg, manifest, seed=0)
    metrics = evaluate_system(cfg, model, manifest)
    assert set(metrics) == {"wer", "ner_f1", "ambiguous_error"}
    assert 0.0 <= metrics["wer"]
    assert 0.0 <= metrics["ambiguous_error"] <= 100.0


def test_evaluate_sentiment_metric_keys(manifest, tmp_path):
    cfg = fast_cfg(tmp_path, **{"train.steps": 0, "train.variant": "baseline",
                                "train.task": "sentiment"})
    _, model = train_one(cfg, manifest, seed=0)
    metrics = evaluate_system(cfg, model, manifest)
    assert set(metrics) == {"macro_f1"}
    assert 0.0 <= metrics["macro_f1"] <= 1.0


def test_evaluation_is_deterministic(manifest, tmp_path):
    cfg = fast_cfg(tmp_path, **{"train.steps": 10,
                                "train.variant": "generative_injection"})
    _, model = train_one(cfg, manifest, seed=0)
    assert evaluate_system(cfg, model, manifest) == \
        evaluate_system(cfg, model, manifest)


def test_generative_aware_evaluates_without_context(manifest, tmp_path):
    cfg = fast_cfg(tmp_path, **{"train.steps": 5,
                                "train.variant": "generative_aware"})
    _, model = train_one(cfg, manifest, seed=0)
    metrics = evaluate_system(cfg, model, manifest)
    assert set(metrics) == {"wer", "ner_f1", "ambiguous_error"}


def test_checkpoint_written_and_loadable(manifest, tmp_path):
    cfg = fast_cfg(tmp_path, **{"train.steps": 3, "train.variant": "generative_aware"})
    result, model = train_one(cfg, manifest, seed=0, out_dir=str(tmp_path / "ck"))
    assert result.checkpoint_path
    back = ContextModel.load(result.checkpoint_path, with_text_encoder=False)
    feats = next(manifest.segments("eval")).features
    assert np.array_equal(model.forward(feats).logits.data,
                          back.forward(feats).logits.data)


def test_weight_average_swap_round_trip():
    store = ParameterStore(seed=0)
    p = store.create("w", (3,))
    ema = WeightAverage(store, decay=0.9)
    before = p.data.copy()
    p.data += 1.0
    ema.update()
    raw = ema.swap_in()
    assert np.array_equal(raw["w"], before + 1.0)
    # warm-up horizon: first average is (2/11)*init + (9/11)*new
    d = min(0.9, 2.0 / 11.0)
    assert np.allclose(p.data, d * before + (1 - d) * (before + 1.0))
    ema.swap_out(raw)
    assert np.array_equal(p.data, before + 1.0)


def test_adam_clips_global_gradient_norm():
    store = ParameterStore(seed=0)
    p = store.create("w", (4,))
    opt = Adam(store, lr=0.1, clip_norm=5.0)
    p.grad = np.full(4, 5.0)    # norm 10 -> scaled by 0.5
    opt.step()
    assert np.allclose(opt.m["w"], 0.1 * 2.5)
    p.zero_grad()
    p.grad = np.full(4, 1.0)    # norm 2 -> untouched
    opt.step()
    expected = 0.9 * (0.1 * 2.5) + 0.1 * 1.0
    assert np.allclose(opt.m["w"], expected)
