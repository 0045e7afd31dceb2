import numpy as np
import pytest

from ctxtune.datasynth import (CorpusConfig, ManifestError,
                               codebook_argmax_accuracy, generate_corpus,
                               read_manifest, write_manifest)

SMALL = dict(topics=4, train_streams=5, eval_streams=2, segments_per_stream=4,
             tokens_per_segment=8, seed=7)


def small_corpus(**kw):
    return generate_corpus(CorpusConfig(**{**SMALL, **kw}))


def test_segment_counts_and_indices():
    man = small_corpus()
    assert sum(len(s) for s in man.streams.values()) == 7 * 4
    for segs in man.streams.values():
        assert [s.index for s in segs] == [0, 1, 2, 3]


def test_same_seed_is_byte_identical(tmp_path):
    for name in ("a", "b"):
        man = small_corpus()
        write_manifest(man, tmp_path / f"{name}.jsonl", tmp_path / f"{name}.bin")
    assert (tmp_path / "a.jsonl").read_bytes() == (tmp_path / "b.jsonl").read_bytes()
    assert (tmp_path / "a.bin").read_bytes() == (tmp_path / "b.bin").read_bytes()


def test_different_seed_differs():
    a, b = small_corpus(seed=1), small_corpus(seed=2)
    segs_a = next(iter(a.streams.values()))
    segs_b = next(iter(b.streams.values()))
    assert not np.array_equal(segs_a[0].features, segs_b[0].features)


def test_ambiguous_candidates_share_means_exactly():
    man = small_corpus()
    for wa, wb in man.candidates:
        assert np.array_equal(man.codebook[wa], man.codebook[wb])


def test_ambiguous_labels_depend_on_topic():
    man = generate_corpus(CorpusConfig(seed=0))
    for c in range(man.config.num_ambiguous):
        sides = {t.resolution[c] for t in man.topics}
        assert len(sides) == 2  # at least 2 topics disagree on every codeword


def test_context_free_classifier_is_at_chance():
    man = generate_corpus(CorpusConfig(seed=0))
    acc = codebook_argmax_accuracy(man, split="train")
    assert abs(acc - 0.5) <= 0.03


def test_sentiment_is_topic_mod_3():
    man = small_corpus()
    for sid, segs in man.streams.items():
        topic = man.topic_of(sid)
        assert all(s.sentiment == topic.id % 3 for s in segs)


def test_ner_marks_keyword_spans():
    man = small_corpus()
    for sid, segs in man.streams.items():
        topic = man.topic_of(sid)
        for seg in segs:
            want = [(topic.keyword, topic.tag)
                    for w in seg.transcript if w == topic.keyword]
            assert seg.ner == want


def test_token_spans_cover_features():
    man = small_corpus()
    for seg in man.segments():
        assert seg.token_spans[0][0] == 0
        for (a, b), (c, _) in zip(seg.token_spans, seg.token_spans[1:]):
            assert b == c and b > a
        assert seg.token_spans[-1][1] == seg.features.shape[0]


def test_splits_disjoint():
    man = small_corpus()
    assert not set(man.splits["train"]) & set(man.splits["eval"])


def test_degenerate_configs_rejected():
    with pytest.raises(ValueError):
        generate_corpus(CorpusConfig(topics=1))
    with pytest.raises(ValueError):
        generate_corpus(CorpusConfig(ambiguity_rate=1.5))
    with pytest.raises(ValueError):
        generate_corpus(CorpusConfig(train_streams=0))


def test_round_trip_structural_equality(tmp_path):
    man = small_corpus()
    write_manifest(man, tmp_path / "m.jsonl", tmp_path / "f.bin")
    back = read_manifest(tmp_path / "m.jsonl", tmp_path / "f.bin")
    assert back.config == man.config
    assert back.splits == man.splits
    assert back.stream_topic == man.stream_topic
    assert back.common == man.common
    for sid in man.streams:
        for a, b in zip(man.streams[sid], back.streams[sid]):
            assert a.transcript == b.transcript
            assert a.ner == b.ner
            assert a.sentiment == b.sentiment
            assert a.token_spans == b.token_spans
            assert a.ambiguous == b.ambiguous
            assert np.array_equal(a.features, b.features)
    for w in man.codebook:
        assert np.array_equal(man.codebook[w], back.codebook[w])


def test_truncated_manifest_is_integrity_error(tmp_path):
    man = small_corpus()
    write_manifest(man, tmp_path / "m.jsonl", tmp_path / "f.bin")
    blob = (tmp_path / "m.jsonl").read_bytes()
    (tmp_path / "m.jsonl").write_bytes(blob[:len(blob) // 2])
    with pytest.raises(ManifestError):
        read_manifest(tmp_path / "m.jsonl", tmp_path / "f.bin")


def test_corrupted_record_is_integrity_error(tmp_path):
    man = small_corpus()
    write_manifest(man, tmp_path / "m.jsonl", tmp_path / "f.bin")
    lines = (tmp_path / "m.jsonl").read_text().splitlines()
    lines[2] = lines[2].replace('"rec"', '"rec"').replace("amb", "bma", 1)
    (tmp_path / "m.jsonl").write_text("\n".join(lines) + "\n")
    with pytest.raises(ManifestError):
        read_manifest(tmp_path / "m.jsonl", tmp_path / "f.bin")


def test_version_mismatch_is_explicit(tmp_path):
    man = small_corpus()
    write_manifest(man, tmp_path / "m.jsonl", tmp_path / "f.bin")
    import json
    lines = (tmp_path / "m.jsonl").read_text().splitlines()
    rec = json.loads(lines[0])["rec"]
    rec["version"] = 999
    import zlib
    payload = json.dumps(rec, sort_keys=True)
    lines[0] = json.dumps({"crc": zlib.crc32(payload.encode()), "rec": rec},
                          sort_keys=True)
    (tmp_path / "m.jsonl").write_text("\n".join(lines) + "\n")
    with pytest.raises(ManifestError) as e:
        read_manifest(tmp_path / "m.jsonl", tmp_path / "f.bin")
    assert "version" in str(e.value)


def test_previous_text_of():
    man = small_corpus()
    for sid, segs in man.streams.items():
        assert man.previous_text_of(sid, 0) is None
        for i in range(1, len(segs)):
            assert man.previous_text_of(sid, i) == segs[i - 1].transcript
    with pytest.raises(KeyError):
        man.previous_text_of("no-such-stream", 1)
    with pytest.raises(KeyError):
        man.previous_text_of(next(iter(man.streams)), 99)


def test_segment_starts_with_topic_keyword():
    man = small_corpus()
    for sid, segs in man.streams.items():
        kw = man.topic_of(sid).keyword
        for seg in segs:
            assert seg.transcript[0] == kw
            assert seg.ambiguous[0] is None


def test_ambiguous_positions_keep_anchor_clearance():
    man = generate_corpus(CorpusConfig(seed=0))
    for seg in man.segments():
        for pos, amb in enumerate(seg.ambiguous):
            if amb is not None:
                assert pos >= 3


def test_frames_per_token_in_range():
    man = small_corpus()
    cfg = man.config
    for seg in man.segments():
        for a, b in seg.token_spans:
            assert cfg.frames_min <= b - a <= cfg.frames_max


def test_vocabulary_is_sorted_and_complete():
    man = small_corpus()
    vocab = man.vocabulary()
    assert vocab == sorted(vocab)
    for seg in man.segments():
        assert all(w in vocab for w in seg.transcript)
