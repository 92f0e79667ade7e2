import struct

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from helpers import tree_digest
from refinevl.corpus import (CLS, MASK, PAD, UNK, CorpusError, CorpusSample, SyntheticSpec,
                             Vocabulary, build_vocab, gen_synthetic, load_corpus,
                             negative_template, positive_template, read_image, reference_spec,
                             save_corpus, split_sentences, tokenize, write_image)


class TestSplitSentences:
    def test_two_terminated_sentences(self):
        assert split_sentences("No pneumothorax. Heart size normal.") == [
            "No pneumothorax.", "Heart size normal."]

    def test_unterminated_single_sentence(self):
        assert split_sentences("There is pneumonia") == ["There is pneumonia"]

    def test_ellipsis_is_not_a_boundary_and_letterless_fragment_dropped(self):
        # "a..." is followed by a space but the final '.' of a run is not a lone terminator;
        # "b." ends the first sentence, "123." has no letter and is dropped
        assert split_sentences("a... b. 123.") == ["a... b."]

    def test_question_and_exclamation(self):
        assert split_sentences("Is it? Yes! Done") == ["Is it?", "Yes!", "Done"]

    def test_decimal_point_does_not_split(self):
        assert split_sentences("Nodule of 1.5 cm. Stable.") == ["Nodule of 1.5 cm.", "Stable."]

    @pytest.mark.parametrize("text", ["", "   ", "123. 456.", "..."])
    def test_degenerate_reports_raise(self, text):
        with pytest.raises(CorpusError):
            split_sentences(text)

    @given(st.lists(st.sampled_from(["No effusion.", "Heart is big!", "Why?", "a... b.",
                                     "Lines 2.5 cm.", "x"]), min_size=1, max_size=6))
    def test_split_of_joined_split_is_idempotent(self, parts):
        text = " ".join(parts)
        first = split_sentences(text)
        assert split_sentences(" ".join(first)) == first

    @given(st.text(alphabet="ab .!?\n1", min_size=1, max_size=40))
    def test_sentences_nonempty_and_reconstruct_report(self, text):
        try:
            out = split_sentences(text)
        except CorpusError:
            return
        assert all(s and s == s.strip() for s in out)
        # the letter-bearing text survives in order, modulo whitespace and dropped fragments
        joined = "".join(out).replace(" ", "").replace("\n", "")
        letters = [c for c in text if c.isalpha()]
        assert [c for c in joined if c.isalpha()] == letters


class TestVocabulary:
    def test_lexicographic_ids_after_reserved(self):
        v = build_vocab(["b a", "a"])
        assert v.mapping() == {"[PAD]": PAD, "[UNK]": UNK, "[CLS]": CLS, "[MASK]": MASK,
                               "a": 4, "b": 5}

    def test_min_count_filter(self):
        v = build_vocab(["b a", "a"], min_count=2)
        assert v["a"] == 4 and "b" not in v and v["b"] == UNK

    def test_round_trip(self, tmp_path):
        v = build_vocab(["the lungs are clear", "no effusion"])
        v.save(tmp_path / "vocab.txt")
        w = Vocabulary.load(tmp_path / "vocab.txt")
        assert w == v and w.digest() == v.digest()
        assert (tmp_path / "vocab.txt").read_text() == v.to_text()

    def test_file_format_is_word_tab_id_sorted_by_id(self):
        lines = build_vocab(["zeta alpha"]).to_text().splitlines()
        assert lines[4:] == ["alpha\t4", "zeta\t5"]
        assert [int(l.split("\t")[1]) for l in lines] == list(range(len(lines)))

    def test_empty_corpus_raises(self):
        with pytest.raises(CorpusError):
            build_vocab([])

    def test_reserved_ids_enforced(self):
        with pytest.raises(CorpusError):
            Vocabulary({"[PAD]": 0, "[UNK]": 2, "[CLS]": 1, "[MASK]": 3})


class TestTokenize:
    def vocab(self):
        return Vocabulary({"[PAD]": 0, "[UNK]": 1, "[CLS]": 2, "[MASK]": 3,
                           "no": 4, "pneumothorax": 5})

    def test_direct_lookup(self):
        s = tokenize(["no pneumothorax"], self.vocab())
        assert s.token_ids == [4, 5] and s.sentence_boundaries == [(0, 2)]

    def test_unknown_word(self):
        s = tokenize(["xyzzy"], self.vocab())
        assert s.token_ids == [UNK] and s.sentence_boundaries == [(0, 1)]

    def test_boundary_arithmetic(self):
        s = tokenize(["no no no", "pneumothorax no"], self.vocab())
        assert s.sentence_boundaries == [(0, 3), (3, 5)]

    @given(st.lists(st.text(alphabet="ab .", min_size=1, max_size=12), min_size=1, max_size=5))
    def test_boundaries_partition_tokens(self, sentences):
        s = tokenize(sentences, build_vocab(["a b", "b"]))
        pos = 0
        for a, e in s.sentence_boundaries:
            assert a == pos and e > a
            pos = e
        assert pos == len(s.token_ids)
        assert all(t not in (PAD, CLS, MASK) for t in s.token_ids)


def small_spec(**kw):
    base = dict(diseases=["a", "b", "c"], glyph_map={"a": "cross", "b": "square", "c": "ring"},
                n_samples=20, distractor_rate=0.5, prevalence={"a": 0.5, "b": 0.5, "c": 0.5},
                seed=3)
    base.update(kw)
    return SyntheticSpec(**base)


class TestSynthetic:
    def test_zero_prevalence(self):
        spec = small_spec(prevalence={"a": 0.0, "b": 0.0, "c": 0.0}, n_samples=50)
        for s in gen_synthetic(spec):
            assert not any(s.labels.values())
            assert "There is" not in s.report

    def test_deterministic(self):
        a, b = gen_synthetic(small_spec()), gen_synthetic(small_spec())
        for x, y in zip(a, b):
            assert x.sample_id == y.sample_id and x.report == y.report
            assert x.image.tobytes() == y.image.tobytes() and x.boxes == y.boxes

    def test_prevalence_rate(self):
        spec = small_spec(n_samples=1000, seed=7)
        samples = gen_synthetic(spec)
        for d in spec.diseases:
            rate = np.mean([s.labels[d] for s in samples])
            assert abs(rate - 0.5) <= 0.05, (d, rate)

    def test_label_report_consistency(self):
        for s in gen_synthetic(small_spec(n_samples=200)):
            for d, present in s.labels.items():
                assert (positive_template(d) in split_sentences(s.report)) == present
                if present:
                    assert negative_template(d) not in s.report

    def test_images_in_range_and_boxes_disjoint(self):
        for s in gen_synthetic(small_spec(n_samples=100)):
            assert s.image.shape == (64, 64) and s.image.dtype == np.float32
            assert 0.0 <= s.image.min() and s.image.max() <= 1.0
            boxes = list(s.boxes.values())
            assert set(s.boxes) == {d for d, v in s.labels.items() if v}
            for i in range(len(boxes)):
                for j in range(i + 1, len(boxes)):
                    a, b = boxes[i], boxes[j]
                    assert a[2] <= b[0] or b[2] <= a[0] or a[3] <= b[1] or b[3] <= a[1]

    def test_glyph_pixels_bright_inside_box(self):
        s = next(x for x in gen_synthetic(small_spec()) if x.boxes)
        x0, y0, x1, y1 = next(iter(s.boxes.values()))
        assert s.image[y0:y1, x0:x1].max() == pytest.approx(0.9)

    def test_unplaceable_glyphs_raise(self):
        spec = small_spec(prevalence={"a": 1.0, "b": 1.0, "c": 1.0}, glyph_size=48)
        with pytest.raises(CorpusError):
            gen_synthetic(spec, max_retries=5)

    @pytest.mark.parametrize("bad", [dict(n_samples=0), dict(prevalence={"a": 1.5, "b": 0, "c": 0}),
                                     dict(glyph_map={"a": "cross", "b": "square"}),
                                     dict(glyph_map={"a": "cross", "b": "square", "c": "blob"})])
    def test_invalid_spec(self, bad):
        with pytest.raises(CorpusError):
            small_spec(**bad).validate()

    def test_from_dict_rejects_unknown_fields(self):
        d = small_spec().to_dict()
        assert SyntheticSpec.from_dict(d) == small_spec()
        d["colour"] = "red"
        with pytest.raises(CorpusError, match="colour"):
            SyntheticSpec.from_dict(d)

    def test_reference_spec_shape(self):
        spec = reference_spec()
        assert spec.n_samples == 500 and len(spec.diseases) == 3
        assert spec.image_size == 64 and spec.patch_size == 8


class TestOnDisk:
    def test_image_binary_layout(self, tmp_path):
        img = np.arange(6, dtype=np.float32).reshape(2, 3) / 10
        write_image(tmp_path / "x.f32", img)
        raw = (tmp_path / "x.f32").read_bytes()
        assert raw[:8] == struct.pack("<II", 2, 3)
        assert raw[8:] == img.astype("<f4").tobytes()
        assert np.array_equal(read_image(tmp_path / "x.f32"), img)

    def test_corpus_round_trip(self, tmp_path):
        samples = gen_synthetic(small_spec())
        save_corpus(samples, tmp_path / "c")
        back = load_corpus(tmp_path / "c")
        assert [s.sample_id for s in back] == [s.sample_id for s in samples]
        for a, b in zip(samples, back):
            assert a.report == b.report and a.labels == b.labels and a.boxes == b.boxes
            assert a.image.tobytes() == b.image.tobytes()

    def test_corpus_bytes_are_deterministic(self, tmp_path):
        save_corpus(gen_synthetic(small_spec()), tmp_path / "a")
        save_corpus(gen_synthetic(small_spec()), tmp_path / "b")
        assert tree_digest(tmp_path / "a") == tree_digest(tmp_path / "b")

    def test_sample_validation(self):
        with pytest.raises(CorpusError):
            CorpusSample("x", np.zeros((10, 10), np.float32), "ok").validate(8)
        with pytest.raises(CorpusError):
            CorpusSample("x", np.zeros((8, 8), np.float32), "  ").validate(8)
