import math

import numpy as np
import pytest

from scob.errors import ConfigError, InputError
from scob.rng import stream
from scob.seqcodec import (
    NUM_COORD_BINS,
    PRINTABLE_ASCII,
    Vocab,
    decode_ocr_read,
    dequantize_coord,
    encode_ocr_read,
    encode_text_read,
    quantize_coord,
    raster_order,
)

from conftest import make_sample


class TestVocab:
    def test_sections_disjoint_and_sized(self, vocab):
        assert len(vocab) == 5 + NUM_COORD_BINS + 95
        ids = set()
        for i in range(len(vocab)):
            vocab.token(i)
            ids.add(i)
        assert len(ids) == len(vocab)
        assert vocab.is_coord(vocab.coord_id(0))
        assert not vocab.is_char(vocab.coord_id(999))
        assert vocab.char_of(vocab.char_id("A")) == "A"

    def test_charset_rejects_duplicates(self):
        with pytest.raises(ConfigError):
            Vocab("AAB")

    def test_file_roundtrip(self, vocab, tmp_path):
        path = tmp_path / "vocab.txt"
        vocab.save(path)
        loaded = Vocab.load(path)
        assert loaded.charset == vocab.charset
        assert loaded.content_hash() == vocab.content_hash()

    def test_space_survives_roundtrip(self, tmp_path):
        v = Vocab("AB Z")
        path = tmp_path / "vocab.txt"
        v.save(path)
        assert Vocab.load(path).charset == "AB Z"

    def test_hash_changes_with_charset(self):
        assert Vocab("ABC").content_hash() != Vocab("ABD").content_hash()


class TestQuantize:
    def test_lower_edge(self):
        assert quantize_coord(0, 768) == 0

    def test_upper_edge_clamps(self):
        assert quantize_coord(768, 768) == 999

    def test_midpoint(self):
        # oracle: floor(1000 * 384 / 768)
        assert quantize_coord(384, 768) == math.floor(1000 * 384 / 768) == 500

    def test_out_of_range(self):
        with pytest.raises(InputError):
            quantize_coord(-1, 768)
        with pytest.raises(InputError):
            quantize_coord(769, 768)

    def test_dequantize_edges(self):
        assert dequantize_coord(0, 1000) == 0.5
        assert dequantize_coord(999, 1000) == 999.5

    def test_dequantize_formula(self):
        assert dequantize_coord(500, 768) == pytest.approx((500 + 0.5) * 768 / 1000)

    def test_roundtrip_error_bound(self):
        rng = stream(11)
        for _ in range(500):
            dim = float(rng.integers(32, 2000))
            v = float(rng.uniform(0, dim))
            err = abs(dequantize_coord(quantize_coord(v, dim), dim) - v)
            assert err <= dim / NUM_COORD_BINS


class TestRasterOrder:
    def test_empty(self):
        assert raster_order([]) == []

    def test_x_tiebreak(self):
        s = make_sample([("a", (50, 10, 60, 20)), ("b", (10, 10, 20, 20))])
        assert raster_order(s.words) == [1, 0]

    def test_sorted_is_identity(self):
        s = make_sample([("a", (0, 0, 5, 5)), ("b", (0, 10, 5, 15)), ("c", (0, 20, 5, 25))])
        assert raster_order(s.words) == [0, 1, 2]

    def test_missing_boxes_error(self):
        s = make_sample([("a", None)])
        with pytest.raises(InputError):
            raster_order(s.words)


class TestEncodeOcrRead:
    def test_empty_sample(self, vocab):
        s = make_sample([])
        seq = encode_ocr_read(s, vocab)
        assert seq.target_ids == [vocab.ocr_read_id, vocab.eos_id]
        assert seq.loss_weights == [1.0, 1.0]
        assert seq.input_ids == [vocab.pad_id, vocab.ocr_read_id]

    def test_single_word_layout(self, vocab):
        # box chosen so quantization gives bins (10, 20, 30, 40) at dims 1000
        s = make_sample([("AB", (10.0, 20.0, 30.0, 40.0))], width=1000, height=1000)
        seq = encode_ocr_read(s, vocab, order="raster", weak=False)
        expected = [
            vocab.ocr_read_id,
            vocab.coord_id(10),
            vocab.coord_id(20),
            vocab.coord_id(30),
            vocab.coord_id(40),
            vocab.char_id("A"),
            vocab.char_id("B"),
            vocab.eos_id,
        ]
        assert seq.target_ids == expected
        assert seq.loss_weights == [1.0] * 8
        assert seq.supcon_labels == [None] * 5 + ["A", "B", None]
        assert seq.is_coord == [False, True, True, True, True, False, False, False]
        # teacher forcing input is the shifted target with a start symbol
        assert seq.input_ids == [vocab.pad_id] + expected[:-1]

    def test_weak_real_masks_inputs_and_weights(self, vocab):
        s = make_sample([("AB", (10.0, 20.0, 30.0, 40.0))], width=1000, height=1000, domain="real")
        full = encode_ocr_read(s, vocab, order="raster", weak=False)
        weak = encode_ocr_read(s, vocab, order="raster", weak=True)
        assert weak.target_ids == full.target_ids
        assert weak.loss_weights == [1.0, 0.0, 0.0, 0.0, 0.0, 1.0, 1.0, 1.0]
        assert weak.input_ids[2:6] == [vocab.mask_id] * 4
        assert weak.input_ids[:2] == full.input_ids[:2]
        assert weak.input_ids[6:] == full.input_ids[6:]
        assert weak.supcon_labels == full.supcon_labels

    def test_weak_synthetic_keeps_full_supervision(self, vocab):
        s = make_sample([("AB", (10.0, 20.0, 30.0, 40.0))], width=1000, height=1000)
        weak = encode_ocr_read(s, vocab, order="raster", weak=True)
        assert weak.loss_weights == [1.0] * 8
        assert vocab.mask_id not in weak.input_ids

    def test_weak_boxless_real_uses_mask_targets(self, vocab):
        s = make_sample([("AB", None)], domain="real")
        seq = encode_ocr_read(s, vocab, order="raster", weak=True)
        assert seq.target_ids[1:5] == [vocab.mask_id] * 4
        assert seq.loss_weights[1:5] == [0.0] * 4

    def test_full_supervision_requires_boxes(self, vocab):
        s = make_sample([("AB", None)], domain="real")
        with pytest.raises(InputError):
            encode_ocr_read(s, vocab, weak=False)

    def test_out_of_charset_error_names_character(self):
        v = Vocab("AB")
        s = make_sample([("AX", (0, 0, 5, 5))], domain="synthetic")
        with pytest.raises(InputError, match="'X'"):
            encode_ocr_read(s, v)

    def test_random_order_uses_stream(self, vocab):
        words = [(\
            f"W{i}", (float(i * 10), 0.0, float(i * 10 + 8), 8.0)) for i in range(6)]
        s = make_sample(words, width=100, height=20)
        a = encode_ocr_read(s, vocab, order="random", rng=stream(3))
        b = encode_ocr_read(s, vocab, order="random", rng=stream(3))
        c = encode_ocr_read(s, vocab, order="random", rng=stream(4))
        assert a.target_ids == b.target_ids
        assert a.target_ids != c.target_ids  # overwhelmingly likely for 6 words

    def test_truncation_never_splits_words(self, vocab):
        words = [(f"WORD{i}", (0.0, float(i * 10), 20.0, float(i * 10 + 8))) for i in range(10)]
        s = make_sample(words, width=100, height=200)
        for max_len in range(2, 40):
            seq = encode_ocr_read(s, vocab, order="raster", max_len=max_len)
            assert len(seq) <= max_len
            assert seq.target_ids[0] == vocab.ocr_read_id
            assert seq.target_ids[-1] == vocab.eos_id
            # every coordinate run inside must be exactly 4 long and followed by chars
            decoded = decode_ocr_read(seq.target_ids, s.width, s.height, vocab)
            assert not decoded.skipped
            n_words = (len(seq) - 2) // 9  # 4 coords + 5 chars each
            assert len(decoded.words) == n_words

    def test_label_placement_invariant(self, vocab):
        rng = stream(5)
        for _ in range(50):
            n = int(rng.integers(0, 5))
            words = []
            for i in range(n):
                k = int(rng.integers(1, 6))
                text = "".join(PRINTABLE_ASCII[j] for j in rng.integers(33, 90, size=k))
                words.append((text, (float(i * 20), 0.0, float(i * 20 + 10), 10.0)))
            s = make_sample(words, width=200, height=20)
            seq = encode_ocr_read(s, vocab, order="raster")
            for tid, label in zip(seq.target_ids, seq.supcon_labels):
                assert (label is not None) == vocab.is_char(tid)


class TestEncodeTextRead:
    def test_empty(self, vocab):
        seq = encode_text_read(make_sample([]), vocab)
        assert seq.target_ids == [vocab.text_read_id, vocab.eos_id]

    def test_single_word(self, vocab):
        seq = encode_text_read(make_sample([("HI", (0, 0, 5, 5))]), vocab)
        assert seq.target_ids == [
            vocab.text_read_id,
            vocab.char_id("H"),
            vocab.char_id("I"),
            vocab.eos_id,
        ]

    def test_raster_not_alphabetical(self, vocab):
        s = make_sample([("B", (0.0, 5.0, 5.0, 10.0)), ("A", (0.0, 100.0, 5.0, 105.0))], height=200)
        seq = encode_text_read(s, vocab)
        chars = [vocab.char_of(t) for t in seq.target_ids if vocab.is_char(t)]
        assert chars == ["B", " ", "A"]

    def test_all_weights_one(self, vocab):
        rng = stream(9)
        for _ in range(25):
            n = int(rng.integers(0, 6))
            words = [
                ("".join("ABCDE"[j] for j in rng.integers(0, 5, size=3)), (0.0, float(i), 5.0, float(i) + 0.5))
                for i in range(n)
            ]
            seq = encode_text_read(make_sample(words, height=50), vocab)
            assert all(w == 1.0 for w in seq.loss_weights)
            assert not any(seq.is_coord)
            for tid, label in zip(seq.target_ids, seq.supcon_labels):
                assert (label is not None) == vocab.is_char(tid)


class TestDecodeOcrRead:
    def test_prompt_eos_only(self, vocab):
        res = decode_ocr_read([vocab.ocr_read_id, vocab.eos_id], 100, 100, vocab)
        assert res.words == [] and res.skipped == []

    def test_three_coords_dropped(self, vocab):
        ids = [vocab.ocr_read_id] + [vocab.coord_id(1)] * 3 + [vocab.char_id("A"), vocab.eos_id]
        res = decode_ocr_read(ids, 100, 100, vocab)
        assert res.words == []
        assert len(res.skipped) >= 1

    def test_word_without_chars_dropped(self, vocab):
        ids = (
            [vocab.ocr_read_id]
            + [vocab.coord_id(i) for i in (1, 2, 3, 4)]
            + [vocab.coord_id(i) for i in (5, 6, 7, 8)]
            + [vocab.char_id("Z"), vocab.eos_id]
        )
        res = decode_ocr_read(ids, 1000, 1000, vocab)
        assert [t for _b, t in res.words] == ["Z"]
        assert res.skipped  # the first, character-free group is reported

    def test_never_raises_on_noise(self, vocab):
        rng = stream(13)
        for _ in range(200):
            n = int(rng.integers(0, 30))
            ids = [int(i) for i in rng.integers(0, len(vocab), size=n)]
            res = decode_ocr_read(ids, 64, 64, vocab)
            for box, text in res.words:
                assert text
                assert 0 <= box.x_min <= box.x_max <= 64
                assert 0 <= box.y_min <= box.y_max <= 64

    def test_encoder_roundtrip(self, vocab):
        rng = stream(21)
        for _ in range(100):
            width = int(rng.integers(50, 400))
            height = int(rng.integers(50, 400))
            n = int(rng.integers(1, 5))
            words = []
            for _i in range(n):
                x0 = float(rng.uniform(0, width - 10))
                y0 = float(rng.uniform(0, height - 10))
                x1 = float(rng.uniform(x0 + 1, width))
                y1 = float(rng.uniform(y0 + 1, height))
                k = int(rng.integers(1, 6))
                text = "".join("ABCDEFGH"[j] for j in rng.integers(0, 8, size=k))
                words.append((text, (x0, y0, x1, y1)))
            s = make_sample(words, width=width, height=height)
            seq = encode_ocr_read(s, vocab, order="raster", weak=False, max_len=512)
            res = decode_ocr_read(seq.target_ids, width, height, vocab)
            perm = raster_order(s.words)
            assert [t for _b, t in res.words] == [s.words[i].text for i in perm]
            for (box, _t), i in zip(res.words, perm):
                gt = s.words[i].bbox
                for got, want, dim in (
                    (box.x_min, gt[0], width),
                    (box.y_min, gt[1], height),
                    (box.x_max, gt[2], width),
                    (box.y_max, gt[3], height),
                ):
                    assert abs(got - want) <= dim / NUM_COORD_BINS
