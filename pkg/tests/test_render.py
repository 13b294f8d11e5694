import numpy as np
import pytest

from scob.errors import ConfigError, InputError
from scob.render import (
    DEFAULT_FONT_DIR,
    FontPool,
    RenderConfig,
    bench_render,
    glyph_extent,
    plan_sample,
    render_sample,
)

MONO = str(DEFAULT_FONT_DIR / "DejaVuSansMono.ttf")


def background_of(words, config, seed):
    return np.asarray(plan_sample(words, config, seed).background, dtype=np.uint8)


class TestConfig:
    def test_default_is_valid(self):
        RenderConfig().validate()

    def test_resolution_floor(self):
        with pytest.raises(ConfigError):
            RenderConfig(resolution_range=(16, 64)).validate()

    def test_bad_blur_prob(self):
        with pytest.raises(ConfigError):
            RenderConfig(blur_prob=1.5).validate()

    def test_missing_fonts(self, tmp_path):
        with pytest.raises(ConfigError, match=str(tmp_path)):
            RenderConfig(font_dir=str(tmp_path)).validate()

    def test_font_pool_has_enough_faces(self):
        assert len(FontPool(DEFAULT_FONT_DIR)) >= 4


class TestRenderSample:
    def test_empty_words_uniform_background(self, fast_render_config):
        s = render_sample([], fast_render_config, seed=0)
        assert s.words == []
        bg = background_of([], fast_render_config, 0)
        assert (s.image == bg).all()

    def test_determinism(self, fast_render_config):
        a = render_sample(["HI"], fast_render_config, seed=7)
        b = render_sample(["HI"], fast_render_config, seed=7)
        assert np.array_equal(a.image, b.image)
        assert [(w.text, w.bbox) for w in a.words] == [(w.text, w.bbox) for w in b.words]

    def test_seed_changes_pixels(self, fast_render_config):
        a = render_sample(["HI"], fast_render_config, seed=7)
        b = render_sample(["HI"], fast_render_config, seed=8)
        assert not np.array_equal(a.image, b.image)

    def test_boxes_tight_and_background_pure(self, fast_render_config):
        for seed in range(25):
            s = render_sample(["Axy", "Q2", "mk"], fast_render_config, seed=seed)
            bg = background_of(["Axy", "Q2", "mk"], fast_render_config, seed)
            ink = (s.image != bg).any(axis=2)
            covered = np.zeros_like(ink)
            for w in s.words:
                x0, y0, x1, y1 = map(int, w.bbox)
                sub = ink[y0:y1, x0:x1]
                assert sub.any(), "box contains no ink"
                # no edge slack beyond 1px: the border rows/cols must carry ink
                assert sub[0].any() and sub[-1].any() and sub[:, 0].any() and sub[:, -1].any()
                covered[y0:y1, x0:x1] = True
            # every non-background pixel lies inside some annotated box
            assert not (ink & ~covered).any()

    def test_word_order_is_placement_order(self, fast_render_config):
        s = render_sample(["one", "two", "three"], fast_render_config, seed=3)
        texts = [w.text for w in s.words]
        kept = [t for t in ["one", "two", "three"] if t in texts]
        assert texts == kept

    def test_unplaceable_words_dropped_not_half_rendered(self):
        config = RenderConfig(
            resolution_range=(48, 48),
            font_size_range=(40, 40),
            blur_prob=0.0,
            max_place_attempts=3,
        )
        s = render_sample(["WWWWWWWWWWWW"], config, seed=1)
        assert s.words == []
        bg = background_of(["WWWWWWWWWWWW"], config, 1)
        assert (s.image == bg).all()

    def test_out_of_charset_named(self, fast_render_config):
        with pytest.raises(InputError, match="é"):
            render_sample(["café"], fast_render_config, seed=0)

    def test_whitespace_rejected(self, fast_render_config):
        with pytest.raises(InputError):
            render_sample(["two words"], fast_render_config, seed=0)

    def test_empty_word_rejected(self, fast_render_config):
        with pytest.raises(InputError):
            render_sample([""], fast_render_config, seed=0)

    def test_resolution_within_range(self, fast_render_config):
        for seed in range(10):
            s = render_sample(["ab"], fast_render_config, seed=seed)
            lo, hi = fast_render_config.resolution_range
            assert lo <= s.width <= hi and lo <= s.height <= hi

    def test_char_boxes_emitted_inside_word_box(self):
        config = RenderConfig(
            resolution_range=(128, 128), font_size_range=(18, 24), blur_prob=0.0, char_boxes=True
        )
        s = render_sample(["HELLO"], config, seed=2)
        assert s.words and s.words[0].char_boxes
        wx0, wy0, wx1, wy1 = s.words[0].bbox
        for cx0, cy0, cx1, cy1 in s.words[0].char_boxes:
            assert cx0 < cx1 and cy0 < cy1
            assert cx0 >= wx0 - 1 and cx1 <= wx1 + 1
            assert cy0 >= wy0 - 1 and cy1 <= wy1 + 1

    def test_clutter_profile_keeps_word_boxes(self):
        config = RenderConfig(
            resolution_range=(128, 128),
            font_size_range=(14, 20),
            blur_prob=0.0,
            clutter_rects=5,
            clutter_noise=0.02,
        )
        s = render_sample(["CAT"], config, seed=4)
        # clutter must not produce a uniform background
        bg = background_of(["CAT"], config, 4)
        assert (s.image != bg).any(axis=2).sum() > (128 * 128) // 50
        for w in s.words:
            x0, y0, x1, y1 = w.bbox
            assert 0 <= x0 < x1 <= s.width and 0 <= y0 < y1 <= s.height


class TestBlurSampling:
    def test_blur_frequency(self):
        config = RenderConfig(resolution_range=(32, 48), blur_prob=0.2, blur_max_radius=1.8)
        hits = sum(plan_sample([], config, seed).blur_applied for seed in range(10_000))
        assert 0.17 <= hits / 10_000 <= 0.23

    def test_blur_disabled_when_prob_zero(self):
        config = RenderConfig(resolution_range=(32, 48), blur_prob=0.0)
        assert not any(plan_sample([], config, seed).blur_applied for seed in range(200))

    def test_blur_changes_pixels_only_when_applied(self):
        on = RenderConfig(resolution_range=(64, 64), font_size_range=(20, 20), blur_prob=1.0, blur_max_radius=1.8)
        off = RenderConfig(resolution_range=(64, 64), font_size_range=(20, 20), blur_prob=0.0, blur_max_radius=1.8)
        # identical draw structure keeps everything but the blur decision equal
        a = render_sample(["Bo"], on, seed=5)
        b = render_sample(["Bo"], off, seed=5)
        assert [(w.text, w.bbox) for w in a.words] == [(w.text, w.bbox) for w in b.words]
        assert not np.array_equal(a.image, b.image)


class TestGlyphExtent:
    def test_positive(self):
        w, h = glyph_extent("A", MONO, 16)
        assert w > 0 and h > 0

    def test_monospace_doubling(self):
        w1, _ = glyph_extent("A", MONO, 16)
        w2, _ = glyph_extent("AA", MONO, 16)
        assert abs(w2 - 2 * w1) <= 1

    def test_monotone_in_size(self):
        widths = [glyph_extent("Hg", MONO, s)[0] for s in (8, 12, 16, 24, 32, 48)]
        assert widths == sorted(widths)
        heights = [glyph_extent("Hg", MONO, s)[1] for s in (8, 12, 16, 24, 32, 48)]
        assert heights == sorted(heights)

    def test_empty_text_rejected(self):
        with pytest.raises(InputError):
            glyph_extent("", MONO, 16)

    def test_missing_glyph_lists_codepoints(self):
        with pytest.raises(InputError, match="中"):
            glyph_extent("中", MONO, 16)


class TestBench:
    def test_rates_positive(self, fast_render_config):
        stats = bench_render(fast_render_config, n=2)
        assert stats.samples_per_sec > 0 and stats.bytes_per_sec > 0
        assert stats.load_samples_per_sec is None

    def test_n_zero_rejected(self, fast_render_config):
        with pytest.raises(InputError):
            bench_render(fast_render_config, n=0)

    def test_comparison_dir(self, fast_render_config, tmp_path):
        from scob.data import save_sample_png

        for i in range(3):
            save_sample_png(render_sample(["x"], fast_render_config, seed=i), tmp_path / f"{i}.png")
        stats = bench_render(fast_render_config, n=2, comparison_dir=str(tmp_path))
        assert stats.load_samples_per_sec and stats.load_samples_per_sec > 0

    def test_empty_comparison_dir(self, fast_render_config, tmp_path):
        with pytest.raises(InputError):
            bench_render(fast_render_config, n=1, comparison_dir=str(tmp_path))
