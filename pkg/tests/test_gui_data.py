import json
import logging

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from hirescross.gui_data import (
    BOX_RE,
    DEVICE_RESOLUTIONS,
    KEPT_ATTRIBUTES,
    BoxCoord,
    BoxError,
    DatasetError,
    PageConfig,
    PageError,
    RenderError,
    Sample,
    SyntheticScreen,
    TextRenderSpec,
    clean_attributes,
    composite,
    denormalize,
    format_boxes,
    gen_page,
    glyph,
    iou,
    make_ocr,
    make_rec,
    make_rec_reg,
    make_reg,
    normalize_box,
    parse_boxes,
    parse_html,
    read_dataset,
    rec_target,
    render_ocr_screen,
    to_html,
    write_dataset,
)
from hirescross.gui_data.render import quantize8
from hirescross.gui_data.samples import answer_box_pixels


@st.composite
def pixel_boxes(draw):
    W = draw(st.integers(1, 4000))
    H = draw(st.integers(1, 4000))
    xs = sorted(draw(st.lists(st.integers(0, W), min_size=2, max_size=2)))
    ys = sorted(draw(st.lists(st.integers(0, H), min_size=2, max_size=2)))
    return (xs[0], ys[0], xs[1], ys[1]), W, H


class TestBoxes:
    def test_full_image(self):
        assert format_boxes([[normalize_box((0, 0, 640, 480), 640, 480)]]) == "[[000,000,999,999]]"

    def test_floor_arithmetic(self):
        b = normalize_box((112, 56, 224, 112), 1120, 1120)
        assert b.as_tuple() == (100, 50, 200, 100)
        assert format_boxes([[b]]) == "[[100,050,200,100]]"

    def test_floor_not_round(self):
        # 0.9996 of the extent would round to 1000
        assert normalize_box((0, 0, 2499, 1), 2500, 1).x1 == 999
        assert normalize_box((0, 0, 3, 1), 1999, 1).x1 == 1  # 1.5 floors to 1

    def test_inverted_and_outside(self):
        with pytest.raises(BoxError):
            normalize_box((10, 0, 5, 5), 100, 100)
        with pytest.raises(BoxError):
            normalize_box((0, 0, 101, 5), 100, 100)
        with pytest.raises(BoxError):
            BoxCoord(5, 0, 4, 9)
        with pytest.raises(BoxError):
            BoxCoord(0, 0, 1000, 9)

    @settings(max_examples=300, deadline=None)
    @given(pixel_boxes())
    def test_roundtrip_within_bucket(self, case):
        box, W, H = case
        back = denormalize(normalize_box(box, W, H), W, H)
        for c, d, E in zip(box, back, (W, H, W, H)):
            assert abs(c - d) < E / 1000

    def test_single_box_format(self):
        s = format_boxes([[BoxCoord(13, 188, 802, 568)]])
        assert s == "[[013,188,802,568]]"
        assert BOX_RE.fullmatch(s)

    def test_annotation_sample_has_swapped_corners(self):
        # The grammar accepts the string; the corner ordering check rejects it.
        s = "[[013,568,802,188]]"
        assert BOX_RE.fullmatch(s)
        with pytest.raises(BoxError, match="inverted"):
            parse_boxes(s)

    def test_multi_box_group(self):
        s = format_boxes([[BoxCoord(1, 2, 3, 4), BoxCoord(5, 6, 7, 8)]])
        assert s == "[[001,002,003,004;005,006,007,008]]"
        assert parse_boxes(s) == [[BoxCoord(1, 2, 3, 4), BoxCoord(5, 6, 7, 8)]]

    def test_parse_in_sentence(self):
        text = "the profile [[013,188,802,568]] and two icons [[001,001,002,002;003,003,004,004]]"
        groups = parse_boxes(text)
        assert [len(g) for g in groups] == [1, 2]

    @pytest.mark.parametrize("bad", ["", "garbage", "[[1,2,3,4]]", "[[001,002,003]]", "[[001,002,003,004;]]"])
    def test_parse_errors(self, bad):
        with pytest.raises(BoxError):
            parse_boxes(bad)

    def test_format_needs_boxes(self):
        with pytest.raises(BoxError):
            format_boxes([])
        with pytest.raises(BoxError):
            format_boxes([[]])

    @settings(max_examples=200, deadline=None)
    @given(st.lists(st.lists(st.tuples(*[st.integers(0, 999)] * 4), min_size=1, max_size=4), min_size=1, max_size=3))
    def test_roundtrip_and_regex(self, raw):
        groups = [[BoxCoord(min(a, c), min(b, d), max(a, c), max(b, d)) for a, b, c, d in g] for g in raw]
        s = format_boxes(groups)
        for part in s.split(" "):
            assert BOX_RE.fullmatch(part)
        assert parse_boxes(s) == groups

    def test_iou(self):
        assert iou((0, 0, 2, 2), (1, 1, 3, 3)) == pytest.approx(1 / 7)
        assert iou((0, 0, 1, 1), (2, 2, 3, 3)) == 0.0
        assert iou(BoxCoord(1, 1, 1, 1), BoxCoord(1, 1, 1, 1)) == 1.0


class TestGlyphs:
    def test_native_size_is_binary(self):
        g = glyph("M", 6)
        assert g.shape == (10, 6)
        assert set(np.unique(g)) <= {0.0, 1.0}
        assert g.any(axis=1).sum() == 6  # capitals are six rows tall

    def test_scaled(self):
        assert glyph("A", 12).shape == (20, 12)
        assert glyph("A", 3).shape == (5, 3)
        assert 0 < glyph("A", 3).max() <= 1

    def test_errors(self):
        with pytest.raises(RenderError):
            glyph("A", 2)
        with pytest.raises(RenderError):
            glyph("é", 6)


class TestOcrScreens:
    def test_deterministic(self):
        spec = TextRenderSpec(runs=3, rotation=8, noise=0.05, blur=0.6, erosion=True)
        a, b = render_ocr_screen(spec, 11), render_ocr_screen(spec, 11)
        assert a.image.pixels.tobytes() == b.image.pixels.tobytes()
        assert [(e.text, e.box) for e in a.elements] == [(e.text, e.box) for e in b.elements]
        c = render_ocr_screen(spec, 12)
        assert a.image.pixels.tobytes() != c.image.pixels.tobytes()

    def test_clean_render_is_atlas_composite(self):
        spec = TextRenderSpec(runs=4, min_chars=2, max_chars=7, size_jitter=5)
        for seed in range(10):
            s = render_ocr_screen(spec, seed)
            ref = quantize8(composite(spec.width, spec.height, s.background, s.glyphs))
            np.testing.assert_array_equal(s.image.pixels[:, :, 0], ref)

    def test_glyphs_inside_boxes(self):
        spec = TextRenderSpec(runs=3, min_chars=2, max_chars=6)
        for seed in range(20):
            s = render_ocr_screen(spec, seed)
            boxes = [e.box for e in s.elements]
            for g in s.glyphs:
                h, w = glyph(g.char, g.px).shape
                assert any(l <= g.left and t <= g.top and g.left + w <= r and g.top + h <= b for l, t, r, b in boxes)

    def test_six_px_boxes_contain_ink(self):
        # pixel scan oracle over 100 clean and 100 augmented screens
        for spec in (TextRenderSpec(runs=2), TextRenderSpec(runs=2, rotation=15, erosion=True)):
            for seed in range(100):
                s = render_ocr_screen(spec, seed)
                px = s.image.pixels[:, :, 0]
                assert s.elements
                for e in s.elements:
                    l, t, r, b = e.box
                    assert 0 <= l < r <= 112 and 0 <= t < b <= 112
                    assert (np.abs(px[t:b, l:r] - s.background) > 0.2).any()

    def test_rotated_ink_stays_in_boxes(self):
        spec = TextRenderSpec(runs=1, rotation=25, min_chars=6, max_chars=6)
        for seed in range(30):
            s = render_ocr_screen(spec, seed)
            px = s.image.pixels[:, :, 0]
            ink = np.abs(px - s.background) > 0.05
            l, t, r, b = s.elements[0].box
            outside = ink.copy()
            outside[t:b, l:r] = False
            assert not outside.any()

    def test_flip_mirrors_boxes(self):
        spec = TextRenderSpec(runs=1, aggressive=True)
        flipped = 0
        for seed in range(20):
            s = render_ocr_screen(spec, seed)
            px = s.image.pixels[:, :, 0]
            l, t, r, b = s.elements[0].box
            ink = np.argwhere(np.abs(px - s.background) > 0.2)
            assert ink[:, 1].min() >= l and ink[:, 1].max() < r
            clean = render_ocr_screen(TextRenderSpec(runs=1), seed)
            flipped += s.elements[0].box[0] != clean.elements[0].box[0]
        assert flipped > 0

    def test_overflow_skipped_and_logged(self, caplog):
        spec = TextRenderSpec(glyph_px=40, runs=2, min_chars=5, max_chars=5)
        with caplog.at_level(logging.WARNING):
            s = render_ocr_screen(spec, 0)
        assert s.elements == []
        assert "overflows" in caplog.text

    def test_transcript_reading_order(self):
        s = render_ocr_screen(TextRenderSpec(runs=4), 5)
        order = sorted(s.elements, key=lambda e: (e.box[1], e.box[0]))
        assert s.transcript() == " ".join(e.text for e in order)

    @pytest.mark.parametrize("kw", [{"glyph_px": 2}, {"rotation": 45}, {"noise": 0.9}, {"blur": -1},
                                    {"min_chars": 5, "max_chars": 2}, {"layout": "spiral"}, {"charset": "é"}])
    def test_spec_ranges(self, kw):
        with pytest.raises(RenderError):
            TextRenderSpec(**kw)

    def test_aggressive_allows_wide_rotation(self):
        TextRenderSpec(rotation=90, aggressive=True)


class TestPages:
    @pytest.mark.parametrize("res", DEVICE_RESOLUTIONS)
    def test_counts_and_no_overlap(self, res):
        cfg = PageConfig(min_elements=3, max_elements=10)
        for seed in range(15):
            page = gen_page(seed, res, cfg)
            assert 3 <= len(page.elements) <= 10
            W, H = res
            for i, a in enumerate(page.elements):
                l, t, r, b = a.box
                assert 0 <= l < r <= W and 0 <= t < b <= H
                for c in page.elements[i + 1:]:
                    assert iou(a.box, c.box) == 0.0

    def test_resolution_must_be_listed(self):
        with pytest.raises(PageError):
            gen_page(0, (100, 100))
        page = gen_page(0, (112, 112), PageConfig(devices=((112, 112),)))
        assert page.image.pixels.shape == (112, 112, 1)

    def test_resolution_drawn_from_list(self):
        seen = {gen_page(s).resolution for s in range(30)}
        assert seen <= set(DEVICE_RESOLUTIONS) and len(seen) > 1

    def test_html_roundtrip(self):
        for seed in range(20):
            for el in gen_page(seed).elements:
                tag, attrs, text = parse_html(to_html(el))
                assert (tag, attrs) == (el.tag, el.attributes)
                if tag not in ("input", "img"):
                    assert text == el.text

    def test_html_escaping_roundtrip(self):
        from hirescross.gui_data import ScreenElement
        el = ScreenElement("button", {"title": 'say "hi" & <go>'}, "a < b & c", (0, 0, 1, 1))
        assert parse_html(to_html(el)) == ("button", el.attributes, el.text)

    def test_cleaning(self):
        raw = {"class": "x", "style": "y", "id": "z", "data-k": "1", "href": "/a", "title": " ", "alt": "ok"}
        assert clean_attributes(raw) == {"alt": "ok", "href": "/a"}
        for seed in range(10):
            for el in gen_page(seed).elements:
                assert set(el.attributes) <= set(KEPT_ATTRIBUTES)

    def test_glyphs_inside_element_boxes(self):
        for seed in range(10):
            page = gen_page(seed)
            for g in page.glyphs:
                h, w = glyph(g.char, g.px).shape
                assert any(l <= g.left and t <= g.top and g.left + w <= r and g.top + h <= b
                           for l, t, r, b in (e.box for e in page.elements))

    def test_deterministic(self):
        a, b = gen_page(4), gen_page(4)
        assert a.image.pixels.tobytes() == b.image.pixels.tobytes()
        assert a.elements == b.elements


class TestSamples:
    def test_counts_and_inverse(self):
        page = gen_page(2)
        rec, reg = make_rec(page), make_reg(page)
        assert len(make_rec_reg(page)) == 2 * len(page.elements)
        for a, b in zip(rec, reg):
            # REC maps html -> box; REG maps that box back to the html
            assert a.prompt == "rec " + b.answer
            assert b.prompt == "reg " + a.answer

    def test_answers_recoverable(self):
        page = gen_page(3)
        for s, el in zip(make_rec(page), page.elements):
            assert rec_target(page, s.prompt[len("rec "):]) is el

    def test_rec_box_within_bucket_of_element(self):
        for seed in range(20):
            page = gen_page(seed)
            W, H = page.resolution
            for s, el in zip(make_rec(page), page.elements):
                assert BOX_RE.fullmatch(s.answer)
                l, t, r, b = answer_box_pixels(s, page.resolution)
                bx, by = W / 1000, H / 1000
                assert el.box[0] - bx <= l and el.box[1] - by <= t
                assert r <= el.box[2] + bx and b <= el.box[3] + by

    def test_empty_screen(self):
        page = gen_page(0)
        empty = SyntheticScreen(page.image, [], page.resolution, 0)
        for f in (make_rec, make_reg, make_ocr):
            with pytest.raises(DatasetError):
                f(empty)

    def test_unknown_template_version(self):
        with pytest.raises(DatasetError):
            make_rec(gen_page(0), version="v0")

    def test_ocr_sample(self):
        s = make_ocr(render_ocr_screen(TextRenderSpec(runs=2), 1))
        assert s.task == "ocr" and len(s.answer) == 9


class TestDataset:
    def _samples(self):
        page = gen_page(5)
        return make_rec_reg(page) + [make_ocr(render_ocr_screen(TextRenderSpec(), 9))]

    def test_roundtrip(self, tmp_path):
        samples = self._samples()
        written = write_dataset(samples, tmp_path / "d" / "data.jsonl")
        back = read_dataset(tmp_path / "d" / "data.jsonl", load_images=True)
        assert back == written
        assert len((tmp_path / "d" / "data.jsonl").read_text().splitlines()) == len(samples)
        for s, w in zip(back, samples):
            np.testing.assert_array_equal(s.image.pixels, w.image.pixels)
        # REC/REG share one screen image
        assert len(list((tmp_path / "d" / "images").iterdir())) == 2

    def test_field_order(self, tmp_path):
        write_dataset(self._samples(), tmp_path / "x.jsonl")
        for line in (tmp_path / "x.jsonl").read_text().splitlines():
            assert list(json.loads(line)) == ["image_path", "task", "prompt", "answer", "seed"]

    def test_io_errors_name_path(self, tmp_path):
        with pytest.raises(DatasetError, match="missing.jsonl"):
            read_dataset(tmp_path / "missing.jsonl")
        bad = tmp_path / "bad.jsonl"
        bad.write_text('{"task": "rec"}\n')
        with pytest.raises(DatasetError, match="bad.jsonl:1"):
            read_dataset(bad)

    def test_unknown_task(self):
        with pytest.raises(DatasetError):
            Sample("vqa", "q", "a", 0)
