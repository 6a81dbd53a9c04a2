import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from reground.data import make_scenes, scene_seeds, to_uint8
from reground.evaluation import (
    CSV_HEADER,
    EvalScene,
    TradeoffPoint,
    detect_shapes,
    drop_boxes,
    estimate_background,
    headline_deltas,
    is_grayscale,
    read_tradeoff_csv,
    spatial_score,
    sweep,
    textual_score,
    tradeoff_csv,
    write_tradeoff_csv,
)
from reground.grounding import BoundingBox, LayoutSpec
from reground.scenes import PALETTE, SceneConfig, Shape, ToyPrompt, render
from reground.wiring import Denoiser, DenoiserConfig


def canvas(bg, size=32):
    img = np.empty((size, size, 3))
    img[:] = PALETTE[bg]
    return img


def fill(img, color, px):
    x0, y0, x1, y1 = px
    img[y0:y1, x0:x1] = PALETTE[color]
    return img


def norm_box(px, size=32):
    return tuple(v / size for v in px)


# --- detector ---------------------------------------------------------------------


def test_detects_two_shapes_with_colors():
    shapes = [Shape("circle", "red", BoundingBox(*norm_box((2, 2, 12, 12)))),
              Shape("square", "blue", BoundingBox(*norm_box((16, 18, 28, 30))))]
    regions = detect_shapes(render(shapes, "yellow", "color"))
    assert sorted(r.color for r in regions) == ["blue", "red"]
    kinds = {r.color: r.kind for r in regions}
    assert kinds == {"red": "circle", "blue": "square"}


def test_uniform_image_has_no_regions():
    assert detect_shapes(canvas("green")) == []


def test_overlapping_same_color_shapes_merge():
    img = fill(fill(canvas("blue"), "red", (4, 4, 14, 14)), "red", (10, 10, 20, 20))
    regions = detect_shapes(img)
    assert len(regions) == 1
    assert regions[0].box.as_tuple() == norm_box((4, 4, 20, 20))
    assert regions[0].area == 100 + 100 - 16


def test_tiny_specks_ignored():
    img = fill(canvas("blue"), "red", (4, 4, 6, 6))
    assert detect_shapes(img) == []


def test_grayscale_detection_uses_luminance():
    shapes = [Shape("square", "green", BoundingBox(*norm_box((3, 3, 13, 13))))]
    img = render(shapes, "red", "grayscale")
    assert is_grayscale(img)
    assert estimate_background(img) == "red"
    assert [r.color for r in detect_shapes(img)] == ["green"]


def test_certified_on_clean_renders():
    for rec in make_scenes(scene_seeds(3, 200)):
        img = to_uint8(rec.scene.image) / 255.0
        assert spatial_score(img, rec.layout) == 1.0
        assert textual_score(img, rec.prompt) == 1.0


# --- spatial score -----------------------------------------------------------------


def test_spatial_score_half_with_shifted_shape():
    # blue box 13x12 at the origin; the blue shape is shifted 7 px right:
    # overlap 6*12 = 72, union 2*156 - 72 = 240, IoU = 0.3
    layout = LayoutSpec.from_pairs([(norm_box((0, 0, 13, 12)), "blue square"),
                                    (norm_box((21, 18, 31, 28)), "red square")])
    img = fill(fill(canvas("green"), "blue", (7, 0, 20, 12)), "red", (21, 18, 31, 28))
    shifted = BoundingBox(*norm_box((7, 0, 20, 12)))
    assert abs(layout.entries[0].box.iou(shifted) - 0.3) < 1e-12
    assert spatial_score(img, layout, iou_threshold=0.5) == 0.5
    assert spatial_score(img, layout, iou_threshold=0.3) == 1.0


def test_spatial_score_blank_and_empty():
    layout = LayoutSpec.from_pairs([(norm_box((0, 0, 13, 12)), "blue square")])
    assert spatial_score(canvas("green"), layout) == 0.0
    assert spatial_score(canvas("green"), LayoutSpec()) is None


def test_spatial_score_requires_matching_color():
    layout = LayoutSpec.from_pairs([(norm_box((4, 4, 14, 14)), "blue square")])
    img = fill(canvas("green"), "red", (4, 4, 14, 14))
    assert spatial_score(img, layout) == 0.0


def test_spatial_matching_is_one_to_one():
    box = norm_box((4, 4, 14, 14))
    layout = LayoutSpec.from_pairs([(box, "red square"), (box, "red circle")])
    img = fill(canvas("green"), "red", (4, 4, 14, 14))
    assert spatial_score(img, layout) == 0.5


# --- textual score -----------------------------------------------------------------


def test_textual_drops_one_attribute_for_color_rerender():
    rec = next(r for r in make_scenes(scene_seeds(0, 50)) if r.scene.style == "grayscale")
    k = rec.prompt.attribute_count()
    colored = render(rec.scene.shapes, rec.scene.background, "color")
    assert textual_score(rec.scene.image, rec.prompt) == 1.0
    assert textual_score(colored, rec.prompt) == pytest.approx((k - 1) / k, abs=1e-15)


def test_textual_zero_when_nothing_matches():
    prompt = ToyPrompt.encode("grayscale", "red", [("blue", "circle"), ("cyan", "square")])
    assert textual_score(canvas("green"), prompt) == 0.0


def test_textual_counts_colors_as_multiset():
    prompt = ToyPrompt.encode("color", "green", [("red", "circle"), ("red", "square"), (None, "circle")])
    one_red = fill(canvas("green"), "red", (2, 2, 10, 10))
    two_red = fill(one_red.copy(), "red", (20, 20, 28, 28))
    assert textual_score(one_red, prompt) == 3 / 4
    assert textual_score(two_red, prompt) == 1.0


# --- drop_boxes --------------------------------------------------------------------

A, B, C, D = "red circle", "blue square", "green triangle", "cyan circle"


def layout_of(labels):
    return LayoutSpec.from_pairs((norm_box((i, i, i + 4, i + 4)), lab) for i, lab in enumerate(labels))


def test_drop_single_category_unchanged():
    lay = layout_of([A, A, A])
    assert drop_boxes(lay, 0) == lay


def test_drop_never_partial():
    lay = layout_of([A, A, B])
    outcomes = {tuple(drop_boxes(lay, s).labels) for s in range(50)}
    assert outcomes == {(A, A), (B,)}


def test_drop_four_categories_seeded():
    lay = layout_of([A, B, C, D, A])
    cats = [A, B, C, D]
    for seed in range(10):
        chosen = {cats[i] for i in np.random.default_rng(seed).choice(4, size=2, replace=False)}
        out = drop_boxes(lay, seed)
        assert out == drop_boxes(lay, seed)
        assert list(out.labels) == [lab for lab in lay.labels if lab not in chosen]
        assert len(set(out.labels)) == 2


@settings(max_examples=200, deadline=None)
@given(st.lists(st.sampled_from([A, B, C, D]), min_size=1, max_size=10), st.integers(0, 2**32 - 1))
def test_drop_boxes_properties(labels, seed):
    lay = layout_of(labels)
    out = drop_boxes(lay, seed)
    k = len(set(labels))
    kept = set(out.labels)
    assert len(set(labels) - kept) == k // 2
    for cat in kept:
        assert out.labels.count(cat) == labels.count(cat)
    # survivors keep their order and boxes
    survivors = [e for e in lay if e.label in kept]
    assert list(out) == survivors


# --- sweep -------------------------------------------------------------------------

TINY = DenoiserConfig(image_size=8, patch_size=2, d_model=8, d_text=4, label_dim=4, layers=2, num_bands=2,
                      train_steps=20)


@pytest.fixture(scope="module")
def net():
    torch.manual_seed(5)
    n = Denoiser(TINY)
    with torch.no_grad():
        for layer in n.layers:
            layer.gsa.gate_alpha.fill_(1.0)
    return n


@pytest.fixture(scope="module")
def scenes():
    recs = make_scenes(scene_seeds(0, 200, "eval"), SceneConfig(image_size=8, min_size=2, max_size=3))
    return [EvalScene(r.prompt, r.layout, r.seed + 7, str(i)) for i, r in enumerate(recs)]


def test_sweep_gamma_zero_rows_match(net, scenes):
    seq, par = sweep(net, scenes[:20], [0.0], ["sequential", "parallel"], sampler_steps=4)
    assert (seq.spatial_mean, seq.textual_mean) == (par.spatial_mean, par.textual_mean)


def test_sweep_default_grid_csv(net, scenes, tmp_path):
    gammas = [round(0.1 * i, 1) for i in range(1, 11)]
    kwargs = dict(sampler_steps=2, batch_size=200)
    pts = sweep(net, scenes, gammas, ["sequential", "parallel"], **kwargs)
    text = tradeoff_csv(pts)
    lines = text.splitlines()
    assert lines[0] == ",".join(CSV_HEADER)
    assert len(lines) == 21
    assert lines[1].startswith("0.100000,sequential,") and lines[1].endswith(",200,default")
    again = tradeoff_csv(sweep(net, scenes, gammas, ["sequential", "parallel"], **kwargs))
    assert again == text
    path = tmp_path / "t.csv"
    write_tradeoff_csv(pts, path)
    assert path.read_bytes() == text.encode()
    back = read_tradeoff_csv(path)
    assert [(p.gamma, p.mode, p.n_scenes) for p in back] == [(p.gamma, p.mode, p.n_scenes) for p in pts]


def test_sweep_threaded_matches_serial(net, scenes):
    args = (net, scenes[:10], [0.5, 1.0], ["sequential", "parallel"])
    assert sweep(*args, sampler_steps=3, jobs=2) == sweep(*args, sampler_steps=3, jobs=1)


def test_sweep_details(net, scenes):
    rows = []
    sweep(net, scenes[:5], [1.0], ["parallel"], sampler_steps=2, details=rows)
    assert [r[2] for r in rows] == ["0", "1", "2", "3", "4"]


def test_headline_deltas():
    pts = [TradeoffPoint(1.0, "sequential", 0.8, 0.5, 10, "x"), TradeoffPoint(1.0, "parallel", 0.6, 0.7, 10, "x")]
    d = headline_deltas(pts)
    assert d["textual_gain"] == pytest.approx(0.2)
    assert d["spatial_drop"] == pytest.approx(0.2)
    assert d["spatial_drop_relative"] == pytest.approx(0.25)
    assert headline_deltas(pts, gamma=0.5) == {}
