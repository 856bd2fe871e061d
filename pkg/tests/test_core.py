import numpy as np
import pytest

from seta.core import (
    DEFAULT_HEIGHT, DEFAULT_WIDTH, NUM_KEYPOINTS, Image, PartMaskSet, PersonSample, Skeleton,
    ValidationReport, load_png, load_sample, render_heatmaps, save_png, save_sample, validate_sample,
)


def one_point(x, y, visible=True):
    kp = np.zeros((NUM_KEYPOINTS, 2))
    vis = np.zeros(NUM_KEYPOINTS, bool)
    kp[0] = (x, y)
    vis[0] = visible
    return Skeleton(kp, vis)


def test_heatmap_peak_at_centre():
    h = render_heatmaps(one_point(DEFAULT_WIDTH / 2, DEFAULT_HEIGHT / 2), 2.0)
    ch = h.channels[0]
    assert ch.max() == 1.0
    assert ch[DEFAULT_HEIGHT // 2, DEFAULT_WIDTH // 2] == 1.0


def test_invisible_keypoint_gives_zero_channel():
    h = render_heatmaps(one_point(10, 10, visible=False), 2.0)
    assert not h.channels.any()


def test_heatmap_matches_brute_force():
    sigma = 1.5
    h = render_heatmaps(one_point(3, 3), sigma)
    assert h.channels[0][3, 4] == pytest.approx(np.exp(-1 / 4.5), abs=1e-15)
    expect = np.zeros((DEFAULT_HEIGHT, DEFAULT_WIDTH))
    for y in range(DEFAULT_HEIGHT):
        for x in range(DEFAULT_WIDTH):
            d2 = (x - 3) ** 2 + (y - 3) ** 2
            expect[y, x] = np.exp(-d2 / (2 * sigma ** 2)) if d2 <= (3 * sigma) ** 2 else 0.0
    np.testing.assert_allclose(h.channels[0], expect, rtol=0, atol=1e-15)


def test_heatmap_truncated_beyond_three_sigma():
    h = render_heatmaps(one_point(20, 30), 2.0)
    ys, xs = np.nonzero(h.channels[0])
    assert np.all((xs - 20) ** 2 + (ys - 30) ** 2 <= 36)


@pytest.mark.parametrize("sigma", [0.0, -1.0])
def test_heatmap_rejects_bad_sigma(sigma):
    with pytest.raises(ValueError):
        render_heatmaps(one_point(3, 3), sigma)


def test_heatmaps_deterministic(person):
    a = render_heatmaps(person.skeleton)
    b = render_heatmaps(person.skeleton)
    assert a.channels.tobytes() == b.channels.tobytes()


def test_count_of_unit_pixels_equals_visible_keypoints(person, rng):
    for _ in range(5):
        kp = rng.uniform([-5, -5], [DEFAULT_WIDTH + 5, DEFAULT_HEIGHT + 5], size=(NUM_KEYPOINTS, 2))
        vis = rng.random(NUM_KEYPOINTS) < 0.7
        s = Skeleton(kp, vis)
        h = render_heatmaps(s)
        px = np.floor(kp + 0.5)
        inside = vis & (px[:, 0] >= 0) & (px[:, 0] < DEFAULT_WIDTH) & (px[:, 1] >= 0) & (px[:, 1] < DEFAULT_HEIGHT)
        assert int((h.channels == 1.0).sum()) == int(inside.sum())


def test_rendered_sample_is_valid(person):
    assert validate_sample(person) is person


def test_validation_reports_range(person):
    px = person.image.pixels.copy()
    px[0, 0, 0] = 1.5
    bad = PersonSample(Image(px), person.skeleton, person.parts)
    rep = validate_sample(bad)
    assert isinstance(rep, ValidationReport)
    assert any("range" in v for v in rep.violations)


def test_validation_reports_overlap(person):
    masks = person.parts.masks.copy()
    masks[0] |= masks[1]  # right leg also claims the left leg
    rep = validate_sample(PersonSample(person.image, person.skeleton, PartMaskSet(masks)))
    assert isinstance(rep, ValidationReport)
    assert any("disjoint" in v for v in rep.violations)


def test_png_round_trip(tmp_path, rng):
    img = Image(rng.random((DEFAULT_HEIGHT, DEFAULT_WIDTH, 3)))
    save_png(img, tmp_path / "x.png")
    back = load_png(tmp_path / "x.png")
    assert np.abs(back.pixels - img.pixels).max() <= 1 / 255 + 1e-12


def test_sample_directory_round_trip(tmp_path, person):
    save_sample(person, tmp_path / "s")
    back = load_sample(tmp_path / "s")
    assert back.skeleton == person.skeleton
    assert back.parts == person.parts
    assert np.abs(back.image.pixels - person.image.pixels).max() <= 1 / 255 + 1e-12


def test_labels_round_trip(person):
    assert PartMaskSet.from_labels(person.parts.labels()) == person.parts
