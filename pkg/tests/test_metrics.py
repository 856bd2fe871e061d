import numpy as np
import pytest
import scipy.linalg
import torch

from seta.core import Image
from seta.metrics import (
    MetricsReport, embed, evaluate_groups, evaluate_set, frechet_distance, frechet_from_embeddings,
    gaussian_window, perceptual_distance, ssim,
)
from seta.synth import make_domain, render_person, repose, sample_person, sample_pose


def ssim_oracle(x, y):
    """Windowed SSIM written out position by position."""
    w = gaussian_window()
    c1, c2 = 0.01 ** 2, 0.03 ** 2
    h, wd, _ = x.shape
    vals = []
    for c in range(3):
        for i in range(h - 10):
            for j in range(wd - 10):
                a, b = x[i:i + 11, j:j + 11, c], y[i:i + 11, j:j + 11, c]
                ma, mb = (w * a).sum(), (w * b).sum()
                va = (w * (a - ma) ** 2).sum()
                vb = (w * (b - mb) ** 2).sum()
                cov = (w * (a - ma) * (b - mb)).sum()
                vals.append((2 * ma * mb + c1) * (2 * cov + c2) / ((ma ** 2 + mb ** 2 + c1) * (va + vb + c2)))
    return float(np.mean(vals))


def test_ssim_identity(person):
    assert ssim(person.image, person.image) == pytest.approx(1.0, abs=1e-9)


def test_ssim_inverse_lower(person):
    inv = Image(1 - person.image.pixels)
    assert ssim(person.image, inv) < ssim(person.image, person.image)


def test_ssim_matches_oracle(rng):
    x, y = rng.random((64, 48, 3)), rng.random((64, 48, 3))
    y = 0.5 * x + 0.5 * y
    assert ssim(Image(x), Image(y)) == pytest.approx(ssim_oracle(x, y), abs=1e-10)


def test_ssim_symmetric(rng):
    x, y = Image(rng.random((64, 48, 3))), Image(rng.random((64, 48, 3)))
    assert abs(ssim(x, y) - ssim(y, x)) <= 1e-12


def test_ssim_errors():
    with pytest.raises(ValueError):
        ssim(Image(np.zeros((64, 48, 3))), Image(np.zeros((64, 40, 3))))
    with pytest.raises(ValueError):
        ssim(Image(np.zeros((8, 8, 3))), Image(np.zeros((8, 8, 3))))


def test_perceptual_zero_and_symmetric(person, psi, rng):
    other = Image(rng.random((64, 48, 3)))
    assert perceptual_distance(person.image, person.image, psi) == 0.0
    assert perceptual_distance(person.image, other, psi) == pytest.approx(
        perceptual_distance(other, person.image, psi), rel=1e-14)


def test_perceptual_noise_closer_than_other_identity(psi):
    d = make_domain("ood_both")
    rng = np.random.default_rng(0)
    for t in range(50):
        a = render_person(sample_person(d, 2 * t)).image
        b = render_person(sample_person(d, 2 * t + 1)).image
        noisy = Image(np.clip(a.pixels + rng.normal(0, 0.05, a.pixels.shape), 0, 1))
        assert perceptual_distance(a, noisy, psi) < perceptual_distance(a, b, psi)


def test_noise_monotonic(person, psi):
    rng = np.random.default_rng(3)
    noise = rng.normal(size=person.image.pixels.shape)
    s, p = [], []
    for level in (0.02, 0.05, 0.1, 0.2):
        noisy = Image(np.clip(person.image.pixels + level * noise, 0, 1))
        s.append(ssim(person.image, noisy))
        p.append(perceptual_distance(person.image, noisy, psi))
    assert all(a > b for a, b in zip(s, s[1:]))
    assert all(a < b for a, b in zip(p, p[1:]))


def test_frechet_self_zero(rng):
    e = rng.normal(size=(200, 5))
    assert abs(frechet_from_embeddings(e, e)) <= 1e-6


def test_frechet_matches_scipy_oracle(rng):
    a = rng.normal(size=(40, 6))
    b = rng.normal(1.0, 2.0, size=(50, 6)) @ rng.normal(size=(6, 6))
    ca, cb = np.cov(a, rowvar=False), np.cov(b, rowvar=False)
    root = scipy.linalg.sqrtm(ca @ cb).real
    expect = ((a.mean(0) - b.mean(0)) ** 2).sum() + np.trace(ca + cb - 2 * root)
    assert frechet_from_embeddings(a, b) == pytest.approx(expect, rel=1e-7)


def test_frechet_symmetric(rng):
    a, b = rng.normal(size=(30, 4)), rng.normal(0.5, 1.5, size=(30, 4))
    assert abs(frechet_from_embeddings(a, b) - frechet_from_embeddings(b, a)) <= 1e-8


def test_frechet_one_dimensional_shift():
    rng = np.random.default_rng(0)
    a, b = rng.normal(0, 1, 10_000), rng.normal(2, 1, 10_000)
    assert frechet_from_embeddings(a[:, None], b[:, None]) == pytest.approx(4.0, abs=0.15)


def test_frechet_too_small(rng):
    with pytest.raises(ValueError):
        frechet_from_embeddings(rng.normal(size=(10, 64)), rng.normal(size=(10, 64)))


def test_frechet_images_self(psi):
    d = make_domain("ood_both")
    imgs = torch.cat([torch.tensor(render_person(sample_person(d, i)).image.pixels).permute(2, 0, 1)[None]
                      for i in range(70)])
    assert embed(imgs, psi).shape == (70, 64)
    assert abs(frechet_distance(imgs, imgs, psi)) <= 1e-6


@pytest.fixture(scope="module")
def eval_pairs():
    d = make_domain("ood_both")
    rng = np.random.default_rng(5)
    out = []
    for i in range(70):
        spec = sample_person(d, 100 + i)
        gt = render_person(repose(spec, sample_pose(d, spec, rng)))
        out.append((render_person(spec), gt.skeleton, gt.image))
    return out


def test_oracle_generator_scores_perfectly(eval_pairs, psi):
    truth = iter([torch.tensor(gt.pixels).permute(2, 0, 1) for _, _, gt in eval_pairs])

    def oracle(refs, poses):  # pairs are generated in order, chunk by chunk
        return torch.stack([next(truth) for _ in range(refs.shape[0])])

    cm = evaluate_set(oracle, eval_pairs, psi, "oracle")["oracle"]
    assert cm.ssim_mean == pytest.approx(1.0, abs=1e-9)
    assert cm.perceptual_mean == 0.0
    assert abs(cm.frechet) <= 1e-6


def test_report_deterministic_and_serialisable(eval_pairs, psi):
    from seta.model import init_model

    p = init_model()
    a = evaluate_set(p, eval_pairs[:8], psi, "m", seed=1)
    b = evaluate_set(p, eval_pairs[:8], psi, "m", seed=1)
    assert a.dumps() == b.dumps()
    assert a["m"].frechet is None and "samples" in a["m"].note
    back = MetricsReport.from_json(a.to_json())
    assert back.dumps() == a.dumps()
    assert a.to_csv().splitlines()[0] == "condition,count,ssim_mean,perceptual_mean,frechet"
    cm = a["m"]
    assert -1 <= cm.ssim_mean <= 1 and cm.perceptual_mean >= 0


def test_grouped_evaluation_matches_single(eval_pairs, psi):
    from seta.model import init_model

    p = init_model()
    whole = evaluate_set(p, eval_pairs[:6], psi, "m")["m"]
    grouped = evaluate_groups([p, p], [eval_pairs[:3], eval_pairs[3:6]], psi, "m")["m"]
    assert grouped.ssim == pytest.approx(whole.ssim, abs=1e-12)
    means = grouped.group_means()
    assert means["ssim"] == pytest.approx([np.mean(whole.ssim[:3]), np.mean(whole.ssim[3:])], abs=1e-12)
