import numpy as np
import pytest
import torch

from seta.features import descriptor, extract, init_extractor, load_extractor, save_extractor


def test_same_kind_and_seed_identical():
    assert init_extractor("reid_analog", 1).checksum() == init_extractor("reid_analog", 1).checksum()


def test_kinds_differ(person, phi, psi):
    a = extract(phi, person.image)[0]
    b = extract(psi, person.image)[0]
    assert float((a - b).abs().sum()) > 0


def test_layer_shapes(person, phi):
    feats = extract(phi, person.image)
    assert [tuple(f.shape[1:]) for f in feats] == [(8, 32, 24), (16, 16, 12), (32, 8, 6), (64, 4, 3)]
    assert phi.layer_shapes() == [(8, 32, 24), (16, 16, 12), (32, 8, 6), (64, 4, 3)]


def test_deterministic(person, phi):
    a, b = extract(phi, person.image), extract(phi, person.image)
    assert all(torch.equal(x, y) for x, y in zip(a, b))


def test_weights_frozen(phi):
    w, _ = phi.weights[0]
    with pytest.raises(ValueError):
        w[0, 0, 0, 0] = 1.0


def test_unknown_kind():
    with pytest.raises(ValueError):
        init_extractor("vgg")


def test_size_mismatch(phi):
    with pytest.raises(ValueError):
        extract(phi, torch.zeros(1, 3, 32, 32, dtype=torch.float64))


def test_image_gradient_matches_fd(person, phi, rng):
    x = torch.tensor(person.image.pixels).permute(2, 0, 1)[None].clone().requires_grad_(True)
    extract(phi, x)[0].mean().backward()
    g = x.grad[0]
    eps = 1e-6
    for _ in range(50):
        c, i, j = rng.integers(3), rng.integers(64), rng.integers(48)
        up, dn = x.detach().clone(), x.detach().clone()
        up[0, c, i, j] += eps
        dn[0, c, i, j] -= eps
        fd = (float(extract(phi, up)[0].mean()) - float(extract(phi, dn)[0].mean())) / (2 * eps)
        assert fd == pytest.approx(float(g[c, i, j]), abs=1e-9)


def test_locality_of_first_layer(person, phi):
    x = torch.tensor(person.image.pixels).permute(2, 0, 1)[None]
    y = x.clone()
    py, px = 21, 30
    y[0, :, py, px] += 0.3
    diff = (extract(phi, x)[0] - extract(phi, y)[0]).abs().sum(1)[0]
    rows, cols = torch.nonzero(diff, as_tuple=True)
    # 3x3 stride-2 pad-1: output (i, j) reads inputs 2i-1..2i+1
    assert rows.numel() > 0
    assert all(abs(2 * int(r) - py) <= 1 for r in rows)
    assert all(abs(2 * int(c) - px) <= 1 for c in cols)


def test_descriptor_is_pooled_layer(person, phi):
    d = descriptor(phi, person.image, 1)
    assert torch.allclose(d, extract(phi, person.image)[1].mean(dim=(2, 3)))


def test_save_load_round_trip(tmp_path, phi):
    save_extractor(phi, tmp_path / "phi.bin")
    back = load_extractor(tmp_path / "phi.bin")
    assert back.kind == phi.kind and back.seed == phi.seed
    assert back.checksum() == phi.checksum()


def test_load_rejects_plain_checkpoint(tmp_path):
    from seta.autodiff import save_checkpoint
    from seta.model import init_model

    save_checkpoint(init_model(), tmp_path / "m.bin")
    with pytest.raises(ValueError):
        load_extractor(tmp_path / "m.bin")
