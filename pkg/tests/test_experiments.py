import numpy as np

from seta.engine import AdaptationConfig
from seta.experiments import (
    ablate_iters, compare_variants, iters_label, make_identities, read_identities, write_identities,
)
from seta.model import ArchConfig, init_model

SMALL = ArchConfig(base_channels=8, tokens=4, token_dim=8)
QUICK = AdaptationConfig(appearance_iters=2, skeleton_iters=1, k=2)


def test_identities_round_trip(tmp_path, ood_both):
    idents = make_identities(ood_both, 2, 3, 40)
    write_identities(idents, tmp_path, {"seed": 40})
    back = read_identities(tmp_path)
    assert len(back) == 2
    for a, b in zip(idents, back):
        assert a.sample.skeleton == b.sample.skeleton
        assert all(x == y for x, y in zip(a.targets.masks, b.targets.masks))
        assert len(b.pairs) == 3
        assert np.abs(a.truth[0].pixels - b.truth[0].pixels).max() <= 1 / 255 + 1e-12


def test_compare_variants_groups(ood_both):
    params = init_model(SMALL, 0)
    idents = make_identities(ood_both, 2, 2, 50)
    report, walls = compare_variants(params, idents, QUICK, ("appearance_only",))
    assert set(report.conditions) == {"w/o SETA", "appearance_only"}
    cm = report["appearance_only"]
    assert cm.count == 4 and cm.groups == [0, 0, 1, 1]
    assert len(cm.group_means()["ssim"]) == 2
    assert walls["appearance_only"] > 0


def test_ablate_iters_zero_is_unadapted(ood_both):
    params = init_model(SMALL, 0)
    idents = make_identities(ood_both, 2, 2, 60)
    report, walls = ablate_iters(params, idents, QUICK, [0, 1])
    base, _ = compare_variants(params, idents, QUICK, ())
    assert report[iters_label(0)].ssim == base["w/o SETA"].ssim
    assert set(walls) == {"iters=0", "iters=1"}
