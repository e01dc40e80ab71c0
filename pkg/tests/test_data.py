import numpy as np
import pytest

from corrmatch import data as D
from corrmatch.errors import ConfigError


def test_generation_is_deterministic():
    spec = D.DatasetSpec(seed=3, n_labeled=2, n_unlabeled=5)
    a, b = D.generate(spec), D.generate(spec)
    assert D.dumps(spec, *a) == D.dumps(spec, *b)
    img1, _ = D.make_sample(spec, 4)
    img2, _ = D.make_sample(D.DatasetSpec(seed=3, n_labeled=1, n_unlabeled=1), 4)
    assert np.array_equal(img1, img2)


def test_noiseless_disc_matches_membership_test():
    H = W = 16
    m = D.rasterize("disc", H, W, 8.0, 7.0, 4.5)
    for i in range(H):
        for j in range(W):
            inside = (i + 0.5 - 8.0) ** 2 + (j + 0.5 - 7.0) ** 2 <= 4.5**2
            assert m[i, j] == inside
    # A noiseless sample's colours are exactly the palette entries of its labels.
    spec = D.DatasetSpec(seed=1, n_labeled=1, n_unlabeled=1, noise_std=0.0)
    img, lab = D.make_sample(spec, 0)
    colors = np.stack([D.class_color(k, 3) for k in range(spec.K)])
    np.testing.assert_array_equal(img, np.clip(colors[lab].transpose(2, 0, 1), 0, 1))


def test_all_classes_appear_in_unlabeled_pool():
    spec = D.DatasetSpec(seed=0, K=4, n_unlabeled=256)
    _, unl = D.generate(spec)
    counts = np.zeros(spec.K, int)
    for s in unl:
        for v in s.eval_label.reshape(-1):
            counts[v] += 1
    assert np.all(counts > 0)


def test_sample_invariants():
    spec = D.DatasetSpec(seed=2, n_labeled=8, n_unlabeled=16)
    lab, unl = D.generate(spec)
    for s in lab:
        assert s.label is not None and (s.label > 0).any()
        assert s.image.shape == (3, spec.H, spec.W)
        assert s.image.min() >= 0 and s.image.max() <= 1
        assert s.label.min() >= 0 and s.label.max() < spec.K
    for s in unl:
        assert s.label is None and s.eval_label is not None
    assert len({s.id for s in lab + unl}) == len(lab) + len(unl)


def test_one_geometry_per_class():
    assert [D.geometry_of(k) for k in (1, 2, 3)] == ["rectangle", "disc", "triangle"]


@pytest.mark.parametrize("kw", [dict(n_labeled=0), dict(K=1), dict(H=30), dict(shapes_min=3, shapes_max=2),
                                dict(noise_std=-1.0)])
def test_invalid_spec(kw):
    with pytest.raises(ConfigError):
        D.generate(D.DatasetSpec(**kw))


def test_cmds_round_trip(tmp_path):
    spec = D.DatasetSpec(seed=5, n_labeled=2, n_unlabeled=3, noise_std=0.1)
    lab, unl = D.generate(spec)
    path = tmp_path / "d.cmds"
    D.save(path, spec, lab, unl)
    assert path.read_bytes()[:4] == b"CMDS"
    spec2, lab2, unl2 = D.load(path)
    assert spec2 == spec
    for a, b in zip(lab + unl, lab2 + unl2):
        assert np.array_equal(a.image, b.image)
        la = a.label if a.label is not None else a.eval_label
        lb = b.label if b.label is not None else b.eval_label
        assert np.array_equal(la, lb)
    with pytest.raises(ValueError):
        D.loads(b"XXXX" + path.read_bytes()[4:])
