import numpy as np
import pytest

from egoflow.data import (PairCheckError, augment_rotation, check_pair, export_error_map, generate, load_pair,
                          read_manifest, rotate_pair, save_pair, scene_config, subsample_shuffle, write_manifest)
from egoflow.geometry import rotation_about_axis
from egoflow.metrics import flow_metrics

SMALL = {"n_points": 512}


def small(**kw):
    return scene_config(SMALL, **kw)


def test_static_identity_scene():
    pair = generate(small(n_movers=0, noise=0.0, occlusion=0.0, ego_rotation_deg=0.0,
                          ego_translation=(0.0, 0.0), ego_z_noise=0.0))
    assert np.all(pair.S == 0)
    assert not pair.y_P.any() and not pair.y_Q.any()
    np.testing.assert_array_equal(pair.R, np.eye(3))


def test_pure_translation_scene():
    pair = generate(small(n_movers=0, ego_rotation_deg=0.0, ego_translation=(0.8, 0.8), ego_z_noise=0.0))
    np.testing.assert_allclose(pair.S, np.tile(pair.t, (len(pair.S), 1)), atol=1e-6)
    np.testing.assert_allclose(pair.t, [-0.8, 0, 0], atol=1e-6)


def test_generate_is_deterministic(tmp_path):
    a, b = generate(small(seed=5)), generate(small(seed=5))
    save_pair(a, tmp_path / "a.egpr")
    save_pair(b, tmp_path / "b.egpr")
    assert (tmp_path / "a.egpr").read_bytes() == (tmp_path / "b.egpr").read_bytes()
    c = generate(small(seed=6))
    assert not np.array_equal(a.P, c.P)


@pytest.mark.parametrize("seed", range(6))
def test_ground_truth_invariant(seed):
    pair = generate(small(seed=seed))
    assert check_pair(pair) < 1e-4
    assert len(pair.P) == len(pair.S) == 512
    assert len(pair.Q) <= 512  # occlusion drops Q points only
    assert pair.y_P.any()


def test_check_pair_detects_corruption():
    pair = generate(small(seed=1))
    bg = np.flatnonzero(pair.obj_P == 0)[0]
    pair.S[bg] += 0.5
    with pytest.raises(PairCheckError):
        check_pair(pair)


def test_scene_config_parses_strings():
    cfg = scene_config({"n_movers": "3", "noise": "0.02", "ego_translation": "0.1, 0.2",
                        "shared_sampling": "true"})
    assert cfg.n_movers == 3 and cfg.noise == 0.02
    assert cfg.ego_translation == (0.1, 0.2) and cfg.shared_sampling is True
    with pytest.raises(KeyError):
        scene_config({"bogus": 1})


def test_shared_sampling_mode():
    pair = generate(small(seed=2, shared_sampling=True, occlusion=0.0, noise=0.0))
    np.testing.assert_allclose(pair.Q, pair.P + pair.S, atol=1e-5)


def test_subsample_permutation_only():
    pair = generate(small(seed=3))
    sub = subsample_shuffle(pair, 512, 0)
    assert sorted(map(tuple, sub.P.tolist())) == sorted(map(tuple, pair.P.tolist()))
    m = flow_metrics(sub.S, sub.S)
    assert m["EPE3D"] == 0.0
    check_pair(sub)


def test_subsample_smaller_and_deterministic():
    pair = generate(small(seed=4))
    a, b = subsample_shuffle(pair, 200, 9), subsample_shuffle(pair, 200, 9)
    assert len(a.P) == len(a.Q) == len(a.S) == 200
    np.testing.assert_array_equal(a.P, b.P)
    np.testing.assert_array_equal(a.Q, b.Q)
    assert len({tuple(r) for r in a.P.tolist()}) == 200  # without replacement
    check_pair(a)


def test_augment_rotation_keeps_invariant():
    pair = generate(small(seed=7))
    aug = augment_rotation(pair, 3)
    check_pair(aug)
    assert not np.array_equal(aug.P, pair.P)


def test_rotate_zero_angle_is_identity():
    pair = generate(small(seed=8))
    same = rotate_pair(pair, rotation_about_axis(1, 0.0))
    np.testing.assert_array_equal(same.P, pair.P)
    np.testing.assert_array_equal(same.S, pair.S)


def test_rotate_inverse_restores():
    pair = generate(small(seed=9))
    pair64 = rotate_pair(pair, np.eye(3))
    A = rotation_about_axis(2, np.deg2rad(7.0))
    back = rotate_pair(rotate_pair(pair64, A), A.T)
    # float32 storage bounds the round trip, not the rotation itself
    np.testing.assert_allclose(back.P, pair.P, atol=1e-5)
    np.testing.assert_allclose(back.R, pair.R, atol=1e-6)
    P64 = pair.P.astype(np.float64)
    np.testing.assert_allclose((P64 @ A.T) @ A, P64, atol=1e-9)


def test_save_load_bit_exact(tmp_path):
    pair = generate(small(seed=10))
    save_pair(pair, tmp_path / "p.egpr")
    back = load_pair(tmp_path / "p.egpr")
    for f in ("P", "Q", "S", "R", "t", "y_P", "y_Q", "obj_P", "obj_Q"):
        a, b = getattr(pair, f), getattr(back, f)
        assert a.dtype == b.dtype and a.tobytes() == b.tobytes(), f
    assert (tmp_path / "p.egpr").read_bytes()[:4] == b"EGPR"


def test_load_rejects_garbage(tmp_path):
    (tmp_path / "x").write_bytes(b"XXXX" + bytes(20))
    with pytest.raises(ValueError):
        load_pair(tmp_path / "x")


def test_manifest_round_trip(tmp_path):
    write_manifest(tmp_path, ["a.egpr", "b.egpr"])
    assert read_manifest(tmp_path) == [tmp_path / "a.egpr", tmp_path / "b.egpr"]
    with pytest.raises(FileNotFoundError):
        read_manifest(tmp_path / "missing")


def test_error_map(tmp_path):
    P = np.array([[0.0, 0, 0], [1.0, 2, 3]])
    pred = np.array([[0.3, 0.4, 0], [0, 0, 0]])
    ply, csv_path = export_error_map(P, pred, np.zeros((2, 3)), tmp_path / "e.ply")
    lines = ply.read_text().splitlines()
    assert lines[0] == "ply" and "element vertex 2" in lines and "property float epe" in lines
    body = lines[lines.index("end_header") + 1:]
    assert [float(r.split()[-1]) for r in body] == [0.5, 0.0]
    rows = csv_path.read_text().splitlines()
    assert rows[0] == "x,y,z,epe" and rows[1].endswith("0.500000")
