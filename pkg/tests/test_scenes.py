import struct
from fractions import Fraction

import numpy as np
import pytest

from pseudoflow.errors import ContractError, FormatError
from pseudoflow.flowinit import LabelSet
from pseudoflow.objectives import chamfer_loss
from pseudoflow.scenes import (
    ScenePair,
    generate_dataset,
    generate_synthetic_scene,
    label_count,
    normalize_scene,
    parse_ratio,
    read_dataset,
    read_scene,
    sample_labels,
    scene_from_bytes,
    scene_from_csv,
    scene_to_bytes,
    scene_to_csv,
    stream,
    write_scene,
)


def test_static_scene_has_zero_flow():
    s = generate_synthetic_scene(n_points=100, max_rotation_deg=0, max_translation=0, seed=1)
    assert not s.flow.any() and np.array_equal(s.P, s.Q)


def test_pure_translation_is_exact():
    t = np.array([0.25, -0.5, 0.125])
    s = generate_synthetic_scene(n_points=200, translation=t, seed=2)
    assert np.array_equal(s.flow, np.tile(t, (200, 1)))
    assert chamfer_loss(s.P + s.flow, s.Q).item() == 0.0


def test_rigid_motion_bounds():
    s = generate_synthetic_scene(n_shapes=3, n_points=300, seed=3, max_rotation_deg=10, max_translation=0.5)
    assert s.n == 300 and s.flow.shape == (300, 3)
    # each shape moves rigidly: pairwise distances inside a shape are preserved
    for lo, hi in ((0, 100), (100, 200), (200, 300)):
        d0 = np.linalg.norm(s.P[lo:hi, None] - s.P[None, lo:hi], axis=-1)
        d1 = np.linalg.norm(s.Q[lo:hi, None] - s.Q[None, lo:hi], axis=-1)
        np.testing.assert_allclose(d0, d1, atol=1e-12)


def test_noise_only_touches_q():
    a = generate_synthetic_scene(n_points=50, seed=4)
    b = generate_synthetic_scene(n_points=50, seed=4, noise=0.01)
    assert np.array_equal(a.P, b.P) and np.array_equal(a.flow, b.flow)
    assert not np.array_equal(a.Q, b.Q)


def test_generation_is_byte_identical():
    a = scene_to_bytes(generate_synthetic_scene(n_points=64, seed=9))
    b = scene_to_bytes(generate_synthetic_scene(n_points=64, seed=9))
    assert a == b
    assert a != scene_to_bytes(generate_synthetic_scene(n_points=64, seed=10))


def test_dataset_scene_ids():
    ds = generate_dataset(3, seed=0, n_points=16)
    assert [s.scene_id for s in ds] == ["scene_0000", "scene_0001", "scene_0002"]
    assert not np.array_equal(ds[0].P, ds[1].P)


def test_generator_needs_points():
    with pytest.raises(ContractError):
        generate_synthetic_scene(n_points=0)


def test_streams_are_independent():
    a = stream(5, "labels").random(3)
    assert np.array_equal(a, stream(5, "labels").random(3))
    assert not np.array_equal(a, stream(5, "init").random(3))


def test_sample_labels_counts_and_replay():
    s = generate_synthetic_scene(n_points=64, seed=1)
    lab = sample_labels(s, "1/8", seed=3)
    assert len(lab) == 8 and len(set(lab.indices.tolist())) == 8
    assert np.array_equal(lab.indices, sample_labels(s, Fraction(1, 8), seed=3).indices)
    assert np.array_equal(lab.flows, s.flow[lab.indices])


def test_sample_labels_errors():
    s = generate_synthetic_scene(n_points=64, seed=1)
    with pytest.raises(ContractError):
        sample_labels(s, 1, seed=0)
    with pytest.raises(ContractError):
        sample_labels(s, "1/128", seed=0)
    with pytest.raises(ContractError):
        sample_labels(ScenePair(s.P, s.Q), "1/8")


def test_ratio_parsing():
    assert parse_ratio("1/16") == Fraction(1, 16)
    assert parse_ratio(0.125) == Fraction(1, 8)
    assert label_count(1000, "1/64") == 15
    with pytest.raises(ContractError):
        parse_ratio("one half")


def test_normalization_fits_cube_and_inverts():
    s = generate_synthetic_scene(n_points=100, seed=6)
    s = s.with_labels(sample_labels(s, "1/8"))
    out, norm = normalize_scene(s)
    both = np.concatenate([out.P, out.Q])
    assert abs((both.max(axis=0) - both.min(axis=0)).max() - 4.0) < 1e-12
    np.testing.assert_allclose(norm.flow_to_original(out.flow), s.flow, rtol=1e-14, atol=1e-15)
    np.testing.assert_array_equal(out.labels.flows, out.flow[out.labels.indices])


def _labeled_scene():
    s = generate_synthetic_scene(n_points=40, seed=7)
    return s.with_labels(sample_labels(s, "1/8"))


def test_binary_layout():
    s = _labeled_scene()
    raw = scene_to_bytes(s)
    assert raw[:4] == b"SSFL"
    version, flags, n = struct.unpack_from("<HBI", raw, 4)
    assert (version, flags, n) == (1, 3, 40)
    assert len(raw) == 4 + 7 + 3 * 40 * 3 * 8 + 4 + 5 * 4


def test_binary_roundtrip_bit_exact(tmp_path):
    s = _labeled_scene()
    raw = scene_to_bytes(s)
    back = scene_from_bytes(raw)
    assert scene_to_bytes(back) == raw
    write_scene(s, tmp_path / "a.ssfl")
    r = read_scene(tmp_path / "a.ssfl")
    assert r.scene_id == "a" and np.array_equal(r.labels.indices, s.labels.indices)
    bare = ScenePair(s.P, s.Q)
    assert scene_from_bytes(scene_to_bytes(bare)).flow is None


def test_binary_rejects_damage():
    raw = scene_to_bytes(_labeled_scene())
    with pytest.raises(FormatError):
        scene_from_bytes(b"XXXX" + raw[4:])
    with pytest.raises(FormatError):
        scene_from_bytes(raw[:-3])
    with pytest.raises(FormatError):
        scene_from_bytes(raw + b"\0")
    with pytest.raises(FormatError):
        scene_from_bytes(raw[:4] + struct.pack("<H", 2) + raw[6:])


def test_csv_roundtrip_preserves_values():
    s = _labeled_scene()
    text = scene_to_csv(s)
    assert text.splitlines()[0] == "px,py,pz,qx,qy,qz,fx,fy,fz,labeled"
    back = scene_from_csv(text)
    assert scene_to_bytes(back) == scene_to_bytes(s)
    assert scene_to_csv(back) == text


def test_csv_errors():
    with pytest.raises(FormatError):
        scene_from_csv("px,py\n1,2\n")
    with pytest.raises(FormatError):
        scene_from_csv("")


def test_read_dataset(tmp_path):
    with pytest.raises(FormatError):
        read_dataset(tmp_path)
    for s in generate_dataset(2, seed=1, n_points=8):
        write_scene(s, tmp_path / f"{s.scene_id}.ssfl")
    assert [s.scene_id for s in read_dataset(tmp_path)] == ["scene_0000", "scene_0001"]


def test_scene_invariants():
    P = np.zeros((3, 3))
    with pytest.raises(ContractError):
        ScenePair(P, P, np.zeros((2, 3)))
    with pytest.raises(ContractError):
        ScenePair(P, P, None, LabelSet([0], np.zeros((1, 3))))
