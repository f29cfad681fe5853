import json
import struct

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays
from PIL import Image

from videolayers.compositing import LayerStack
from videolayers.videodata import (
    FLO_MAGIC,
    DataError,
    FlowField,
    load_sequence,
    read_flo,
    read_mask,
    resize_dataset,
    save_outputs,
    to_uint8,
    validate_manifest,
    write_dataset,
    write_flo,
)


def _flo_bytes(magic, w, h, values):
    return struct.pack("<fii", magic, w, h) + struct.pack(f"<{len(values)}f", *values)


def test_read_flo_decodes_header_and_payload(tmp_path):
    p = tmp_path / "a.flo"
    p.write_bytes(_flo_bytes(FLO_MAGIC, 1, 1, [2.0, -3.5]))
    f = read_flo(p)
    assert f.u.tolist() == [[2.0]]
    assert f.v.tolist() == [[-3.5]]


def test_read_flo_rejects_bad_magic(tmp_path):
    p = tmp_path / "bad.flo"
    p.write_bytes(_flo_bytes(202021.0, 1, 1, [0.0, 0.0]))
    with pytest.raises(DataError, match="invalid .flo magic"):
        read_flo(p)


def test_read_flo_rejects_truncated_payload(tmp_path):
    p = tmp_path / "short.flo"
    p.write_bytes(_flo_bytes(FLO_MAGIC, 2, 2, [0.0] * 6))
    with pytest.raises(DataError, match="truncated"):
        read_flo(p)


def test_write_flo_single_pixel_is_20_bytes(tmp_path):
    p = tmp_path / "z.flo"
    write_flo(np.zeros((1, 1, 2)), p)
    assert p.stat().st_size == 20


def test_write_flo_refuses_nan(tmp_path):
    flow = np.zeros((2, 2, 2))
    flow[1, 0, 1] = np.nan
    with pytest.raises(DataError):
        write_flo(flow, tmp_path / "nan.flo")
    assert not (tmp_path / "nan.flo").exists()


def test_flo_roundtrip_random_4x4(tmp_path, rng):
    arr = rng.normal(size=(4, 4, 2)).astype(np.float32)
    write_flo(FlowField.from_array(arr), tmp_path / "r.flo")
    assert np.array_equal(read_flo(tmp_path / "r.flo").as_array(), arr)


finite_f32 = st.floats(allow_nan=False, allow_infinity=False, width=32)


@given(arrays(np.float32, st.tuples(st.integers(1, 6), st.integers(1, 6), st.just(2)), elements=finite_f32))
def test_flo_file_roundtrip_is_byte_identical(tmp_path_factory, arr):
    d = tmp_path_factory.mktemp("flo")
    raw = _flo_bytes(FLO_MAGIC, arr.shape[1], arr.shape[0], arr.reshape(-1).tolist())
    (d / "in.flo").write_bytes(raw)
    write_flo(read_flo(d / "in.flo"), d / "out.flo")
    assert (d / "out.flo").read_bytes() == raw


def test_mask_binarized_at_128(tmp_path):
    Image.fromarray(np.array([[200, 50], [128, 127]], dtype=np.uint8), mode="L").save(tmp_path / "m.png")
    assert read_mask(tmp_path / "m.png").tolist() == [[1.0, 0.0], [1.0, 0.0]]


def test_alpha_half_quantizes_to_128():
    assert to_uint8(np.array([0.5]))[0] == 128


# -- manifests ---------------------------------------------------------------------------


def _minimal_dataset(tmp_path, T=2, H=6, W=8):
    frames = np.linspace(0, 1, T * H * W * 3).reshape(T, H, W, 3)
    ident = [1.0, 0, 0, 0, 1.0, 0, 0, 0, 1.0]
    (tmp_path / "f").mkdir()
    names = []
    for t in range(T):
        Image.fromarray(to_uint8(frames[t]), mode="RGB").save(tmp_path / f"f/{t}.png")
        names.append(f"f/{t}.png")
    Image.fromarray(np.zeros((H, W), np.uint8), mode="L").save(tmp_path / "m.png")
    for t in range(T - 1):
        write_flo(np.zeros((H, W, 2)), tmp_path / f"fw{t}.flo")
        write_flo(np.zeros((H, W, 2)), tmp_path / f"bw{t}.flo")
    manifest = {
        "frames": names,
        "masks": [["m.png"] * T],
        "flow_fwd": [f"fw{t}.flo" for t in range(T - 1)],
        "flow_bwd": [f"bw{t}.flo" for t in range(T - 1)],
        "homographies": [ident] * T,
    }
    (tmp_path / "manifest.json").write_text(json.dumps(manifest))
    return tmp_path / "manifest.json", manifest


def test_minimal_manifest_loads(tmp_path):
    path, _ = _minimal_dataset(tmp_path)
    ds = load_sequence(path)
    assert ds.frames.count == 2
    assert ds.masks.num_layers == 1
    assert ds.masks.order.tolist() == [[0], [0]]


def test_flow_count_error_message(tmp_path):
    path, manifest = _minimal_dataset(tmp_path, T=3)
    manifest["flow_fwd"] = manifest["flow_fwd"][:1]
    with pytest.raises(DataError, match="expected 2 forward flows"):
        validate_manifest(manifest)


def test_missing_file_reports_path(tmp_path):
    path, manifest = _minimal_dataset(tmp_path)
    manifest["frames"][1] = "f/missing.png"
    path.write_text(json.dumps(manifest))
    with pytest.raises(DataError, match="missing.png"):
        load_sequence(path)


def test_singular_homography_reports_index(tmp_path):
    _, manifest = _minimal_dataset(tmp_path)
    manifest["homographies"][1] = [1.0, 2.0, 0, 2.0, 4.0, 0, 0, 0, 1.0]
    with pytest.raises(DataError, match="homography 1"):
        validate_manifest(manifest)


def test_homography_normalized_to_unit_h33(tmp_path):
    path, manifest = _minimal_dataset(tmp_path)
    manifest["homographies"][0] = [2.0, 0, 4.0, 0, 2.0, 0, 0, 0, 2.0]
    path.write_text(json.dumps(manifest))
    H = load_sequence(path).homographies[0]
    assert H[2, 2] == 1.0 and H[0, 2] == 2.0


def _mutations():
    def drop(key):
        def f(m):
            m[key] = m[key][:-1]

        return f

    def mask_layer(m):
        m["masks"][0] = m["masks"][0][:-1]

    def bad_order(m):
        m["order"] = [[0]] * (len(m["frames"]) - 1) + [[1]]

    def short_hom(m):
        m["homographies"][0] = m["homographies"][0][:8]

    def zero_hom(m):
        m["homographies"][-1] = [0.0] * 9

    def remove_key(m):
        del m["flow_bwd"]

    return [drop("frames"), drop("flow_fwd"), drop("flow_bwd"), drop("homographies"), mask_layer, bad_order, short_hom, zero_hom, remove_key]


@given(T=st.integers(2, 6), which=st.sampled_from(_mutations()))
def test_manifest_validation_rejects_mutations(T, which):
    ident = [1.0, 0, 0, 0, 1.0, 0, 0, 0, 1.0]
    m = {
        "frames": [f"{t}.png" for t in range(T)],
        "masks": [[f"m{t}.png" for t in range(T)]],
        "flow_fwd": [f"f{t}.flo" for t in range(T - 1)],
        "flow_bwd": [f"b{t}.flo" for t in range(T - 1)],
        "homographies": [list(ident) for _ in range(T)],
    }
    validate_manifest(m)
    which(m)
    with pytest.raises(DataError):
        validate_manifest(m)


def test_mask_dimension_mismatch(tmp_path):
    path, manifest = _minimal_dataset(tmp_path)
    Image.fromarray(np.zeros((3, 3), np.uint8), mode="L").save(tmp_path / "small.png")
    manifest["masks"][0][1] = "small.png"
    path.write_text(json.dumps(manifest))
    with pytest.raises(DataError, match="small.png"):
        load_sequence(path)


def test_synthetic_scene_survives_file_roundtrip(tmp_path, small_scene):
    ds = small_scene.dataset
    loaded = load_sequence(write_dataset(ds, tmp_path))
    assert np.max(np.abs(loaded.frames.frames - ds.frames.frames)) <= 0.5 / 255 + 1e-12
    assert np.array_equal(loaded.masks.masks, ds.masks.masks)
    assert np.allclose(loaded.flow_fwd, ds.flow_fwd)
    assert np.allclose(loaded.homographies, ds.homographies)


def test_resize_scales_flow_and_homographies(small_scene):
    ds = small_scene.dataset
    half = resize_dataset(ds, ds.frames.width // 2, ds.frames.height // 2)
    assert half.frames.frames.shape[1:3] == (ds.frames.height // 2, ds.frames.width // 2)
    # a pure translation by 1 px/frame becomes 0.5 px/frame
    assert np.isclose(half.homographies[1][0, 2] - half.homographies[0][0, 2], 0.5)
    assert np.isclose(np.median(half.flow_fwd[..., 0]), 0.5 * np.median(ds.flow_fwd[..., 0]))


def test_save_outputs_file_count(tmp_path):
    H, W = 4, 5
    stack = LayerStack(
        alpha=np.full((1, 2, H, W), 0.5),
        color=np.ones((1, 2, H, W, 3)),
        flow=np.zeros((1, 2, H, W, 2)),
        background=np.zeros((2, H, W, 3)),
        order=np.zeros((2, 1), dtype=int),
    )
    out = tmp_path / "new" / "dir"
    save_outputs(stack, out, canvas=np.zeros((H, W, 3)))
    names = sorted(p.name for p in out.iterdir())
    assert len(names) == 9
    assert sum(n.startswith("alpha_") for n in names) == 2
    assert sum(n.endswith(".flo") for n in names) == 2
    assert np.asarray(Image.open(out / "alpha_0_0.png"))[0, 0] == 128
