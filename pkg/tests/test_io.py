import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from trigrid import io
from trigrid.alignment import HeadBox, LandmarkSet
from trigrid.camera import OrbitCamera
from trigrid.errors import InvalidInputError, ParseError
from trigrid.scene import init_scene


@settings(max_examples=30, deadline=None)
@given(hnp.arrays(np.uint8, st.tuples(st.integers(1, 9), st.integers(1, 9), st.just(3))))
def test_ppm_round_trip(raster):
    data = io.encode_ppm(raster)
    assert np.array_equal(io.parse_ppm(data), raster)
    assert io.encode_ppm(io.parse_ppm(data)) == data


def test_ppm_header_comments_and_whitespace():
    body = bytes(range(6))
    raster = io.parse_ppm(b"P6 # made by hand\n2\t1\n# max\n255\n" + body)
    assert raster.shape == (1, 2, 3)
    assert raster.tobytes() == body


@pytest.mark.parametrize("data,offset", [
    (b"P5\n1 1\n255\n\x00", 0),
    (b"P6\n1 1\n65535\n\x00\x00\x00", 12),
    (b"P6\n2 2\n255\n\x00\x00\x00", 11),
    (b"P6\nx 1\n255\n", 2),
])
def test_ppm_errors_carry_offsets(data, offset):
    with pytest.raises(ParseError) as info:
        io.parse_ppm(data)
    assert info.value.offset == offset


@settings(max_examples=30, deadline=None)
@given(hnp.arrays(np.float32, st.tuples(st.integers(1, 7), st.integers(1, 7)),
                  elements=st.floats(-1e6, 1e6, width=32)))
def test_pfm_round_trip(raster):
    data = io.encode_pfm(raster)
    back = io.parse_pfm(data)
    assert back.dtype == np.float32
    assert np.array_equal(back, raster)
    assert io.encode_pfm(back) == data


def test_pfm_rows_are_stored_bottom_up():
    raster = np.array([[1.0, 2.0], [3.0, 4.0]], dtype=np.float32)
    data = io.encode_pfm(raster)
    assert data.startswith(b"Pf\n2 2\n-1.0\n")
    assert np.frombuffer(data[-16:], "<f4").tolist() == [3.0, 4.0, 1.0, 2.0]


def test_pfm_errors():
    with pytest.raises(ParseError):
        io.parse_pfm(b"PF\n1 1\n-1.0\n" + bytes(12))
    with pytest.raises(ParseError):
        io.parse_pfm(b"Pf\n1 1\n1.0\n" + bytes(4))
    with pytest.raises(ParseError):
        io.parse_pfm(b"Pf\n2 1\n-1.0\n" + bytes(4))


def test_uint8_conversion():
    assert io.to_uint8(np.array([0.0, 0.5, 1.0, 2.0, -1.0])).tolist() == [0, 128, 255, 255, 0]
    np.testing.assert_allclose(io.from_uint8(np.array([0, 255], dtype=np.uint8)), [0.0, 1.0])


def _manifest():
    cams = [OrbitCamera(yaw=0.1).to_dict(), OrbitCamera(yaw=3.0).to_dict()]
    return {"root": ".", "records": [io.make_manifest_record(f"v{i}", f"v{i}.ppm", f"v{i}.pfm", c)
                                     for i, c in enumerate(cams)]}


def test_manifest_round_trip(tmp_path):
    m = _manifest()
    assert [r["split"] for r in m["records"]] == ["front", "back"]
    p = tmp_path / "m.json"
    io.write_manifest(p, m)
    assert io.read_manifest(p) == json.loads(json.dumps(m))
    first = p.read_bytes()
    io.write_manifest(p, io.read_manifest(p))
    assert p.read_bytes() == first


def test_manifest_validation(tmp_path):
    m = _manifest()
    m["records"][1]["id"] = "v0"
    with pytest.raises(InvalidInputError):
        io.validate_manifest(m)
    m = _manifest()
    m["records"][0]["split"] = "back"
    with pytest.raises(InvalidInputError):
        io.validate_manifest(m)
    with pytest.raises(InvalidInputError):
        io.validate_manifest(_manifest(), check_paths=True)
    bad = tmp_path / "bad.json"
    bad.write_text("{not json")
    with pytest.raises(ParseError):
        io.read_manifest(bad)


def test_detections_round_trip(tmp_path, rng):
    lm = LandmarkSet.from_array(rng.uniform(0, 64, (5, 2)))
    box = HeadBox((30.5, 31.0), 20.0, 24.0)
    cam = OrbitCamera(yaw=0.2).to_dict()
    recs = [io.detector_record("a", cam, lm, box), io.detector_record("b", cam, None, box)]
    p = tmp_path / "d.jsonl"
    io.write_detections(p, recs)
    back = io.read_detections(p)
    np.testing.assert_array_equal(back[0]["landmarks"].array(), lm.array())
    assert back[0]["box"].center == box.center and back[0]["box"].width == box.width
    assert back[1]["landmarks"] is None
    p.write_text('{"id": "x"}\n')
    with pytest.raises(InvalidInputError):
        io.read_detections(p)


def test_checkpoint_round_trip_is_bit_exact(tmp_path):
    scene = init_scene(depth=2, resolution=5, channels=3, hidden=(7, 6), image_size=(4, 6), seed=11)
    data = io.encode_checkpoint(scene)
    loaded = io.decode_checkpoint(data)
    assert io.encode_checkpoint(loaded) == data
    for name, p in scene.parameters().items():
        np.testing.assert_array_equal(loaded.parameters()[name], p.astype(np.float32))
    assert loaded.decoder.hidden == (7, 6)
    path = tmp_path / "s.tgv"
    io.save_checkpoint(path, loaded)
    assert path.read_bytes() == data


def test_checkpoint_layout():
    scene = init_scene(depth=1, resolution=2, channels=1, hidden=(), image_size=(1, 1), seed=0)
    data = io.encode_checkpoint(scene)
    assert data[:4] == b"TGV1"
    # header: 5 + 1 + 0 + 2 uint32, 2 float32; blocks: 3*4 planes, 1*4 weights + 4 biases, 3 background
    assert len(data) == 4 + 4 * 8 + 4 * 2 + 4 * (12 + 4 + 4 + 3)


def test_checkpoint_errors():
    data = io.encode_checkpoint(init_scene(resolution=3, channels=2, hidden=(4,), image_size=(2, 2), seed=0))
    with pytest.raises(ParseError):
        io.decode_checkpoint(b"XXXX" + data[4:])
    with pytest.raises(ParseError):
        io.decode_checkpoint(data[:-1])
    with pytest.raises(ParseError):
        io.decode_checkpoint(data + b"\x00")
    with pytest.raises(InvalidInputError):
        io.encode_checkpoint(init_scene(activation="tanh", resolution=2, channels=1, image_size=(1, 1)))
