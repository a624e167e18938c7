import numpy as np
import pytest

from hflow import io
from hflow.errors import DataError
from hflow.optics import InterferogramStack, OpticalParams


def make_stack(n=5, h=6, w=7, seed=0):
    frames = np.random.default_rng(seed).integers(0, 65536, (n, h, w)).astype(np.uint16)
    return InterferogramStack(frames, OpticalParams(frame_rate_hz=20000.0, pixel_pitch_m=12e-6))


def test_header_is_64_bytes():
    assert io.HEADER.size == io.HEADER_SIZE == 64
    assert io.stack_file_size(7, 6, 5) == 64 + 7 * 6 * 5 * 2


@pytest.mark.parametrize("mmap", [True, False])
def test_stack_round_trip(tmp_path, mmap):
    st = make_stack()
    path = io.write_stack(tmp_path / "s.hflw", st)
    assert path.stat().st_size == io.stack_file_size(7, 6, 5)
    back = io.read_stack(path, OpticalParams(numerical_aperture=0.2), mmap=mmap)
    assert np.array_equal(back.frames, st.frames)
    assert back.params.frame_rate_hz == 20000.0 and back.params.pixel_pitch_m == 12e-6
    assert back.params.numerical_aperture == 0.2
    hdr = io.read_stack_header(path)
    assert (hdr["width"], hdr["height"], hdr["frame_count"], hdr["bits_per_pixel"]) == (7, 6, 5, 16)


def test_truncated_stack_reports_sizes(tmp_path):
    path = io.write_stack(tmp_path / "s.hflw", make_stack())
    data = path.read_bytes()
    path.write_bytes(data[:-10])
    expected = io.stack_file_size(7, 6, 5)
    with pytest.raises(DataError, match=f"expected {expected} bytes for 7x6x5 frames, found {expected - 10}"):
        io.read_stack(path)


def test_bad_headers(tmp_path):
    path = io.write_stack(tmp_path / "s.hflw", make_stack())
    raw = bytearray(path.read_bytes())
    bad = tmp_path / "bad.hflw"
    bad.write_bytes(b"XXXX" + bytes(raw[4:]))
    with pytest.raises(DataError, match="magic"):
        io.read_stack_header(bad)
    bad.write_bytes(bytes(raw[:30]))
    with pytest.raises(DataError, match="truncated"):
        io.read_stack_header(bad)
    with pytest.raises(DataError, match="not found"):
        io.read_stack_header(tmp_path / "missing.hflw")


@pytest.mark.parametrize("dtype", [np.float32, np.float64, np.complex64, np.complex128])
def test_array_round_trip(tmp_path, dtype):
    a = (np.arange(24).reshape(2, 3, 4) * (1 + 1j if np.iscomplexobj(np.zeros(1, dtype)) else 1)).astype(dtype)
    out = io.write_array(tmp_path / "a", a, {"units": "Hz", "t": np.arange(2)})
    assert out.suffix == (".c64" if np.iscomplexobj(a) else ".f32")
    back, meta = io.read_array(tmp_path / "a")
    assert np.array_equal(back, a) and meta == {"units": "Hz", "t": [0, 1]}
    mm, _ = io.read_array(tmp_path / "a", mmap=True)
    assert np.array_equal(mm, a)


def test_array_writer_and_size_check(tmp_path):
    w = io.open_array_writer(tmp_path / "m", (3, 2), False)
    w[:] = 1.5
    w.flush()
    del w
    arr, _ = io.read_array(tmp_path / "m")
    assert np.all(arr == 1.5)
    (tmp_path / "m.f32").write_bytes(b"\0" * 8)
    with pytest.raises(DataError, match="expected 24 bytes"):
        io.read_array(tmp_path / "m")
    with pytest.raises(DataError, match="missing sidecar"):
        io.read_array(tmp_path / "nothing")


def test_pgm_round_trip(tmp_path):
    mask = np.zeros((5, 9), bool)
    mask[2, 3:7] = True
    io.write_pgm(tmp_path / "m.pgm", mask)
    assert np.array_equal(io.read_pgm(tmp_path / "m.pgm") > 0, mask)
    labels = np.arange(45, dtype=np.uint16).reshape(5, 9) * 1000
    io.write_pgm(tmp_path / "l.pgm", labels)
    assert np.array_equal(io.read_pgm(tmp_path / "l.pgm"), labels)
    assert (tmp_path / "m.pgm").read_bytes().startswith(b"P5\n9 5\n255\n")


def test_pgm_errors(tmp_path):
    with pytest.raises(DataError):
        io.write_pgm(tmp_path / "x.pgm", np.zeros((2, 2, 2)))
    with pytest.raises(DataError):
        io.write_pgm(tmp_path / "x.pgm", np.full((2, 2), -1))
    (tmp_path / "t.pgm").write_bytes(b"P5\n4 4\n255\n" + b"\0" * 5)
    with pytest.raises(DataError, match="expected 16 pixel bytes"):
        io.read_pgm(tmp_path / "t.pgm")
    (tmp_path / "c.pgm").write_bytes(b"P5\n# comment\n2 1\n255\n\x01\x02")
    assert list(io.read_pgm(tmp_path / "c.pgm")[0]) == [1, 2]


def test_json_numpy_and_errors(tmp_path):
    io.write_json(tmp_path / "j.json", {"a": np.float32(1.5), "b": np.arange(3), "p": tmp_path, "n": float("nan")})
    back = io.read_json(tmp_path / "j.json")
    assert back["a"] == 1.5 and back["b"] == [0, 1, 2] and back["p"] == str(tmp_path)
    assert not (tmp_path / "j.json.tmp").exists()
    (tmp_path / "bad.json").write_text("{")
    with pytest.raises(DataError, match="invalid JSON"):
        io.read_json(tmp_path / "bad.json")
    with pytest.raises(TypeError):
        io.write_json(tmp_path / "o.json", {"x": object()})
