from pathlib import Path

import numpy as np
import pytest

from blurrast.image_io import (ImageFormatError, decode_srgb, encode_srgb, read_image, read_png,
                               read_rfi, save_frame, to_straight, write_png, write_rfi)
from blurrast.scene import Scene

GOLDEN = Path(__file__).parent / "golden"


def test_rfi_roundtrip(tmp_path, rng):
    a = rng.normal(size=(5, 7, 4)).astype(np.float32)
    p = write_rfi(tmp_path / "a.rfi", a)
    data = p.read_bytes()
    assert data[:4] == b"RFI1"
    assert int.from_bytes(data[4:8], "little") == 7
    assert int.from_bytes(data[8:12], "little") == 5
    assert int.from_bytes(data[12:16], "little") == 4
    assert len(data) == 16 + 4 * a.size
    np.testing.assert_array_equal(read_rfi(p), a)


def test_rfi_gray(tmp_path):
    a = np.arange(6, dtype=np.float32).reshape(2, 3)
    assert read_rfi(write_rfi(tmp_path / "g.rfi", a)).shape == (2, 3, 1)


def test_rfi_corrupt(tmp_path):
    p = tmp_path / "x.rfi"
    p.write_bytes(b"NOPE" + bytes(12))
    with pytest.raises(ImageFormatError):
        read_rfi(p)
    write_rfi(p, np.zeros((2, 2, 4)))
    p.write_bytes(p.read_bytes()[:-4])
    with pytest.raises(ImageFormatError, match="expected 16 floats"):
        read_rfi(p)


def test_srgb_inverse(rng):
    x = rng.uniform(size=100)
    np.testing.assert_allclose(decode_srgb(encode_srgb(x)), x, rtol=1e-12)


def test_png_roundtrip_premultiplied(tmp_path, rng):
    rgb = rng.uniform(size=(6, 6, 3))
    alpha = np.ones((6, 6))
    alpha[0, 0] = 0.0
    alpha[1, 1] = 0.5
    p = write_png(tmp_path / "c.png", rgb, alpha)
    back = read_png(p)
    assert back.shape == (6, 6, 4)
    np.testing.assert_allclose(back[..., 3], np.rint(alpha * 255) / 255)
    assert not back[0, 0].any()
    # 8-bit quantization after gamma encoding stays within a couple of levels
    np.testing.assert_allclose(back[2:, 2:, :3], rgb[2:, 2:], atol=0.02)


def test_read_image_dispatch(tmp_path):
    a = np.random.default_rng(0).uniform(size=(3, 3, 4))
    np.testing.assert_allclose(read_image(write_rfi(tmp_path / "t.rfi", a)), a, rtol=1e-7)
    with pytest.raises(ImageFormatError):
        read_image(write_rfi(tmp_path / "t3.rfi", a[..., :3]))
    (tmp_path / "t.bmp").write_bytes(b"x")
    with pytest.raises(ImageFormatError):
        read_image(tmp_path / "t.bmp")
    with pytest.raises(FileNotFoundError):
        read_image(tmp_path / "missing.png")


def test_to_straight():
    rgb = np.array([[[0.2, 0.1, 0.0], [0.3, 0.3, 0.3]]])
    alpha = np.array([[0.5, 0.0]])
    np.testing.assert_allclose(to_straight(rgb, alpha), [[[0.4, 0.2, 0.0], [0, 0, 0]]])


def test_golden_rotation_frame(tmp_path):
    scene = Scene.load(GOLDEN / "rotation_ico.json")
    frame = scene.render()
    golden = read_rfi(GOLDEN / "rotation_ico.rfi")
    np.testing.assert_allclose(frame.rgba(), golden, atol=1e-6)
    png, rfi = save_frame(frame, tmp_path / "render")
    assert png.suffix == ".png" and rfi.suffix == ".rfi"
    np.testing.assert_array_equal(read_rfi(rfi), golden)
