import io
import struct

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from mgsnet import netpbm
from mgsnet.checkpoint import load_checkpoint, save_checkpoint
from mgsnet.config import ConfigError, format_config, parse_config
from mgsnet.net import NetConfig, SaliencyNet, synth_dataset
from mgsnet.tensor import ShapeError, read_tensor, tensor_from_bytes, tensor_to_bytes, write_tensor


# --- MGST container ------------------------------------------------------

def test_container_layout():
    x = np.arange(6.0).reshape(1, 2, 1, 3)
    buf = tensor_to_bytes(x)
    assert buf[:4] == b"MGST"
    assert struct.unpack_from("<5I", buf, 4) == (4, 1, 2, 1, 3)
    assert struct.unpack_from("<6d", buf, 24) == tuple(range(6))


@settings(max_examples=40, deadline=None)
@given(shape=st.tuples(*(st.integers(0, 4) for _ in range(4))), seed=st.integers(0, 2**31))
def test_container_round_trip(shape, seed):
    x = np.random.default_rng(seed).normal(size=shape) * 1e3
    y = read_tensor(io.BytesIO(tensor_to_bytes(x)))
    assert y.shape == x.shape and y.tobytes() == x.tobytes()


def test_container_rejects_corruption(tmp_path):
    buf = tensor_to_bytes(np.ones((1, 1, 2, 2)))
    with pytest.raises(ValueError, match="magic"):
        tensor_from_bytes(b"XXXX" + buf[4:])
    with pytest.raises(ValueError, match="truncated"):
        tensor_from_bytes(buf[:-1])
    with pytest.raises(ValueError, match="trailing"):
        read_tensor(io.BytesIO(buf + b"\0"))
    with pytest.raises(ShapeError):
        tensor_to_bytes(np.ones((2, 2)))
    write_tensor(tmp_path / "t.mgst", np.ones((1, 1, 2, 2)))
    assert read_tensor(tmp_path / "t.mgst").sum() == 4.0


# --- netpbm ---------------------------------------------------------------

def test_p5_example(tmp_path):
    path = tmp_path / "a.pgm"
    path.write_bytes(b"P5\n2 2\n255\n" + bytes([0, 255, 128, 64]))
    np.testing.assert_array_equal(netpbm.load_image(path)[0, 0].ravel(),
                                  [0.0, 1.0, 128 / 255, 64 / 255])


def test_p6_pixel(tmp_path):
    path = tmp_path / "a.ppm"
    path.write_bytes(b"P6 1 1 255\n" + bytes([255, 0, 0]))
    np.testing.assert_array_equal(netpbm.load_image(path)[0, :, 0, 0], [1.0, 0.0, 0.0])


def test_header_with_comment(tmp_path):
    path = tmp_path / "c.pgm"
    path.write_bytes(b"P5\n# made by hand\n1 2\n255\n" + bytes([3, 4]))
    assert netpbm.read_raw(path)[0].ravel().tolist() == [3, 4]


@pytest.mark.parametrize("data,match", [
    (b"P5\n", "missing width at byte 3"),
    (b"P5\n4\n", "missing height"),
    (b"P5 2 2 100\n" + bytes(4), "unsupported maxval"),
    (b"P3 1 1 255\n0", "unsupported magic"),
    (b"P5 2 2 255\n" + bytes(3), "truncated at byte 14"),
])
def test_malformed_files_are_rejected(tmp_path, data, match):
    path = tmp_path / "bad.pgm"
    path.write_bytes(data)
    with pytest.raises(netpbm.NetpbmError, match=match):
        netpbm.read_raw(path)


def test_quantize_examples(caplog):
    assert netpbm.quantize(np.array([0.5]), 255)[0] == 128
    assert not netpbm.quantize(np.zeros(4), 255).any()
    with caplog.at_level("WARNING"):
        assert netpbm.quantize(np.array([1.5, -0.2]), 255).tolist() == [255, 0]
    assert "clamped" in caplog.text


@pytest.mark.parametrize("bitdepth,channels", [(8, 1), (8, 3), (16, 1), (16, 3)])
def test_quantized_round_trip_is_exact(tmp_path, bitdepth, channels):
    maxval = 255 if bitdepth == 8 else 65535
    x = np.random.default_rng(bitdepth + channels).uniform(size=(channels, 5, 7))
    q = netpbm.quantize(x, maxval) / maxval
    path = tmp_path / ("x.ppm" if channels == 3 else "x.pgm")
    netpbm.save_image(q, path, bitdepth=bitdepth)
    y = netpbm.load_image(path)[0]
    assert y.tobytes() == q.tobytes()
    netpbm.save_image(y, path, bitdepth=bitdepth)
    assert netpbm.load_image(path)[0].tobytes() == q.tobytes()


def test_depth_round_trip(tmp_path):
    d = np.round(np.random.default_rng(0).uniform(0.5, 4.0, size=(1, 1, 6, 5)), 3)
    d[0, 0, 0, 0] = 0.0
    netpbm.save_depth(d, tmp_path / "d.pgm")
    np.testing.assert_array_equal(netpbm.load_depth(tmp_path / "d.pgm"), d)
    assert netpbm.read_raw(tmp_path / "d.pgm")[1] == 65535


# --- config ---------------------------------------------------------------

def test_config_defaults_and_values():
    assert parse_config("") == NetConfig()
    cfg = parse_config("lambda = 0.5\n# comment\nsize = 32x48  # trailing\nchannels = 8,8,16\n"
                       "generator = learned\nclamp = 2.5\n")
    assert cfg.lam == 0.5 and cfg.size == (32, 48) and cfg.channels == (8, 8, 16)
    assert cfg.generator == "learned" and cfg.clamp == 2.5
    assert parse_config(format_config(cfg)) == cfg


@pytest.mark.parametrize("text,match", [
    ("generator = magic", "geometric, learned"),
    ("lr = 0.1\nspeed = 3", "line 2: unknown key 'speed'"),
    ("epochs = many", "line 1: bad value"),
    ("size 32x32", "expected 'key = value'"),
    ("size = 30x32", "divisible"),
])
def test_config_errors(text, match):
    with pytest.raises(ConfigError, match=match):
        parse_config(text)


# --- checkpoint -------------------------------------------------------------

@pytest.mark.parametrize("generator", ["geometric", "learned"])
def test_checkpoint_round_trip_is_bit_exact(tmp_path, generator):
    cfg = NetConfig(size=(16, 16), channels=(4, 8, 16), generator=generator, seed=3, clamp=1.5)
    net = SaliencyNet(cfg)
    path = tmp_path / "net.ckpt"
    save_checkpoint(path, net)
    back = load_checkpoint(path)
    assert back.config == cfg
    for k in net.params:
        assert back.params[k].tobytes() == net.params[k].tobytes()
    d = synth_dataset(2, 1, 16, 16)
    a = net.forward(d["rgb"], d["depth"], d["intrinsics"])
    b = back.forward(d["rgb"], d["depth"], d["intrinsics"])
    assert a.tobytes() == b.tobytes()
    save_checkpoint(tmp_path / "again.ckpt", back)
    assert (tmp_path / "again.ckpt").read_bytes() == path.read_bytes()


def test_checkpoint_rejects_damage(tmp_path):
    path = tmp_path / "net.ckpt"
    save_checkpoint(path, SaliencyNet(NetConfig(size=(8, 8), channels=(2, 4, 8))))
    good = path.read_bytes()
    path.write_bytes(b"NOPE" + good[4:])
    with pytest.raises(ValueError, match="header"):
        load_checkpoint(path)
    path.write_bytes(good[:-8])
    with pytest.raises(ValueError, match="truncated"):
        load_checkpoint(path)
    path.write_bytes(good.replace(b"channels = 2,4,8", b"channels = 4,4,8"))
    with pytest.raises(ShapeError):
        load_checkpoint(path)
