import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from posedistill.checkpoint import decode_checkpoint, encode_checkpoint, load_checkpoint, save_checkpoint
from posedistill.config import TrainConfig, derive_seed, format_config, load_config, parse_config
from posedistill.errors import ConfigError, FormatError
from posedistill.model import ModelConfig, PoseModel


# --- config -------------------------------------------------------------------------
def test_defaults():
    cfg = TrainConfig()
    assert cfg.image_size == (64, 48)
    assert (cfg.train_size, cfg.val_size, cfg.epochs, cfg.batch_size) == (4096, 512, 30, 32)
    assert cfg.weights.alpha3 == 1.0


def test_parse_with_comments_and_whitespace():
    cfg = parse_config("# desk run\nepochs = 5   # short\n\nuse_kt=0\ndecay_epochs=2, 4\nlr=3e-4\n")
    assert cfg.epochs == 5 and cfg.use_kt is False and cfg.decay_epochs == (2, 4) and cfg.lr == 3e-4


@pytest.mark.parametrize("text", [
    "bogus=1",
    "epochs",
    "epochs=abc",
    "use_kt=maybe",
    "alpha1=-1",
    "epochs=5\ndecay_epochs=3,2",
    "epochs=5\ndecay_epochs=9",
    "sigma_gt=0",
])
def test_bad_config_rejected(text):
    with pytest.raises(ConfigError):
        parse_config(text)


def test_format_parse_round_trip(tmp_path):
    cfg = TrainConfig(epochs=7, decay_epochs=(3,), use_vt=False, alpha4=0.125, student_stem=(4, 8))
    path = tmp_path / "c.cfg"
    path.write_text(format_config(cfg), encoding="utf-8")
    assert load_config(path) == cfg
    assert load_config(None) == TrainConfig()


def test_derive_seed_is_stable_and_label_sensitive():
    assert derive_seed(0, "teacher") == derive_seed(0, "teacher")
    assert derive_seed(0, "teacher") != derive_seed(0, "student")
    assert derive_seed(0, "a", 1) != derive_seed(1, "a", 0)
    assert 0 <= derive_seed(2**64 - 1, "x") < 2**63


# --- checkpoints --------------------------------------------------------------------
def small_state(seed=0):
    cfg = ModelConfig(num_layers=1, embed_dim=8, num_heads=2, stem_channels=(2, 4))
    return PoseModel(cfg, seed=seed).state_dict()


def test_checkpoint_round_trip_bit_exact(tmp_path):
    state = small_state()
    save_checkpoint(tmp_path / "m.dpck", state)
    back = load_checkpoint(tmp_path / "m.dpck")
    assert list(back) == list(state)
    for name in state:
        assert back[name].dtype == np.float32 and back[name].tobytes() == state[name].tobytes()
    save_checkpoint(tmp_path / "again.dpck", back)
    assert (tmp_path / "again.dpck").read_bytes() == (tmp_path / "m.dpck").read_bytes()


def test_checkpoint_layout():
    raw = encode_checkpoint({"w": np.arange(6, dtype=np.float32).reshape(2, 3), "s": np.float32(2.5)})
    assert raw[:4] == b"DPCK" and struct.unpack_from("<I", raw, 4) == (1,)
    # name length, name, rank, extents, data
    assert raw[8:13] == struct.pack("<I", 1) + b"w"
    assert struct.unpack_from("<3I", raw, 13) == (2, 2, 3)
    assert np.frombuffer(raw, "<f4", 6, 25).tolist() == [0, 1, 2, 3, 4, 5]
    back = decode_checkpoint(raw)
    assert back["s"].shape == () and float(back["s"]) == 2.5


@pytest.fixture
def ckpt_bytes():
    return encode_checkpoint(small_state())


@pytest.mark.parametrize("cut", [0, 3, 7, 10, 40, -1])
def test_truncated_checkpoint_is_format_error(ckpt_bytes, cut):
    with pytest.raises(FormatError) as info:
        decode_checkpoint(ckpt_bytes[:cut])
    assert info.value.offset >= 0


def test_checkpoint_bad_magic_and_version(ckpt_bytes):
    with pytest.raises(FormatError, match="magic") as info:
        decode_checkpoint(b"NOPE" + ckpt_bytes[4:])
    assert info.value.offset == 0
    with pytest.raises(FormatError, match="version") as info:
        decode_checkpoint(ckpt_bytes[:4] + struct.pack("<I", 2) + ckpt_bytes[8:])
    assert info.value.offset == 4


def test_checkpoint_duplicate_and_bad_name():
    one = encode_checkpoint({"a": np.zeros(2, np.float32)})
    with pytest.raises(FormatError, match="duplicate"):
        decode_checkpoint(one + one[8:])
    bad = one[:12] + b"\xff" + one[13:]
    with pytest.raises(FormatError, match="UTF-8"):
        decode_checkpoint(bad)


def test_checkpoint_huge_extent_is_format_error(ckpt_bytes):
    raw = bytearray(encode_checkpoint({"a": np.zeros(2, np.float32)}))
    struct.pack_into("<I", raw, 17, 2**31)
    with pytest.raises(FormatError):
        decode_checkpoint(bytes(raw))


@settings(max_examples=60, deadline=None)
@given(st.binary(max_size=80))
def test_random_checkpoint_bytes_never_crash(blob):
    try:
        decode_checkpoint(b"DPCK" + struct.pack("<I", 1) + blob)
    except FormatError:
        pass


def test_loaded_checkpoint_restores_model(tmp_path):
    cfg = ModelConfig(num_layers=1, embed_dim=8, num_heads=2, stem_channels=(2, 4))
    a = PoseModel(cfg, seed=1)
    save_checkpoint(tmp_path / "m.dpck", a.state_dict())
    b = PoseModel(cfg, seed=2)
    b.load_state_dict(load_checkpoint(tmp_path / "m.dpck"))
    x = np.random.default_rng(0).uniform(size=(2, 64, 48)).astype(np.float32)
    assert a(x)[1].mu.data.tobytes() == b(x)[1].mu.data.tobytes()


def test_checkpoint_absurd_rank_is_format_error():
    raw = bytearray(encode_checkpoint({"a": np.zeros(2, np.float32)}))
    struct.pack_into("<I", raw, 13, 65282)
    with pytest.raises(FormatError, match="rank"):
        decode_checkpoint(bytes(raw))
