"""Run-config serialization and checkpoint file format."""

import numpy as np
import pytest

from deformtrace.checkpoint import MAGIC, VERSION, load_checkpoint, save_checkpoint
from deformtrace.config import (
    CONFIG_VERSION,
    RunConfig,
    load_config,
    parse_config,
    save_config,
    serialize_config,
)


def test_config_roundtrip_all_fields():
    cfg = RunConfig(
        c=32, l=3, m=2, n_s=2, n_q=7, n_r=3, lam1=0.25, lam2=0.125,
        variant="no_relay", heads=2, k_points=2, state_dim=4, enc_layers=2,
        omega=0.5, dc_flatten="level_major", c_in=5, n_1=80, fps=10.0,
        difficulty=0.75, ramp=3, n_train=12, n_eval=6, epochs=2,
        batch_size=4, lr=1e-3, weight_decay=0.0, warmup_epochs=1,
        clip_norm=0.5, eval_every=1, seed=42,
    )
    assert parse_config(serialize_config(cfg)) == cfg


def test_config_file_roundtrip(tmp_path):
    cfg = RunConfig(c=16, seed=9)
    path = tmp_path / "run.cfg"
    save_config(cfg, path)
    assert load_config(path) == cfg
    assert path.read_text().startswith(f"version={CONFIG_VERSION}\n")


def test_config_defaults_survive_partial_file():
    cfg = parse_config("version=1\nc=64\nlr=0.001\n")
    assert cfg.c == 64 and cfg.lr == 0.001
    assert cfg.n_q == RunConfig().n_q


def test_config_comments_and_blank_lines():
    text = "# run settings\nversion=1\n\nc=48  # width\n   \nseed=3\n"
    cfg = parse_config(text)
    assert cfg.c == 48 and cfg.seed == 3


def test_config_rejections():
    with pytest.raises(ValueError, match="unknown config key"):
        parse_config("version=1\nchannles=64\n")
    with pytest.raises(ValueError, match="duplicate key"):
        parse_config("version=1\nc=64\nc=32\n")
    with pytest.raises(ValueError, match="version"):
        parse_config("version=2\nc=64\n")
    with pytest.raises(ValueError, match="missing version"):
        parse_config("c=64\n")
    with pytest.raises(ValueError, match="key=value"):
        parse_config("version=1\njust a line\n")


def test_config_types_parse():
    cfg = parse_config("version=1\nc=12\nlr=5e-4\nvariant=fullformer\n")
    assert isinstance(cfg.c, int) and isinstance(cfg.lr, float)
    assert cfg.variant == "fullformer"


def test_model_config_mapping():
    cfg = RunConfig(c=32, heads=2, n_q=5, k_points=3, variant="no_enh", c_in=4, fps=8.0)
    mc = cfg.model_config()
    assert mc.c == 32 and mc.heads == 2 and mc.n_q == 5
    assert mc.k == 3 and mc.variant == "no_enh"
    assert mc.c_in == 4 and mc.fps == 8.0


# --- checkpoints ---


def test_checkpoint_roundtrip_bit_exact(tmp_path):
    rng = np.random.default_rng(0)
    params = {
        "enc.w": rng.normal(size=(3, 4)),
        "enc.b": rng.normal(size=4),
        "scalar": np.array(1.5),
        "deep.tensor": rng.normal(size=(2, 3, 2)),
    }
    path = tmp_path / "model.dtck"
    save_checkpoint(params, path)
    back = load_checkpoint(path)
    assert set(back) == set(params)
    for name, arr in params.items():
        assert back[name].shape == np.asarray(arr).shape
        assert np.array_equal(back[name], arr)


def test_checkpoint_rejects_corruption(tmp_path):
    path = tmp_path / "m.dtck"
    save_checkpoint({"w": np.ones((2, 2))}, path)
    raw = path.read_bytes()

    bad = tmp_path / "magic.dtck"
    bad.write_bytes(b"NOPE" + raw[4:])
    with pytest.raises(ValueError, match="bad magic"):
        load_checkpoint(bad)

    vers = tmp_path / "vers.dtck"
    vers.write_bytes(MAGIC + (VERSION + 7).to_bytes(4, "little") + raw[8:])
    with pytest.raises(ValueError, match="version"):
        load_checkpoint(vers)

    trunc = tmp_path / "trunc.dtck"
    trunc.write_bytes(raw[:-8])
    with pytest.raises(ValueError, match="truncated"):
        load_checkpoint(trunc)


def test_checkpoint_name_order_is_canonical(tmp_path):
    a, b = tmp_path / "a.dtck", tmp_path / "b.dtck"
    x, y = np.ones(2), np.zeros(3)
    save_checkpoint({"m": x, "a": y}, a)
    save_checkpoint({"a": y, "m": x}, b)
    assert a.read_bytes() == b.read_bytes()
