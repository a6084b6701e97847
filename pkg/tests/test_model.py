"""Encoder construction, forward contracts, and the checkpoint format."""
import dataclasses
import json
import struct

import numpy as np
import pytest

from sward.data import NormStats
from sward.model import (
    Checkpoint,
    CheckpointError,
    MAGIC,
    ModelConfig,
    build,
    checkpoint_from_bytes,
    checkpoint_to_bytes,
    denormalize,
    encode,
    load_checkpoint,
    params_to_tensors,
    predict_composition,
    predict_scalars,
    project,
    save_checkpoint,
    trunk_param_names,
)

SMALL = ModelConfig(input_size=16, conv_channels=(4, 8), embedding_dim=12,
                    projection_dim=6, n_species=3)


def test_config_validation():
    with pytest.raises(ValueError):
        ModelConfig(n_species=2)
    with pytest.raises(ValueError):
        ModelConfig(input_size=4, conv_channels=(4, 8, 16))  # 4 < 2**3
    with pytest.raises(ValueError):
        ModelConfig(conv_channels=())
    with pytest.raises(ValueError):
        ModelConfig(embedding_dim=0)
    cfg = ModelConfig(conv_channels=[4, 8])
    assert cfg.conv_channels == (4, 8)


def test_build_shapes_and_provenance():
    ckpt = build(SMALL, seed=0)
    assert ckpt.provenance == "random_init"
    assert ckpt.seed == 0
    assert ckpt.params["conv1.weight"].shape == (4, 3, 3, 3)
    assert ckpt.params["conv2.weight"].shape == (8, 4, 3, 3)
    # trunk after two 2x pools on 16x16 -> GAP over 8 channels
    assert ckpt.params["embed.weight"].shape == (8, 12)
    assert ckpt.params["proj1.weight"].shape == (12, 12)
    assert ckpt.params["proj2.weight"].shape == (12, 6)
    assert ckpt.params["comp.weight"].shape == (12, 3)
    assert ckpt.params["scalar.weight"].shape == (12, 2)
    for name, arr in ckpt.params.items():
        assert arr.dtype == np.float32, name
        if name.endswith(".bias"):
            np.testing.assert_array_equal(arr, 0.0)


def test_build_without_scalar_head():
    cfg = dataclasses.replace(SMALL, predict_scalars=False)
    ckpt = build(cfg, seed=0)
    assert "scalar.weight" not in ckpt.params
    assert "comp.weight" in ckpt.params


def test_init_statistics_follow_fan_in():
    cfg = ModelConfig(input_size=32, conv_channels=(64,), embedding_dim=256,
                      projection_dim=64)
    ckpt = build(cfg, seed=3)
    w = ckpt.params["conv1.weight"]
    expected = np.sqrt(2.0 / (3 * 9))
    assert abs(w.std() / expected - 1.0) < 0.1
    e = ckpt.params["embed.weight"]
    assert abs(e.std() / np.sqrt(2.0 / 64) - 1.0) < 0.1


def test_build_deterministic_and_seed_sensitive():
    a = checkpoint_to_bytes(build(SMALL, seed=5))
    b = checkpoint_to_bytes(build(SMALL, seed=5))
    c = checkpoint_to_bytes(build(SMALL, seed=6))
    assert a == b
    assert a != c


def test_trunk_param_names_cover_everything_but_heads():
    names = set(trunk_param_names(SMALL))
    assert names == {"conv1.weight", "conv1.bias", "conv2.weight", "conv2.bias",
                     "embed.weight", "embed.bias"}


# ---------------------------------------------------------------------------
# forward contracts


def test_encode_project_predict_shapes_and_ranges():
    ckpt = build(SMALL, seed=1)
    batch = np.random.default_rng(0).uniform(size=(5, 3, 16, 16)).astype(np.float32)
    emb = encode(ckpt, batch)
    assert emb.shape == (5, 12)
    proj = project(ckpt, emb)
    assert proj.shape == (5, 6)
    np.testing.assert_allclose(np.linalg.norm(proj, axis=1), 1.0, atol=1e-5)
    comp = predict_composition(ckpt, emb)
    assert comp.shape == (5, 3)
    assert (comp >= 0).all()
    np.testing.assert_allclose(comp.sum(axis=1), 100.0, atol=1e-3)
    sc = predict_scalars(ckpt, emb)
    assert sc.shape == (5, 2)
    assert (sc > 0).all() and (sc < 1).all()


def test_encode_rejects_wrong_geometry():
    ckpt = build(SMALL, seed=1)
    with pytest.raises(ValueError):
        encode(ckpt, np.zeros((2, 3, 8, 8), dtype=np.float32))
    with pytest.raises(ValueError):
        encode(ckpt, np.zeros((2, 1, 16, 16), dtype=np.float32))


def test_predict_composition_requires_head():
    ckpt = build(SMALL, seed=1)
    stripped = {k: v for k, v in ckpt.params.items() if not k.startswith(("comp.", "scalar."))}
    bare = Checkpoint(config=SMALL, params=stripped, provenance="imix_pretrained", seed=1)
    emb = np.zeros((2, 12), dtype=np.float32)
    with pytest.raises(ValueError, match="composition head"):
        predict_composition(bare, emb)


def test_denormalize_round_trip():
    stats = NormStats(mass_min=500.0, mass_max=4000.0, height_min=3.0, height_max=18.0)
    ckpt = build(SMALL, seed=1)
    ckpt = dataclasses.replace(ckpt, norm_stats=stats)
    sc = np.array([[0.0, 0.0], [1.0, 1.0], [0.5, 0.25]], dtype=np.float32)
    mass, height = denormalize(ckpt, sc)
    np.testing.assert_allclose(mass, [500.0, 4000.0, 2250.0], rtol=1e-6)
    np.testing.assert_allclose(height, [3.0, 18.0, 6.75], rtol=1e-6)


def test_denormalize_requires_stats():
    ckpt = build(SMALL, seed=1)
    with pytest.raises(ValueError):
        denormalize(ckpt, np.zeros((1, 2), dtype=np.float32))


def test_four_species_head():
    cfg = dataclasses.replace(SMALL, n_species=4, predict_scalars=False)
    ckpt = build(cfg, seed=2)
    assert ckpt.params["comp.weight"].shape == (12, 4)
    emb = encode(ckpt, np.zeros((2, 3, 16, 16), dtype=np.float32))
    comp = predict_composition(ckpt, emb)
    assert comp.shape == (2, 4)
    np.testing.assert_allclose(comp.sum(axis=1), 100.0, atol=1e-3)


# ---------------------------------------------------------------------------
# checkpoint format


def test_checkpoint_round_trip_is_byte_identical(tmp_path):
    stats = NormStats(mass_min=100.0, mass_max=900.0, height_min=2.0, height_max=20.0)
    ckpt = dataclasses.replace(build(SMALL, seed=9), norm_stats=stats,
                               provenance="finetuned")
    raw = checkpoint_to_bytes(ckpt)
    again = checkpoint_to_bytes(checkpoint_from_bytes(raw))
    assert raw == again

    path = tmp_path / "model.ckpt"
    save_checkpoint(ckpt, path)
    loaded = load_checkpoint(path)
    assert checkpoint_to_bytes(loaded) == raw
    assert loaded.config == ckpt.config
    assert loaded.provenance == "finetuned"
    assert loaded.norm_stats == stats
    for name in ckpt.params:
        np.testing.assert_array_equal(loaded.params[name], ckpt.params[name])


def test_checkpoint_header_layout():
    ckpt = build(SMALL, seed=0)
    raw = checkpoint_to_bytes(ckpt)
    assert raw[:4] == MAGIC
    version, meta_len = struct.unpack("<IQ", raw[4:16])
    assert version == 1
    meta = json.loads(raw[16:16 + meta_len])
    assert meta["provenance"] == "random_init"
    assert meta["seed"] == 0
    n_floats = sum(int(np.prod(shape)) for _, shape in meta["params"])
    assert len(raw) == 16 + meta_len + 4 * n_floats


def test_checkpoint_rejects_corruption():
    ckpt = build(SMALL, seed=0)
    raw = checkpoint_to_bytes(ckpt)

    with pytest.raises(CheckpointError, match="magic"):
        checkpoint_from_bytes(b"XXXX" + raw[4:])
    with pytest.raises(CheckpointError, match="version"):
        checkpoint_from_bytes(raw[:4] + struct.pack("<I", 99) + raw[8:])
    with pytest.raises(CheckpointError, match="truncated"):
        checkpoint_from_bytes(raw[:10])
    with pytest.raises(CheckpointError, match="truncated"):
        checkpoint_from_bytes(raw[:-8])
    with pytest.raises(CheckpointError, match="trailing"):
        checkpoint_from_bytes(raw + b"\x00\x00\x00\x00")
    with pytest.raises(CheckpointError, match="metadata"):
        version_and_len = struct.pack("<IQ", 1, 5)
        checkpoint_from_bytes(MAGIC + version_and_len + b"not{j" + raw[16:])


def test_checkpoint_rejects_bad_provenance():
    ckpt = build(SMALL, seed=0)
    raw = checkpoint_to_bytes(ckpt)
    meta_len = struct.unpack("<Q", raw[8:16])[0]
    meta = json.loads(raw[16:16 + meta_len])
    meta["provenance"] = "mystery"
    blob = json.dumps(meta, sort_keys=True, separators=(",", ":")).encode()
    doctored = raw[:8] + struct.pack("<Q", len(blob)) + blob + raw[16 + meta_len:]
    with pytest.raises(CheckpointError, match="provenance"):
        checkpoint_from_bytes(doctored)


def test_checkpoint_rejects_shape_mismatch():
    ckpt = build(SMALL, seed=0)
    raw = checkpoint_to_bytes(ckpt)
    meta_len = struct.unpack("<Q", raw[8:16])[0]
    meta = json.loads(raw[16:16 + meta_len])
    for entry in meta["params"]:
        if entry[0] == "conv1.weight":
            entry[1] = [4, 3, 5, 5]
    blob = json.dumps(meta, sort_keys=True, separators=(",", ":")).encode()
    doctored = raw[:8] + struct.pack("<Q", len(blob)) + blob + raw[16 + meta_len:]
    with pytest.raises(CheckpointError, match="shape"):
        checkpoint_from_bytes(doctored)


def test_load_checkpoint_missing_file(tmp_path):
    with pytest.raises(OSError):
        load_checkpoint(tmp_path / "absent.ckpt")


def test_params_to_tensors_keeps_arrays_shared_or_copied():
    ckpt = build(SMALL, seed=0)
    tensors = params_to_tensors(ckpt.params)
    for name, t in tensors.items():
        assert t.requires_grad
        assert t.data.dtype == np.float32
        np.testing.assert_array_equal(t.data, ckpt.params[name])
