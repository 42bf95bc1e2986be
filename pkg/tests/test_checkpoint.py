import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from nfcnn.checkpoint import (
    MAGIC,
    CheckpointError,
    load_checkpoint,
    save_checkpoint,
)
from nfcnn.model import ModelConfig, Parameters, model_init
from nfcnn.tensor import Tensor
from nfcnn.training import AdamState


def params_equal(a, b):
    if a.names() != b.names():
        return False
    for name in a.names():
        va, vb = a[name], b[name]
        da = va.data if isinstance(va, Tensor) else va
        db = vb.data if isinstance(vb, Tensor) else vb
        if da.dtype != db.dtype or not np.array_equal(da, db):
            return False
    return True


class TestRoundTrip:
    def test_bitwise_lossless(self, tiny_config, tmp_path):
        params = model_init(tiny_config, seed=3)
        path = tmp_path / "m.nfck"
        save_checkpoint(path, tiny_config, params)
        config2, params2, adam = load_checkpoint(path)
        assert adam is None
        assert config2 == tiny_config
        assert params_equal(params, params2)

    def test_trainable_vs_state_kinds(self, tiny_config, tmp_path):
        params = model_init(tiny_config, seed=3)
        path = tmp_path / "m.nfck"
        save_checkpoint(path, tiny_config, params)
        _, params2, _ = load_checkpoint(path)
        for name in params2.names():
            value = params2[name]
            if name.endswith((".run_mean", ".run_var")):
                assert isinstance(value, np.ndarray)
            else:
                assert isinstance(value, Tensor) and value.requires_grad

    def test_optimizer_state_round_trip(self, tiny_config, tmp_path, rng):
        params = model_init(tiny_config, seed=3)
        adam = AdamState.create(params)
        adam.step = 17
        for name in adam.m:
            adam.m[name][...] = rng.normal(size=adam.m[name].shape)
            adam.v[name][...] = rng.random(size=adam.v[name].shape)
        path = tmp_path / "m.nfck"
        save_checkpoint(path, tiny_config, params, adam)
        _, _, adam2 = load_checkpoint(path)
        assert adam2.step == 17
        for name in adam.m:
            np.testing.assert_array_equal(adam.m[name], adam2.m[name])
            np.testing.assert_array_equal(adam.v[name], adam2.v[name])

    def test_float64_round_trip(self, tiny_config, tmp_path):
        params = model_init(tiny_config, seed=3, dtype=np.float64)
        path = tmp_path / "m64.nfck"
        save_checkpoint(path, tiny_config, params)
        _, params2, _ = load_checkpoint(path)
        assert params2["stage1.clean.layer1.weight"].dtype == np.float64
        assert params_equal(params, params2)

    def test_save_load_save_identical_bytes(self, tiny_config, tmp_path):
        params = model_init(tiny_config, seed=5)
        p1 = tmp_path / "a.nfck"
        p2 = tmp_path / "b.nfck"
        save_checkpoint(p1, tiny_config, params)
        config2, params2, _ = load_checkpoint(p1)
        save_checkpoint(p2, config2, params2)
        assert p1.read_bytes() == p2.read_bytes()


class TestValidation:
    def test_bad_magic(self, tmp_path):
        path = tmp_path / "bad.nfck"
        path.write_bytes(b"XXXX" + b"\x00" * 32)
        with pytest.raises(CheckpointError, match="magic"):
            load_checkpoint(path)

    def test_unknown_version(self, tiny_config, tmp_path):
        path = tmp_path / "v.nfck"
        params = model_init(tiny_config, seed=0)
        save_checkpoint(path, tiny_config, params)
        raw = bytearray(path.read_bytes())
        raw[4:8] = (99).to_bytes(4, "little")
        path.write_bytes(bytes(raw))
        with pytest.raises(CheckpointError, match="version"):
            load_checkpoint(path)

    def test_truncated(self, tiny_config, tmp_path):
        path = tmp_path / "t.nfck"
        params = model_init(tiny_config, seed=0)
        save_checkpoint(path, tiny_config, params)
        path.write_bytes(path.read_bytes()[:40])
        with pytest.raises(CheckpointError, match="truncated"):
            load_checkpoint(path)

    def test_magic_constant(self):
        assert MAGIC == b"NFCK"


class TestNameTable:
    def test_hierarchical_names(self, tiny_config, tmp_path):
        params = model_init(tiny_config, seed=1)
        path = tmp_path / "m.nfck"
        save_checkpoint(path, tiny_config, params)
        _, params2, _ = load_checkpoint(path)
        names = set(params2.names())
        assert "stage1.clean.layer1.weight" in names
        assert "stage1.noise.layer1.bias" in names
        assert "stage1.clean.layer1.run_mean" in names
        assert "fusion1.A1.layer1.weight" in names
        assert "fusion1.D.layer6.weight" in names

    def test_no_fusion_names_absent(self, tiny_config, tmp_path):
        from dataclasses import replace
        cfg = replace(tiny_config, fusion_enabled=False)
        params = model_init(cfg, seed=1)
        path = tmp_path / "nf.nfck"
        save_checkpoint(path, cfg, params)
        _, params2, _ = load_checkpoint(path)
        assert not any(n.startswith("fusion") for n in params2.names())


@settings(max_examples=15, deadline=None)
@given(seed=st.integers(0, 10_000), n_tensors=st.integers(1, 6))
def test_random_parameter_sets_round_trip(tmp_path_factory, seed, n_tensors):
    g = np.random.default_rng(seed)
    params = Parameters()
    for i in range(n_tensors):
        shape = tuple(int(s) for s in g.integers(1, 5, size=int(g.integers(1, 4))))
        dtype = np.float64 if g.random() < 0.5 else np.float32
        params.add(f"t{i}.weight",
                   Tensor(g.normal(size=shape).astype(dtype), requires_grad=True))
    cfg = ModelConfig(stages=1, image_channels=1, branch_widths=(4,))
    path = tmp_path_factory.mktemp("ckpt") / "r.nfck"
    save_checkpoint(path, cfg, params)
    _, params2, _ = load_checkpoint(path)
    assert params_equal(params, params2)
