import math
import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from l2vit.model import WeightStore, forward, param_count, variant_config
from l2vit.weights import (
    WeightFormatError,
    init_weights,
    load_weights,
    save_weights,
    truncated_normal,
)
from tests.test_model import SMALL_CFG


class TestInit:
    def test_same_seed_bit_identical(self):
        a = init_weights(SMALL_CFG, 0)
        b = init_weights(SMALL_CFG, 0)
        assert a == b

    def test_different_seed_differs(self):
        assert not (init_weights(SMALL_CFG, 0) == init_weights(SMALL_CFG, 1))

    def test_scale_init_is_sqrt_dim(self):
        store = init_weights(variant_config("tiny"), 0)
        s = float(store["stages.2.blocks.1.attn.scale"])
        assert abs(s - math.sqrt(384)) < 1e-5
        # a 64-dim stage initializes its scale to exactly 8
        s64 = float(init_weights(SMALL_CFG, 0)["stages.2.blocks.1.attn.scale"])
        assert s64 == 8.0

    def test_values_are_float32_representable(self):
        store = init_weights(SMALL_CFG, 2)
        for _, arr in store.items():
            np.testing.assert_array_equal(
                arr, arr.astype(np.float32).astype(np.float64))

    def test_truncation_bound(self):
        rng = np.random.default_rng(0)
        draws = truncated_normal(rng, (20000,), std=0.02)
        assert np.abs(draws).max() <= 0.04
        assert np.abs(draws).max() > 0.02  # tail actually reached

    def test_param_count_matches_report(self):
        for name, target in (("tiny", 29e6), ("small", 50e6), ("base", 89e6)):
            count = param_count(variant_config(name))
            assert abs(count - target) / target <= 0.03


class TestSerialization:
    def test_save_load_save_byte_identical(self, tmp_path):
        store = init_weights(SMALL_CFG, 7)
        p1, p2 = tmp_path / "a.l2vt", tmp_path / "b.l2vt"
        save_weights(store, p1)
        loaded = load_weights(p1)
        assert loaded == store
        save_weights(loaded, p2)
        assert p1.read_bytes() == p2.read_bytes()

    def test_forward_round_trip_bit_exact(self, tmp_path):
        store = init_weights(SMALL_CFG, 9)
        img = np.random.default_rng(1).standard_normal((3, 32, 32))
        baseline = forward(img, SMALL_CFG, store)
        save_weights(store, tmp_path / "w.l2vt")
        reloaded = load_weights(tmp_path / "w.l2vt")
        np.testing.assert_array_equal(forward(img, SMALL_CFG, reloaded), baseline)

    def test_empty_store(self, tmp_path):
        path = tmp_path / "empty.l2vt"
        save_weights(WeightStore(), path)
        blob = path.read_bytes()
        assert len(blob) == 16  # 12-byte header + trailing CRC
        assert blob[:4] == b"L2VT"
        assert len(load_weights(path)) == 0

    def test_rank_zero_round_trip(self, tmp_path):
        store = WeightStore({"scalar": np.asarray(2.5)})
        save_weights(store, tmp_path / "s.l2vt")
        out = load_weights(tmp_path / "s.l2vt")
        assert out["scalar"].shape == () and float(out["scalar"]) == 2.5

    def test_payload_corruption_detected(self, tmp_path):
        store = WeightStore({"w": np.arange(6.0).reshape(2, 3)})
        path = tmp_path / "c.l2vt"
        save_weights(store, path)
        blob = bytearray(path.read_bytes())
        blob[-8] ^= 0x01  # one payload byte, not the CRC itself
        path.write_bytes(bytes(blob))
        with pytest.raises(WeightFormatError, match="checksum"):
            load_weights(path)

    def test_bad_magic(self, tmp_path):
        path = tmp_path / "m.l2vt"
        save_weights(WeightStore(), path)
        blob = bytearray(path.read_bytes())
        blob[:4] = b"NOPE"
        path.write_bytes(bytes(blob))
        with pytest.raises(WeightFormatError, match="magic"):
            load_weights(path)

    def test_version_mismatch(self, tmp_path):
        path = tmp_path / "v.l2vt"
        save_weights(WeightStore(), path)
        blob = bytearray(path.read_bytes())
        blob[4:8] = struct.pack("<I", 99)
        path.write_bytes(bytes(blob))
        with pytest.raises(WeightFormatError, match="version"):
            load_weights(path)

    def test_truncated_file(self, tmp_path):
        store = WeightStore({"w": np.ones((4, 4))})
        path = tmp_path / "t.l2vt"
        save_weights(store, path)
        path.write_bytes(path.read_bytes()[:20])
        with pytest.raises(WeightFormatError):
            load_weights(path)

    def test_f32_quantization_on_save(self, tmp_path):
        # a value off the float32 grid must come back rounded, not exact
        value = 0.1 + 2 ** -40
        store = WeightStore({"w": np.asarray([value])})
        save_weights(store, tmp_path / "q.l2vt")
        out = load_weights(tmp_path / "q.l2vt")
        assert out["w"][0] == float(np.float32(value))
        assert out["w"][0] != value


class TestSerializationProperties:
    @given(st.dictionaries(
        st.text(min_size=1, max_size=24).filter(lambda s: s.strip()),
        st.tuples(st.lists(st.integers(1, 4), min_size=0, max_size=3),
                  st.integers(0, 2 ** 31)),
        min_size=0, max_size=6))
    @settings(max_examples=30, deadline=None)
    def test_round_trip_any_store(self, spec):
        # float32-grid values round trip exactly, for any names and ranks
        import tempfile
        from pathlib import Path

        store = WeightStore()
        for name, (shape, seed) in spec.items():
            values = np.random.default_rng(seed).standard_normal(shape)
            store[name] = values.astype(np.float32).astype(np.float64)
        with tempfile.TemporaryDirectory() as td:
            path = Path(td) / "store.l2vt"
            save_weights(store, path)
            assert load_weights(path) == store


class TestWeightStore:
    def test_lexicographic_iteration(self):
        store = WeightStore({"b": np.ones(1), "a": np.ones(1), "a.b": np.ones(1)})
        assert [n for n, _ in store.items()] == ["a", "a.b", "b"]

    def test_copy_is_deep_for_values(self):
        store = WeightStore({"w": np.ones(3)})
        clone = store.copy()
        clone["w"][0] = 5.0
        assert store["w"][0] == 1.0

    def test_missing_name_message(self):
        with pytest.raises(KeyError, match="no tensor named"):
            WeightStore()["nope"]
