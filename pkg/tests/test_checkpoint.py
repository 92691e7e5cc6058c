"""Weight container: bit-exact round-trips and corruption rejection."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from bbeval import checkpoint
from bbeval.exceptions import FormatError


class TestCheckpoint:
    def test_round_trip_values_and_order(self, tmp_path):
        rng = np.random.default_rng(0)
        tensors = {"a.w": rng.normal(size=(3, 4)).astype(np.float32),
                   "a.b": rng.normal(size=4).astype(np.float32),
                   "scalarish": np.float32(2.5).reshape(())}
        path = tmp_path / "w.bbgw"
        checkpoint.save_tensors(tensors, path)
        back = checkpoint.load_tensors(path)
        assert list(back) == list(tensors)
        for name in tensors:
            np.testing.assert_array_equal(back[name], np.asarray(tensors[name]))

    def test_file_round_trip_bit_exact(self, tmp_path):
        rng = np.random.default_rng(1)
        tensors = {"t": rng.normal(size=(2, 3, 5)).astype(np.float32)}
        p1, p2 = tmp_path / "a.bbgw", tmp_path / "b.bbgw"
        checkpoint.save_tensors(tensors, p1)
        checkpoint.save_tensors(checkpoint.load_tensors(p1), p2)
        assert p1.read_bytes() == p2.read_bytes()

    def test_magic_prefix(self, tmp_path):
        path = tmp_path / "w.bbgw"
        checkpoint.save_tensors({"x": np.zeros(2, np.float32)}, path)
        assert path.read_bytes()[:5] == b"BBGW1"

    def test_bad_magic_rejected(self, tmp_path):
        path = tmp_path / "bad.bbgw"
        path.write_bytes(b"NOPE!" + b"\x00" * 16)
        with pytest.raises(FormatError) as err:
            checkpoint.load_tensors(path)
        assert err.value.offset == 0

    def test_truncated_payload_rejected(self, tmp_path):
        path = tmp_path / "w.bbgw"
        checkpoint.save_tensors({"x": np.arange(6, dtype=np.float32)}, path)
        blob = path.read_bytes()
        (tmp_path / "cut.bbgw").write_bytes(blob[:-4])
        with pytest.raises(FormatError):
            checkpoint.load_tensors(tmp_path / "cut.bbgw")

    @given(seed=st.integers(0, 2 ** 31 - 1), rank=st.integers(1, 4))
    @settings(max_examples=20, deadline=None)
    def test_random_shapes_round_trip(self, tmp_path_factory, seed, rank):
        rng = np.random.default_rng(seed)
        shape = tuple(int(rng.integers(1, 5)) for _ in range(rank))
        arr = rng.normal(size=shape).astype(np.float32)
        path = tmp_path_factory.mktemp("ckpt") / "t.bbgw"
        checkpoint.save_tensors({"t": arr}, path)
        np.testing.assert_array_equal(checkpoint.load_tensors(path)["t"], arr)


class TestModelCheckpoint:
    def test_model_state_round_trip(self, tmp_path, tiny_model):
        path = tmp_path / "model.bbgw"
        checkpoint.save_tensors(tiny_model.state_dict(), path)
        from bbeval.nn import Model
        clone = Model(tiny_model.spec, seed=123)
        clone.load_state_dict(checkpoint.load_tensors(path))
        for name, p in tiny_model.params.items():
            np.testing.assert_array_equal(clone.params[name].data, p.data)

    def test_spec_round_trips_through_checkpoint(self, tmp_path):
        from bbeval import nn
        spec = nn.desk_defended_spec((1, 12, 12), 10)
        model = nn.Model(spec, seed=77)
        path = tmp_path / "m.bbgw"
        checkpoint.save_tensors(model.state_dict(), path)
        p2 = tmp_path / "m2.bbgw"
        checkpoint.save_tensors(checkpoint.load_tensors(path), p2)
        assert path.read_bytes() == p2.read_bytes()
