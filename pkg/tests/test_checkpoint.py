import struct

import numpy as np
import pytest

from src.diffusion.approximators import reverse_apply
from src.errors import (
    CheckpointChecksumError,
    CheckpointError,
    CheckpointTruncatedError,
    CheckpointVersionError,
    KindMismatchError,
)
from src.nodes.evaluate_node import evaluate_model
from src.tools.datasets import swiss_roll
from src.utils.checkpoint import (
    Checkpoint,
    checkpoint_bytes,
    load_checkpoint,
    parse_checkpoint,
    save_checkpoint,
)


@pytest.fixture
def rbf_checkpoint(small_rbf):
    _, model, _ = small_rbf
    return Checkpoint(model=model, step=12, seed=99, factor=1.5)


class TestRoundTrip:
    def test_arrays_come_back_bitwise(self, rbf_checkpoint, tmp_path):
        save_checkpoint(tmp_path / "model.ckpt", rbf_checkpoint)
        again = load_checkpoint(tmp_path / "model.ckpt")
        np.testing.assert_array_equal(again.model.params.values, rbf_checkpoint.model.params.values)
        np.testing.assert_array_equal(again.spec.schedule.beta, rbf_checkpoint.spec.schedule.beta)
        assert (again.step, again.seed, again.factor) == (12, 99, 1.5)
        assert not (tmp_path / "model.ckpt.tmp").exists()

    def test_serialization_is_stable(self, rbf_checkpoint):
        data = checkpoint_bytes(rbf_checkpoint)
        assert checkpoint_bytes(parse_checkpoint(data)) == data

    def test_learnable_schedule_survives(self, rbf_checkpoint):
        again = parse_checkpoint(checkpoint_bytes(rbf_checkpoint))
        assert again.spec.schedule.learnable
        np.testing.assert_array_equal(again.spec.schedule.unconstrained, rbf_checkpoint.spec.schedule.unconstrained)

    def test_restored_model_behaves_identically(self, small_mlp):
        spec, model, data = small_mlp
        again = parse_checkpoint(checkpoint_bytes(Checkpoint(model=model)))
        assert again.spec.equilibrium_rate == spec.equilibrium_rate
        np.testing.assert_array_equal(reverse_apply(again.model, data[:4], 3).rate,
                                      reverse_apply(model, data[:4], 3).rate)


class TestCorruption:
    def test_truncated_file(self, rbf_checkpoint):
        data = checkpoint_bytes(rbf_checkpoint)
        with pytest.raises(CheckpointTruncatedError):
            parse_checkpoint(data[:-10])
        with pytest.raises(CheckpointChecksumError):
            parse_checkpoint(data[:20])

    def test_flipped_payload_byte(self, rbf_checkpoint):
        data = bytearray(checkpoint_bytes(rbf_checkpoint))
        data[-40] ^= 0xFF
        with pytest.raises(CheckpointChecksumError):
            parse_checkpoint(bytes(data))

    def test_future_version(self, rbf_checkpoint):
        data = bytearray(checkpoint_bytes(rbf_checkpoint))
        struct.pack_into("<I", data, 8, 2)
        with pytest.raises(CheckpointVersionError):
            parse_checkpoint(bytes(data))

    def test_foreign_file(self, tmp_path):
        path = tmp_path / "notes.ckpt"
        path.write_bytes(b"hello, this is not a model at all")
        with pytest.raises(CheckpointError):
            load_checkpoint(path)


def test_binomial_checkpoint_on_continuous_data(small_mlp, rng):
    _, model, _ = small_mlp
    restored = parse_checkpoint(checkpoint_bytes(Checkpoint(model=model))).model
    with pytest.raises(KindMismatchError):
        evaluate_model(restored, swiss_roll(50, 0), rng)
