import struct

import numpy as np
import pytest
from conftest import random_checkpoint
from hypothesis import given, settings
from hypothesis import strategies as st

from codemerge.errors import FormatError, ParameterError, StorageError, StructuralError
from codemerge.tensor_store import (
    Checkpoint,
    Tensor,
    check_compatible,
    checkpoint_linear_combination,
    checkpoint_load,
    checkpoint_save,
    decode_checkpoint,
    encode_checkpoint,
    flatten,
)


def reference_encoding(c: Checkpoint) -> bytes:
    """Byte layout written out field by field with struct."""
    out = b"CMCK" + struct.pack("<IQQ", 1, c.step, len(c))
    for name, t in c.entries.items():
        raw = name.encode()
        out += struct.pack("<I", len(raw)) + raw + struct.pack("<I", t.rank)
        out += struct.pack(f"<{t.rank}Q", *t.dims)
        out += struct.pack(f"<{t.size}f", *t.data.tolist())
    return out


# -- Tensor / Checkpoint construction ---------------------------------------


def test_scalar_tensor_has_rank_zero_and_one_value():
    t = Tensor.scalar(1.0)
    assert t.rank == 0 and t.size == 1 and t.dims == ()


@pytest.mark.parametrize("bad", [np.nan, np.inf, -np.inf])
def test_non_finite_values_are_rejected(bad):
    with pytest.raises(ParameterError):
        Tensor((2,), [1.0, bad])


def test_length_must_match_dims():
    with pytest.raises(ParameterError):
        Tensor((2, 3), np.zeros(5))


def test_zero_dimension_rejected():
    with pytest.raises(ParameterError):
        Tensor((0,), [])


def test_tensor_buffer_is_read_only():
    t = Tensor.from_array(np.ones(3))
    with pytest.raises(ValueError):
        t.data[0] = 2.0


def test_duplicate_names_rejected():
    with pytest.raises(ParameterError):
        Checkpoint(0, [("a", Tensor.scalar(1.0)), ("a", Tensor.scalar(2.0))])


def test_insertion_order_is_kept():
    c = Checkpoint.from_arrays(0, {"z": 1.0, "a": 2.0, "m": 3.0})
    assert c.names() == ["z", "a", "m"]


def test_negative_step_rejected():
    with pytest.raises(ParameterError):
        Checkpoint(-1, {})


# -- serialization -----------------------------------------------------------


def test_empty_checkpoint_file_is_header_only(tmp_path):
    p = tmp_path / "e.cmck"
    checkpoint_save(Checkpoint(0, {}), p)
    data = p.read_bytes()
    # magic(4) + version u32(4) + step u64(8) + count u64(8)
    assert len(data) == 24
    assert data == b"CMCK" + struct.pack("<IQQ", 1, 0, 0)


def test_scalar_one_round_trips_to_ieee_bit_pattern(tmp_path):
    p = tmp_path / "s.cmck"
    checkpoint_save(Checkpoint(0, {"x": Tensor.scalar(1.0)}), p)
    back = checkpoint_load(p)
    assert back["x"].data.view(np.uint32)[0] == 0x3F800000
    assert p.read_bytes()[-4:] == bytes.fromhex("0000803f")


def test_random_checkpoint_round_trip(tmp_path, rng):
    c = Checkpoint.from_arrays(7, {"w": rng.normal(size=(2, 3)), "b": rng.normal(size=3)})
    p = tmp_path / "c.cmck"
    checkpoint_save(c, p)
    assert checkpoint_load(p) == c
    assert checkpoint_load(p).names() == ["w", "b"]


def test_encoding_matches_field_by_field_layout(rng):
    for step in range(30):
        c = random_checkpoint(rng, step=step * 1000)
        assert encode_checkpoint(c) == reference_encoding(c)


def test_negative_zero_survives_round_trip():
    c = Checkpoint(0, {"z": Tensor((2,), np.array([-0.0, 0.0], dtype=np.float32))})
    back = decode_checkpoint(encode_checkpoint(c))
    assert back == c
    assert np.signbit(back["z"].data[0]) and not np.signbit(back["z"].data[1])


def test_wrong_magic_is_format_error():
    buf = bytearray(encode_checkpoint(Checkpoint(0, {"a": Tensor.scalar(1.0)})))
    buf[:4] = b"XXXX"
    with pytest.raises(FormatError, match="magic"):
        decode_checkpoint(bytes(buf))


def test_wrong_version_is_format_error():
    buf = bytearray(encode_checkpoint(Checkpoint(0, {})))
    buf[4:8] = struct.pack("<I", 2)
    with pytest.raises(FormatError, match="version"):
        decode_checkpoint(bytes(buf))


def test_trailing_bytes_are_format_error():
    with pytest.raises(FormatError):
        decode_checkpoint(encode_checkpoint(Checkpoint(0, {})) + b"\0")


def test_non_finite_payload_is_format_error():
    buf = bytearray(encode_checkpoint(Checkpoint(0, {"a": Tensor.scalar(1.0)})))
    buf[-4:] = struct.pack("<f", float("nan"))
    with pytest.raises(FormatError, match="non-finite"):
        decode_checkpoint(bytes(buf))


def test_truncation_mid_tensor_names_the_tensor():
    c = Checkpoint.from_arrays(3, {"first": np.ones(2), "weights": np.arange(6.0).reshape(2, 3)})
    buf = encode_checkpoint(c)
    start = len(encode_checkpoint(Checkpoint.from_arrays(3, {"first": np.ones(2)})))
    name_end = start + 4 + len("weights")
    for cut in range(name_end, len(buf)):
        with pytest.raises(FormatError, match="'weights'"):
            decode_checkpoint(buf[:cut])


def test_every_truncation_is_rejected(rng):
    c = random_checkpoint(rng, step=5)
    buf = encode_checkpoint(c)
    for cut in range(len(buf)):
        with pytest.raises(FormatError):
            decode_checkpoint(buf[:cut])


def test_missing_file_is_storage_error(tmp_path):
    with pytest.raises(StorageError) as info:
        checkpoint_load(tmp_path / "nope.cmck")
    assert info.value.path is not None


@settings(max_examples=60, deadline=None)
@given(
    step=st.integers(0, 2**64 - 1),
    values=st.lists(st.floats(allow_nan=False, allow_infinity=False, width=32), min_size=1, max_size=12),
)
def test_round_trip_is_bit_exact_for_any_finite_floats(step, values):
    c = Checkpoint(step, {"p": Tensor((len(values),), np.array(values, dtype=np.float32))})
    assert decode_checkpoint(encode_checkpoint(c)) == c


# -- arithmetic ----------------------------------------------------------------


def test_linear_combination_identity(rng):
    c = random_checkpoint(rng, step=2)
    assert checkpoint_linear_combination([(1.0, c)]) == c


def test_linear_combination_convex_fixed_point(rng):
    c = random_checkpoint(rng, step=2)
    assert checkpoint_linear_combination([(0.5, c), (0.5, c)]) == c


def test_linear_combination_scalar_arithmetic():
    a = Checkpoint(0, {"s": Tensor.scalar(1.0)})
    b = Checkpoint(1, {"s": Tensor.scalar(2.0)})
    out = checkpoint_linear_combination([(0.3, a), (0.7, b)])
    assert out["s"].data[0] == np.float32(1.7)
    assert out.step == 1


def test_interpolation_is_affine_within_one_ulp(rng):
    a = Checkpoint.from_arrays(0, {"w": rng.normal(size=50)})
    b = Checkpoint.from_arrays(1, {"w": rng.normal(size=50)})
    fa, fb = flatten(a), flatten(b)
    for lam in np.linspace(0, 1, 13):
        got = checkpoint_linear_combination([(1 - lam, a), (lam, b)])["w"].data
        exact = ((1 - lam) * fa + lam * fb).astype(np.float32)
        ulps = np.abs(got.view(np.int32).astype(np.int64) - exact.view(np.int32).astype(np.int64))
        assert ulps.max() <= 1


def test_flatten_commutes_with_linear_combination(rng):
    shapes = {"w": (3, 4), "b": (4,), "s": ()}
    a = Checkpoint.from_arrays(0, {n: rng.normal(size=s) for n, s in shapes.items()})
    b = Checkpoint.from_arrays(1, {n: rng.normal(size=s) for n, s in shapes.items()})
    combo = flatten(checkpoint_linear_combination([(0.25, a), (-1.5, b)]))
    direct = 0.25 * flatten(a) - 1.5 * flatten(b)
    np.testing.assert_allclose(combo, direct, rtol=1e-7, atol=0)


def test_incompatible_checkpoints_raise_structural_error():
    a = Checkpoint.from_arrays(0, {"w": np.ones(3)})
    with pytest.raises(StructuralError):
        check_compatible([a, Checkpoint.from_arrays(0, {"w": np.ones(4)})])
    with pytest.raises(StructuralError):
        check_compatible([a, Checkpoint.from_arrays(0, {"v": np.ones(3)})])
    with pytest.raises(StructuralError):
        checkpoint_linear_combination([(0.5, a), (0.5, Checkpoint.from_arrays(0, {"w": np.ones((3, 1))}))])
