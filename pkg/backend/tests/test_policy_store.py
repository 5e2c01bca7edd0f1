import csv
import math

import numpy as np
import pytest

from exceptions import FieldChecksumError, FieldFormatError, FieldVersionError, TruncatedPayloadError
from models import ReducedState
from policy_store import (
    HEADER_SIZE,
    FieldSampler,
    extract_slice,
    load_field,
    read_header,
    sample_control,
    sample_value,
    save_field,
    write_slice_csv,
)


def test_save_load_is_bit_exact(tmp_path, random_field):
    path = tmp_path / "fields" / "baseline-agent_12^3.field"
    save_field(random_field, path)
    loaded = load_field(path)
    assert loaded.values.tobytes() == random_field.values.tobytes()
    assert loaded.controls.tobytes() == random_field.controls.tobytes()
    assert loaded.grid == random_field.grid
    assert loaded.agent == random_field.agent
    assert loaded.target == random_field.target
    assert loaded.variant == random_field.variant
    assert (loaded.converged, loaded.iterations) == (True, 321)


def test_randomized_round_trips(tmp_path, random_field):
    rng = np.random.default_rng(99)
    path = tmp_path / "f.field"
    for _ in range(50):
        values = rng.normal(0.0, 1e3, random_field.grid.shape)
        values[0, 0, 0] = math.ulp(0.0)
        field = random_field.with_arrays(values, rng.normal(size=random_field.grid.shape))
        save_field(field, path)
        loaded = load_field(path)
        assert np.array_equal(loaded.values, field.values)
        assert np.array_equal(loaded.controls, field.controls)


def test_file_layout(tmp_path, random_field):
    path = tmp_path / "f.field"
    save_field(random_field, path)
    raw = path.read_bytes()
    assert raw.startswith(b"WEZFIELD\n")
    assert len(raw) == HEADER_SIZE + 2 * random_field.grid.size * 8
    header = read_header(path)
    assert header.grid == random_field.grid
    assert header.checksum > 0


def test_flipped_payload_bit_is_detected(tmp_path, random_field):
    path = tmp_path / "f.field"
    save_field(random_field, path)
    raw = bytearray(path.read_bytes())
    raw[HEADER_SIZE + 17] ^= 0x01
    path.write_bytes(bytes(raw))
    with pytest.raises(FieldChecksumError):
        load_field(path)


@pytest.mark.parametrize("cut", [1, 8, 500])
def test_truncated_payload_is_detected(tmp_path, random_field, cut):
    path = tmp_path / "f.field"
    save_field(random_field, path)
    path.write_bytes(path.read_bytes()[:-cut])
    with pytest.raises(TruncatedPayloadError):
        load_field(path)


def test_extra_payload_bytes_are_rejected(tmp_path, random_field):
    path = tmp_path / "f.field"
    save_field(random_field, path)
    path.write_bytes(path.read_bytes() + b"\0" * 8)
    with pytest.raises(TruncatedPayloadError):
        load_field(path)


def test_file_ending_inside_header(tmp_path, random_field):
    path = tmp_path / "f.field"
    save_field(random_field, path)
    path.write_bytes(path.read_bytes()[:100])
    with pytest.raises(TruncatedPayloadError):
        load_field(path)


def test_unknown_version_is_rejected(tmp_path, random_field):
    path = tmp_path / "f.field"
    save_field(random_field, path)
    raw = path.read_bytes().replace(b"format_version=1\n", b"format_version=9\n", 1)
    path.write_bytes(raw)
    with pytest.raises(FieldVersionError):
        load_field(path)


def test_bad_magic_is_rejected(tmp_path, random_field):
    path = tmp_path / "f.field"
    save_field(random_field, path)
    path.write_bytes(b"NOTFIELD" + path.read_bytes()[8:])
    with pytest.raises(FieldFormatError):
        load_field(path)


def test_sampling_at_nodes_returns_stored_entries(random_field):
    grid = random_field.grid
    for node in [(1, 2, 3), (5, 0, 11), (10, 7, 7)]:
        state = grid.node_state(*node)
        assert sample_value(random_field, state) == pytest.approx(random_field.values[node])
        assert sample_control(random_field, state) == pytest.approx(random_field.controls[node])


def test_sampling_is_periodic_across_pi(random_field):
    grid = random_field.grid
    just_below = ReducedState(2.0, math.pi - 1e-12, 0.3)
    at_minus_pi = ReducedState(2.0, -math.pi, 0.3)
    assert sample_value(random_field, just_below) == pytest.approx(sample_value(random_field, at_minus_pi), abs=1e-9)
    # halfway between the last node and the wrapped first node
    mid = ReducedState(grid.r_nodes()[4], math.pi - grid.dxi_a / 2, grid.xi_t_nodes()[2])
    expected = 0.5 * (random_field.values[4, -1, 2] + random_field.values[4, 0, 2])
    assert sample_value(random_field, mid) == pytest.approx(expected)


def test_sampling_beyond_r_max(random_field):
    grid = random_field.grid
    sampler = FieldSampler(random_field)
    value = sampler.values(grid.r_max + 3.0, grid.xi_a_nodes()[1], grid.xi_t_nodes()[1])[0]
    assert value == pytest.approx(random_field.values[-1, 1, 1])
    control = sampler.controls(grid.r_max + 3.0, 0.0, 0.4)[0]
    assert control == random_field.agent.max_turn_rate


def test_sampler_vectorizes(random_field):
    sampler = FieldSampler(random_field)
    r = np.array([0.5, 1.0, 2.5])
    out = sampler.values(r, 0.1, np.array([0.0, 1.0, -1.0]))
    assert out.shape == (3,)


def test_extract_slice_nearest_plane(random_field):
    grid = random_field.grid
    rows = extract_slice(random_field, math.pi)  # nearest node is xi_A = -pi
    assert len(rows) == grid.n_r * grid.n_xi_t
    assert rows[0].r == 0.0
    assert rows[0].xi_t == pytest.approx(-math.pi)
    assert rows[1].r == 0.0 and rows[1].xi_t > rows[0].xi_t
    assert rows[grid.n_xi_t + 2].value == random_field.values[1, 0, 2]
    assert rows[-1].control == random_field.controls[-1, 0, -1]


def test_write_slice_csv(tmp_path, random_field):
    path = tmp_path / "slice.csv"
    rows = extract_slice(random_field, 0.0)
    write_slice_csv(rows, path)
    with open(path, newline="") as file:
        parsed = list(csv.reader(file))
    assert parsed[0] == ["r", "xi_T", "value", "control"]
    assert len(parsed) == len(rows) + 1
    assert float(parsed[5][2]) == rows[4].value
