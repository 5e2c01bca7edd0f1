"""Field persistence and lookup-table sampling.

On disk a field is a fixed-size UTF-8 header block of key=value lines,
terminated by a blank line and NUL-padded to HEADER_SIZE bytes, followed by
two little-endian float64 arrays (values, then controls) in C order,
i.e. index = (i_r * n_xi_a + i_xi_a) * n_xi_t + i_xi_t.
"""
import csv
import logging
import math
import zlib
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Union

import numpy as np
from pydantic import BaseModel
from scipy.interpolate import RegularGridInterpolator

from dynamics import pure_pursuit_control
from exceptions import FieldChecksumError, FieldFormatError, FieldVersionError, TruncatedPayloadError
from geometry import wrap_angle
from models import GridSpec, ReducedState, SolverVariant, ValueField, VehicleParams, WezParams

logger = logging.getLogger(__name__)

MAGIC = "WEZFIELD"
FORMAT_VERSION = 1
HEADER_SIZE = 4096
PAYLOAD_DTYPE = np.dtype("<f8")


class FieldFileHeader(BaseModel):
    """Metadata block written ahead of a field's payload"""
    format_version: int = FORMAT_VERSION
    n_r: int
    n_xi_a: int
    n_xi_t: int
    r_max: float
    variant: SolverVariant
    sigma: float
    terminal_penalty: float
    converged: bool
    iterations: int
    agent: VehicleParams
    target: VehicleParams
    checksum: int

    @classmethod
    def for_field(cls, field: ValueField, checksum: int) -> "FieldFileHeader":
        return cls(
            n_r=field.grid.n_r,
            n_xi_a=field.grid.n_xi_a,
            n_xi_t=field.grid.n_xi_t,
            r_max=field.grid.r_max,
            variant=field.variant,
            sigma=field.sigma,
            terminal_penalty=field.terminal_penalty,
            converged=field.converged,
            iterations=field.iterations,
            agent=field.agent,
            target=field.target,
            checksum=checksum,
        )

    @property
    def grid(self) -> GridSpec:
        return GridSpec(n_r=self.n_r, n_xi_a=self.n_xi_a, n_xi_t=self.n_xi_t, r_max=self.r_max)

    def to_text(self) -> str:
        lines = [
            MAGIC,
            f"format_version={self.format_version}",
            f"n_r={self.n_r}",
            f"n_xi_a={self.n_xi_a}",
            f"n_xi_t={self.n_xi_t}",
            f"r_max={self.r_max!r}",
            f"variant={self.variant.value}",
            f"sigma={self.sigma!r}",
            f"terminal_penalty={self.terminal_penalty!r}",
            f"converged={'true' if self.converged else 'false'}",
            f"iterations={self.iterations}",
        ]
        for role, vehicle in (("agent", self.agent), ("target", self.target)):
            lines += [
                f"{role}.speed={vehicle.speed!r}",
                f"{role}.max_turn_rate={vehicle.max_turn_rate!r}",
                f"{role}.wez.weapon_speed_ratio={vehicle.wez.weapon_speed_ratio!r}",
                f"{role}.wez.weapon_range={vehicle.wez.weapon_range!r}",
                f"{role}.wez.capture_radius={vehicle.wez.capture_radius!r}",
            ]
        lines.append(f"checksum={self.checksum:08x}")
        return "\n".join(lines) + "\n\n"

    @classmethod
    def from_text(cls, text: str) -> "FieldFileHeader":
        lines = text.split("\n")
        if not lines or lines[0] != MAGIC:
            raise FieldFormatError("not a field file (bad magic line)")
        entries: Dict[str, str] = {}
        for line in lines[1:]:
            if not line:
                break
            key, sep, value = line.partition("=")
            if not sep:
                raise FieldFormatError(f"malformed header line: {line!r}")
            entries[key] = value

        version = int(entries.get("format_version", "-1"))
        if version != FORMAT_VERSION:
            raise FieldVersionError(f"field format version {version}, expected {FORMAT_VERSION}")

        def vehicle(role: str) -> VehicleParams:
            return VehicleParams(
                speed=float(entries[f"{role}.speed"]),
                max_turn_rate=float(entries[f"{role}.max_turn_rate"]),
                wez=WezParams(
                    weapon_speed_ratio=float(entries[f"{role}.wez.weapon_speed_ratio"]),
                    weapon_range=float(entries[f"{role}.wez.weapon_range"]),
                    capture_radius=float(entries[f"{role}.wez.capture_radius"]),
                ),
            )

        try:
            return cls(
                format_version=version,
                n_r=int(entries["n_r"]),
                n_xi_a=int(entries["n_xi_a"]),
                n_xi_t=int(entries["n_xi_t"]),
                r_max=float(entries["r_max"]),
                variant=SolverVariant(entries["variant"]),
                sigma=float(entries["sigma"]),
                terminal_penalty=float(entries["terminal_penalty"]),
                converged=entries["converged"] == "true",
                iterations=int(entries["iterations"]),
                agent=vehicle("agent"),
                target=vehicle("target"),
                checksum=int(entries["checksum"], 16),
            )
        except KeyError as e:
            raise FieldFormatError(f"header is missing {e.args[0]}") from None


def _payload(field: ValueField) -> bytes:
    values = np.ascontiguousarray(field.values, dtype=PAYLOAD_DTYPE)
    controls = np.ascontiguousarray(field.controls, dtype=PAYLOAD_DTYPE)
    return values.tobytes(order="C") + controls.tobytes(order="C")


def save_field(field: ValueField, path: Union[str, Path]) -> None:
    payload = _payload(field)
    header = FieldFileHeader.for_field(field, zlib.crc32(payload)).to_text().encode("utf-8")
    if len(header) > HEADER_SIZE:
        raise FieldFormatError(f"header of {len(header)} bytes exceeds the {HEADER_SIZE}-byte block")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as file:
        file.write(header.ljust(HEADER_SIZE, b"\0"))
        file.write(payload)
    logger.debug("saved %s field %s to %s", field.variant.value, field.grid.shape, path)


def _parse_header_block(block: bytes, path) -> FieldFileHeader:
    if len(block) < HEADER_SIZE:
        raise TruncatedPayloadError(f"{path}: file ends inside the header block")
    end = block[:HEADER_SIZE].find(b"\n\n")
    if end < 0:
        raise FieldFormatError(f"{path}: header block is not terminated by a blank line")
    try:
        return FieldFileHeader.from_text(block[:end + 2].decode("utf-8"))
    except UnicodeDecodeError:
        raise FieldFormatError(f"{path}: header is not UTF-8") from None


def read_header(path: Union[str, Path]) -> FieldFileHeader:
    """Decode only the metadata block of a field file"""
    with open(path, "rb") as file:
        return _parse_header_block(file.read(HEADER_SIZE), path)


def load_field(path: Union[str, Path]) -> ValueField:
    with open(path, "rb") as file:
        raw = file.read()
    header = _parse_header_block(raw[:HEADER_SIZE], path)

    grid = header.grid
    payload = raw[HEADER_SIZE:]
    expected = 2 * grid.size * PAYLOAD_DTYPE.itemsize
    if len(payload) != expected:
        raise TruncatedPayloadError(f"{path}: payload has {len(payload)} bytes, header implies {expected}")
    if zlib.crc32(payload) != header.checksum:
        raise FieldChecksumError(f"{path}: payload checksum mismatch")

    arrays = np.frombuffer(payload, dtype=PAYLOAD_DTYPE).astype(np.float64)
    values = arrays[:grid.size].reshape(grid.shape)
    controls = arrays[grid.size:].reshape(grid.shape)
    return ValueField(
        grid=grid,
        values=values,
        controls=controls,
        agent=header.agent,
        target=header.target,
        variant=header.variant,
        sigma=header.sigma,
        terminal_penalty=header.terminal_penalty,
        converged=header.converged,
        iterations=header.iterations,
    )


def periodic_interpolator(grid: GridSpec, data: np.ndarray) -> RegularGridInterpolator:
    """Trilinear interpolator over the grid with both angle axes closed at +pi.

    Callers must wrap angles to [-pi, pi) and clamp r to [0, r_max].
    """
    padded = np.concatenate([data, data[:, :1, :]], axis=1)
    padded = np.concatenate([padded, padded[:, :, :1]], axis=2)
    axes = (
        grid.r_nodes(),
        np.append(grid.xi_a_nodes(), math.pi),
        np.append(grid.xi_t_nodes(), math.pi),
    )
    return RegularGridInterpolator(axes, padded, method="linear", bounds_error=False, fill_value=None)


class FieldSampler:
    """Linear-interpolation lookups into one field's values and controls"""

    def __init__(self, field: ValueField):
        self.field = field
        self.max_turn_rate = field.agent.max_turn_rate
        self._values = periodic_interpolator(field.grid, field.values)
        self._controls = periodic_interpolator(field.grid, field.controls)

    def _points(self, r, xi_a, xi_t) -> np.ndarray:
        r = np.clip(np.atleast_1d(np.asarray(r, dtype=float)), 0.0, self.field.grid.r_max)
        xi_a = np.atleast_1d(wrap_angle(xi_a))
        xi_t = np.atleast_1d(wrap_angle(xi_t))
        r, xi_a, xi_t = np.broadcast_arrays(r, xi_a, xi_t)
        return np.stack([r, xi_a, xi_t], axis=-1)

    def controls(self, r, xi_a, xi_t) -> np.ndarray:
        """Blended turn-rate command; pure pursuit beyond r_max."""
        r = np.atleast_1d(np.asarray(r, dtype=float))
        command = self._controls(self._points(r, xi_a, xi_t))
        outside = r > self.field.grid.r_max
        if np.any(outside):
            fallback = pure_pursuit_control(np.broadcast_to(xi_t, r.shape), self.max_turn_rate)
            command = np.where(outside, fallback, command)
        return command

    def values(self, r, xi_a, xi_t) -> np.ndarray:
        return self._values(self._points(r, xi_a, xi_t))


def sample_control(field: ValueField, state: ReducedState) -> float:
    return float(FieldSampler(field).controls(state.r, state.xi_a, state.xi_t)[0])


def sample_value(field: ValueField, state: ReducedState) -> float:
    return float(FieldSampler(field).values(state.r, state.xi_a, state.xi_t)[0])


@dataclass(frozen=True)
class SliceRow:
    r: float
    xi_t: float
    value: float
    control: float


def extract_slice(field: ValueField, xi_a: float) -> List[SliceRow]:
    """Nearest-node plane of constant xi_A, rows ordered by r then xi_T."""
    grid = field.grid
    i_a = int(round((wrap_angle(xi_a) + math.pi) / grid.dxi_a)) % grid.n_xi_a
    r_nodes, xi_t_nodes = grid.r_nodes(), grid.xi_t_nodes()
    return [
        SliceRow(
            r=float(r_nodes[i_r]),
            xi_t=float(xi_t_nodes[i_t]),
            value=float(field.values[i_r, i_a, i_t]),
            control=float(field.controls[i_r, i_a, i_t]),
        )
        for i_r in range(grid.n_r)
        for i_t in range(grid.n_xi_t)
    ]


def write_slice_csv(rows: List[SliceRow], path: Union[str, Path]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as file:
        writer = csv.writer(file)
        writer.writerow(["r", "xi_T", "value", "control"])
        for row in rows:
            writer.writerow([repr(row.r), repr(row.xi_t), repr(row.value), repr(row.control)])
