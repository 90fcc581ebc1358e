"""Gridworld machine state and its fixed-dimension one-hot encoding.

A machine state is the agent pose (row, col, heading), a crash flag, and a
bounded beeper count per cell. States encode into a dense vector of
consecutive one-hot blocks so a state is exactly one index per block; block
geometry is fixed by the world spec, so every state of one task has the same
dimension.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from enum import Enum

import numpy as np


class WorldError(Exception):
    pass


class Heading(Enum):
    N = 0
    E = 1
    S = 2
    W = 3

    def left(self) -> "Heading":
        return Heading((self.value - 1) % 4)

    def right(self) -> "Heading":
        return Heading((self.value + 1) % 4)

    @property
    def delta(self) -> tuple[int, int]:
        return ((-1, 0), (0, 1), (1, 0), (0, -1))[self.value]


@dataclass(frozen=True)
class WorldSpec:
    """Static task geometry: grid size, wall cells, per-cell beeper cap."""

    rows: int
    cols: int
    walls: frozenset[tuple[int, int]] = field(default_factory=frozenset)
    beeper_max: int = 1

    def __post_init__(self):
        if self.rows < 1 or self.cols < 1:
            raise WorldError("grid must be at least 1x1")
        if self.beeper_max < 0:
            raise WorldError("beeper_max must be >= 0")
        for r, c in self.walls:
            if not (0 <= r < self.rows and 0 <= c < self.cols):
                raise WorldError(f"wall ({r},{c}) outside grid")

    def in_bounds(self, row: int, col: int) -> bool:
        return 0 <= row < self.rows and 0 <= col < self.cols

    def is_clear(self, row: int, col: int) -> bool:
        return self.in_bounds(row, col) and (row, col) not in self.walls

    def cell_index(self, row: int, col: int) -> int:
        return row * self.cols + col


@dataclass(frozen=True)
class WorldState:
    """Agent pose plus board status; beepers is a row-major per-cell tuple."""

    row: int
    col: int
    heading: Heading
    crashed: bool
    beepers: tuple[int, ...]

    def beepers_at(self, spec: WorldSpec, row: int, col: int) -> int:
        return self.beepers[spec.cell_index(row, col)]


def validate_state(state: WorldState, spec: WorldSpec) -> None:
    if not spec.in_bounds(state.row, state.col):
        raise WorldError(f"agent ({state.row},{state.col}) outside grid")
    if not state.crashed and (state.row, state.col) in spec.walls:
        raise WorldError("agent standing in a wall cell")
    if len(state.beepers) != spec.rows * spec.cols:
        raise WorldError("beeper tuple length does not match grid")
    for count in state.beepers:
        if not 0 <= count <= spec.beeper_max:
            raise WorldError(f"beeper count {count} outside 0..{spec.beeper_max}")


def empty_beepers(spec: WorldSpec) -> tuple[int, ...]:
    return (0,) * (spec.rows * spec.cols)


class StateLayout:
    """Block layout of encoded states for one world spec.

    Blocks, in order: row (rows), col (cols), heading (4), crashed (2), then
    one block of size beeper_max+1 per cell in row-major order. Dimension is
    rows + cols + 4 + 2 + rows*cols*(beeper_max+1).
    """

    def __init__(self, spec: WorldSpec):
        self.spec = spec
        sizes = [spec.rows, spec.cols, 4, 2]
        sizes += [spec.beeper_max + 1] * (spec.rows * spec.cols)
        self.block_sizes = tuple(sizes)
        self.block_starts = np.concatenate(([0], np.cumsum(sizes[:-1]))).astype(int)
        self.dim = int(sum(sizes))

    def describe(self) -> str:
        s = self.spec
        return (
            f"row:{s.rows},col:{s.cols},heading:4,crashed:2,"
            f"beeper:{s.rows * s.cols}x{s.beeper_max + 1}"
        )

    def encode(self, state: WorldState) -> np.ndarray:
        validate_state(state, self.spec)
        vec = np.zeros(self.dim)
        starts = self.block_starts
        vec[starts[0] + state.row] = 1.0
        vec[starts[1] + state.col] = 1.0
        vec[starts[2] + state.heading.value] = 1.0
        vec[starts[3] + int(state.crashed)] = 1.0
        for i, count in enumerate(state.beepers):
            vec[starts[4 + i] + count] = 1.0
        return vec

    def decode(self, vec: np.ndarray) -> WorldState:
        """Argmax within each block; first index wins ties.

        Accepts arbitrary per-block scores (e.g. softmax outputs), so the
        result may violate wall invariants.
        """
        vec = np.asarray(vec)
        if vec.shape != (self.dim,):
            raise WorldError(f"expected dimension {self.dim}, got {vec.shape}")
        picks = [
            int(np.argmax(vec[start : start + size]))
            for start, size in zip(self.block_starts, self.block_sizes)
        ]
        return WorldState(
            row=picks[0],
            col=picks[1],
            heading=Heading(picks[2]),
            crashed=bool(picks[3]),
            beepers=tuple(picks[4:]),
        )

    def block_argmax(self, vec: np.ndarray) -> np.ndarray:
        """Vector of per-block argmax indices (the state-variable values)."""
        return np.array(
            [
                int(np.argmax(vec[start : start + size]))
                for start, size in zip(self.block_starts, self.block_sizes)
            ]
        )

    def encode_batch(self, states: list[WorldState]) -> np.ndarray:
        n = len(states)
        picks = np.empty((n, len(self.block_sizes)), dtype=np.intp)
        for i, s in enumerate(states):
            validate_state(s, self.spec)
            picks[i, 0] = s.row
            picks[i, 1] = s.col
            picks[i, 2] = s.heading.value
            picks[i, 3] = int(s.crashed)
            picks[i, 4:] = s.beepers
        out = np.zeros((n, self.dim))
        cols = picks + self.block_starts[None, :]
        out[np.arange(n)[:, None], cols] = 1.0
        return out

    def decode_batch(self, vecs: np.ndarray) -> list[WorldState]:
        vecs = np.asarray(vecs)
        if vecs.ndim != 2 or vecs.shape[1] != self.dim:
            raise WorldError(f"expected (n, {self.dim}) matrix")
        picks = np.empty((vecs.shape[0], len(self.block_sizes)), dtype=np.intp)
        for j, (start, size) in enumerate(zip(self.block_starts, self.block_sizes)):
            picks[:, j] = vecs[:, start : start + size].argmax(axis=1)
        return [
            WorldState(
                row=int(p[0]),
                col=int(p[1]),
                heading=Heading(int(p[2])),
                crashed=bool(p[3]),
                beepers=tuple(int(x) for x in p[4:]),
            )
            for p in picks
        ]


def encode_state(state: WorldState, spec: WorldSpec) -> np.ndarray:
    return StateLayout(spec).encode(state)


def decode_state(vec: np.ndarray, spec: WorldSpec) -> WorldState:
    return StateLayout(spec).decode(vec)


def state_variable_accuracy(predicted: WorldState, actual: WorldState) -> float:
    """Fraction of matching state variables.

    The variables are row, col, heading, crashed, and each cell's beeper
    count, each weighted equally.
    """
    if len(predicted.beepers) != len(actual.beepers):
        raise WorldError("states come from different world shapes")
    matches = (
        (predicted.row == actual.row)
        + (predicted.col == actual.col)
        + (predicted.heading == actual.heading)
        + (predicted.crashed == actual.crashed)
    )
    matches += sum(p == a for p, a in zip(predicted.beepers, actual.beepers))
    return matches / (4 + len(actual.beepers))


# --- world files -----------------------------------------------------------

_HEADING_CHARS = {h.name: h for h in Heading}


def parse_world(text: str) -> tuple[WorldSpec, WorldState]:
    """Read the world file format.

    Line 1: "rows cols beeper_max"; then `rows` lines of `cols` characters
    from '.', '#' (wall), or a digit (beeper count); final line
    "agent row col heading".
    """
    lines = [ln for ln in (s.strip() for s in text.splitlines()) if ln]
    if len(lines) < 2:
        raise WorldError("world file too short")
    head = lines[0].split()
    if len(head) != 3:
        raise WorldError("header must be 'rows cols beeper_max'")
    rows, cols, beeper_max = (int(x) for x in head)
    if len(lines) != rows + 2:
        raise WorldError(f"expected {rows} grid lines plus header and agent line")
    walls = set()
    beepers = [0] * (rows * cols)
    for r in range(rows):
        line = lines[1 + r]
        if len(line) != cols:
            raise WorldError(f"grid line {r} has length {len(line)}, want {cols}")
        for c, ch in enumerate(line):
            if ch == "#":
                walls.add((r, c))
            elif ch.isdigit():
                beepers[r * cols + c] = int(ch)
            elif ch != ".":
                raise WorldError(f"bad grid character {ch!r}")
    agent = lines[-1].split()
    if len(agent) != 4 or agent[0] != "agent" or agent[3] not in _HEADING_CHARS:
        raise WorldError("agent line must be 'agent row col heading'")
    spec = WorldSpec(rows, cols, frozenset(walls), beeper_max)
    state = WorldState(
        row=int(agent[1]),
        col=int(agent[2]),
        heading=_HEADING_CHARS[agent[3]],
        crashed=False,
        beepers=tuple(beepers),
    )
    validate_state(state, spec)
    return spec, state


def format_world(spec: WorldSpec, state: WorldState) -> str:
    grid = []
    for r in range(spec.rows):
        row = []
        for c in range(spec.cols):
            if (r, c) in spec.walls:
                row.append("#")
            elif state.beepers[spec.cell_index(r, c)]:
                row.append(str(state.beepers[spec.cell_index(r, c)]))
            else:
                row.append(".")
        grid.append("".join(row))
    lines = [f"{spec.rows} {spec.cols} {spec.beeper_max}"]
    lines += grid
    lines.append(f"agent {state.row} {state.col} {state.heading.name}")
    return "\n".join(lines) + "\n"
