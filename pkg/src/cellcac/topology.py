"""Hexagonal cell layouts in axial coordinates."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

# axial (q, r) offsets of the six neighbours, counter-clockwise from east
DIRECTIONS = ((1, 0), (1, -1), (0, -1), (-1, 0), (-1, 1), (0, 1))


@dataclass(frozen=True)
class HexTopology:
    coords: tuple          # (q, r) per cell
    targets: tuple         # per cell, 6 entries: neighbour id or -1 off the edge
    rings: int

    @property
    def num_cells(self) -> int:
        return len(self.coords)

    @property
    def cells(self) -> range:
        return range(len(self.coords))

    @property
    def neighbors(self) -> tuple:
        return tuple(tuple(t for t in row if t >= 0) for row in self.targets)

    @property
    def degree(self) -> np.ndarray:
        return np.array([sum(t >= 0 for t in row) for row in self.targets])

    @property
    def boundary_deficit(self) -> np.ndarray:
        return 6 - self.degree


def build_hex_topology(rings: int) -> HexTopology:
    """Hexagonal disc of cells within ``rings`` steps of the centre.

    rings=0 is a single cell, rings=2 the usual 19-cell cluster.
    """
    if rings < 0:
        raise ValueError("rings must be >= 0")
    coords = [(q, r) for q in range(-rings, rings + 1) for r in range(-rings, rings + 1)
              if abs(q + r) <= rings]
    coords.sort(key=lambda c: (max(abs(c[0]), abs(c[1]), abs(c[0] + c[1])), c))
    pos = {c: i for i, c in enumerate(coords)}
    targets = tuple(tuple(pos.get((q + dq, r + dr), -1) for dq, dr in DIRECTIONS)
                    for q, r in coords)
    return HexTopology(tuple(coords), targets, rings)


def reinjection_weights(topology: HexTopology, from_cell: int | None = None,
                        allow_self: bool = True) -> np.ndarray:
    """Probability of re-entering at each cell after leaving the region.

    Proportional to each cell's missing neighbour count.  With
    ``allow_self=False`` the source cell is excluded unless it is the only
    candidate.
    """
    w = topology.boundary_deficit.astype(float)
    if not allow_self and from_cell is not None:
        w[from_cell] = 0.0
        if w.sum() == 0:
            w[from_cell] = 1.0
    return w / w.sum()


def handle_boundary_handoff(topology: HexTopology, from_cell: int, rng,
                            allow_self: bool = True) -> int:
    """Destination of a call that walked off the edge of the region."""
    w = reinjection_weights(topology, from_cell, allow_self)
    return int(rng.choice(topology.num_cells, p=w))
