"""Radial distribution network model.

A network is a rooted tree of buses. Bus 0 is the substation (root); every
other bus n has a unique ancestor, and the line (n, ancestor(n)) carries the
impedance and capacity data stored on bus n. Orientation convention: flow
variables of line n are positive when power moves from bus n toward its
ancestor.

All quantities are per-unit. Voltages are stored squared, so Vmin/Vmax bound
|V|^2. The root has no line (R = X = S = 0) and a fixed voltage
(Vmin == Vmax == V0).
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, asdict


class NetworkError(ValueError):
    """Raised when network data violates the radial-feeder contract."""


@dataclass(frozen=True)
class Bus:
    """One bus and the line connecting it to its ancestor.

    Attributes:
        id: bus index, 0-based and contiguous.
        ancestor: index of the upstream bus, or None for the root.
        R: resistance of the line to the ancestor (p.u.).
        X: reactance of the line (p.u.).
        G: shunt conductance at the bus (p.u.).
        B: shunt susceptance at the bus (p.u.).
        S: apparent-power capacity of the line (p.u.).
        Vmin: lower bound on squared voltage magnitude (p.u.).
        Vmax: upper bound on squared voltage magnitude (p.u.).
    """

    id: int
    ancestor: int | None
    R: float = 0.0
    X: float = 0.0
    G: float = 0.0
    B: float = 0.0
    S: float = 0.0
    Vmin: float = 0.81
    Vmax: float = 1.21


@dataclass(frozen=True)
class TimeHorizon:
    """Discrete planning horizon with periods 0 .. T-1."""

    T: int

    def __post_init__(self):
        if self.T < 1:
            raise NetworkError("horizon needs at least one period")

    @property
    def periods(self) -> range:
        return range(self.T)


@dataclass
class Network:
    """Rooted radial network. Bus ids are 0..N and index the `buses` list."""

    buses: list[Bus]
    _children: dict[int, tuple[int, ...]] = field(init=False, repr=False)

    def __post_init__(self):
        self.validate_radial()
        kids: dict[int, list[int]] = {b.id: [] for b in self.buses}
        for b in self.buses:
            if b.ancestor is not None:
                kids[b.ancestor].append(b.id)
        self._children = {n: tuple(sorted(c)) for n, c in kids.items()}

    # -- structure ---------------------------------------------------------

    @property
    def root_id(self) -> int:
        return 0

    def validate_radial(self) -> None:
        """Check tree shape and root conventions; raise NetworkError if bad."""
        if not self.buses:
            raise NetworkError("empty bus list")
        ids = [b.id for b in self.buses]
        if ids != list(range(len(self.buses))):
            raise NetworkError(f"bus ids must be contiguous 0..{len(self.buses) - 1}, got {ids}")
        root = self.buses[0]
        if root.ancestor is not None:
            raise NetworkError("bus 0 must be the root (ancestor None)")
        if root.R != 0.0 or root.X != 0.0 or root.S != 0.0:
            raise NetworkError("root bus carries no line: R, X, S must be 0")
        if root.Vmin != root.Vmax:
            raise NetworkError("root voltage must be fixed (Vmin == Vmax)")
        for b in self.buses:
            if not 0 < b.Vmin <= b.Vmax:
                raise NetworkError(f"bus {b.id}: need 0 < Vmin <= Vmax")
            if b.R < 0 or b.X < 0 or b.S < 0:
                raise NetworkError(f"bus {b.id}: negative line parameter")
        for b in self.buses[1:]:
            if b.ancestor is None:
                raise NetworkError(f"bus {b.id}: only bus 0 may be the root")
            if not 0 <= b.ancestor < len(self.buses):
                raise NetworkError(f"bus {b.id}: dangling ancestor {b.ancestor}")
            if b.ancestor == b.id:
                raise NetworkError(f"bus {b.id} is its own ancestor")
        # every bus must reach the root without cycles
        for b in self.buses[1:]:
            seen = {b.id}
            cur = b.ancestor
            while cur is not None:
                if cur in seen:
                    raise NetworkError(f"ancestor cycle through bus {b.id}")
                seen.add(cur)
                cur = self.buses[cur].ancestor
            if 0 not in seen:
                raise NetworkError(f"bus {b.id} does not reach the root")

    @property
    def num_buses(self) -> int:
        return len(self.buses)

    @property
    def non_root_ids(self) -> list[int]:
        return list(range(1, len(self.buses)))

    def ancestor(self, n: int) -> int | None:
        return self.buses[n].ancestor

    def children(self, n: int) -> tuple[int, ...]:
        """Buses whose ancestor is n, ascending."""
        return self._children[n]

    def path_to_root(self, n: int) -> list[int]:
        """Bus ids from n down to 0, inclusive on both ends."""
        path = [n]
        cur = self.buses[n].ancestor
        while cur is not None:
            path.append(cur)
            cur = self.buses[cur].ancestor
        return path

    def subtree(self, n: int) -> list[int]:
        """Bus ids in the subtree rooted at n (n first, then DFS order)."""
        out = [n]
        stack = list(self._children[n])
        while stack:
            m = stack.pop()
            out.append(m)
            stack.extend(self._children[m])
        return out

    def leaves(self) -> list[int]:
        return [b.id for b in self.buses if not self._children[b.id]]

    # -- serialization -----------------------------------------------------

    def to_dict(self) -> dict:
        return {"buses": [asdict(b) for b in self.buses]}

    @classmethod
    def from_dict(cls, data: dict) -> "Network":
        try:
            buses = [Bus(**raw) for raw in data["buses"]]
        except (KeyError, TypeError) as exc:
            raise NetworkError(f"malformed network data: {exc}") from exc
        return cls(buses)


def validate_radial(net: Network) -> None:
    """Module-level alias of Network.validate_radial."""
    net.validate_radial()


def save_network(net: Network, path: str) -> None:
    with open(path, "w") as fh:
        json.dump(net.to_dict(), fh, indent=2)
        fh.write("\n")


def load_network(path: str) -> Network:
    """Read a network file, validating structure. Raises NetworkError."""
    with open(path) as fh:
        try:
            data = json.load(fh)
        except json.JSONDecodeError as exc:
            raise NetworkError(f"unparseable network file {path}: {exc}") from exc
    return Network.from_dict(data)
