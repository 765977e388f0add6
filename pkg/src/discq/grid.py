"""Quantization grids, bracketing, interpolation, and bits accounting.

A grid assigns every coordinate a finite sorted set of representable values.
Two kinds are supported:

* ``block_scaling`` -- symmetric integer levels ``{-(2^(bits-1)-1), ..., 0,
  ..., 2^(bits-1)-1}`` times a per-group scale, groups being consecutive runs
  of ``groupsize`` coordinates (``groupsize=None`` means one scale for the
  whole tensor).
* ``explicit`` -- an arbitrary sorted point list per coordinate.

Rounding a weight is restricted to the two grid points bracketing it
(``w_down`` / ``w_up``); interpolation variables ``x`` in ``[0, 1]^n`` encode
positions inside that bracket.  Grids are always built from the original
weight vector, never from intermediate iterates.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .serialize import dump_record, floats_to_hex, hex_to_floats, load_record

Array = np.ndarray

PER_TENSOR = "per-tensor"
SCALE_BITS = 16  # block scales are accounted as 16-bit values


class GridConfigError(ValueError):
    """Invalid grid construction parameters."""


class GridAccountingError(ValueError):
    """Bit accounting requested for a grid kind that has none."""


@dataclass(frozen=True)
class QuantGrid:
    """A per-coordinate product grid. Use the builder functions below."""

    kind: str
    n: int
    bits: int | None = None
    groupsize: int | None = None  # None encodes per-tensor
    scales: Array | None = None  # one positive scale per group
    points: tuple[Array, ...] | None = None  # explicit kind only
    group_bounds: tuple[tuple[int, int], ...] | None = None  # explicit group spans

    def __post_init__(self):
        if self.kind == "block_scaling":
            if self.bits is None or self.bits < 2:
                raise GridConfigError(f"bits must be >= 2, got {self.bits}")
            if self.groupsize is not None and self.groupsize < 1:
                raise GridConfigError(f"groupsize must be >= 1, got {self.groupsize}")
            if self.group_bounds is not None:
                spans = list(self.group_bounds)
                if spans[0][0] != 0 or spans[-1][1] != self.n or any(
                        a >= b for a, b in spans) or any(
                        s0[1] != s1[0] for s0, s1 in zip(spans, spans[1:])):
                    raise GridConfigError("group bounds must partition [0, n)")
            if self.scales is None or not np.all(np.asarray(self.scales) > 0):
                raise GridConfigError("scales must be strictly positive")
            if len(self.scales) != self._num_groups():
                raise GridConfigError("one scale per group required")
        elif self.kind == "explicit":
            if self.points is None or len(self.points) != self.n:
                raise GridConfigError("explicit grid needs one point list per coordinate")
            for pts in self.points:
                if len(pts) == 0:
                    raise GridConfigError("empty point list")
                if np.any(np.diff(pts) <= 0):
                    raise GridConfigError("point lists must be strictly ascending")
        else:
            raise GridConfigError(f"unknown grid kind {self.kind!r}")

    def _num_groups(self) -> int:
        if self.group_bounds is not None:
            return len(self.group_bounds)
        if self.groupsize is None:
            return 1
        return -(-self.n // self.groupsize)  # ceil division; last group may be short

    def group_index(self) -> Array:
        """Group id of every coordinate (all zeros for per-tensor)."""
        if self.kind != "block_scaling":
            raise GridConfigError("group_index is defined for block_scaling grids")
        if self.group_bounds is not None:
            lengths = [hi - lo for lo, hi in self.group_bounds]
            return np.repeat(np.arange(len(lengths), dtype=np.int64), lengths)
        if self.groupsize is None:
            return np.zeros(self.n, dtype=np.int64)
        return np.arange(self.n, dtype=np.int64) // self.groupsize

    def coordinate_scales(self) -> Array:
        """Per-coordinate scale (block_scaling only)."""
        return np.asarray(self.scales)[self.group_index()]

    def level_bound(self) -> int:
        """Largest integer level, 2^(bits-1) - 1."""
        return (1 << (self.bits - 1)) - 1

    def points_for(self, j: int) -> Array:
        """Sorted representable values of coordinate j."""
        if self.kind == "explicit":
            return np.asarray(self.points[j], dtype=np.float64)
        lmax = self.level_bound()
        s = float(self.coordinate_scales()[j])
        return np.arange(-lmax, lmax + 1, dtype=np.float64) * s


@dataclass(frozen=True)
class Bracket:
    """Adjacent grid points surrounding a weight vector, plus the weights."""

    w_down: Array
    w_up: Array
    delta: Array  # w_up - w_down, entrywise >= 0
    w: Array  # the original weights the bracket was built from

    @property
    def n(self) -> int:
        return self.w_down.shape[0]

    def position(self) -> Array:
        """Interpolation coordinates y of the original weights: w^y == w.

        Coordinates with a collapsed bracket (delta == 0) are assigned 0.
        """
        y = np.zeros(self.n)
        live = self.delta > 0
        y[live] = (self.w[live] - self.w_down[live]) / self.delta[live]
        return np.clip(y, 0.0, 1.0)


@dataclass(frozen=True)
class InterpState:
    """Interpolation vector with a frozen-coordinate mask, bound to a bracket."""

    x: Array
    frozen: Array  # boolean mask
    bracket: Bracket

    def __post_init__(self):
        x = np.asarray(self.x)
        if np.any(x < 0) or np.any(x > 1):
            raise ValueError("x must lie in [0, 1]^n")
        fr = np.asarray(self.frozen, dtype=bool)
        if fr.shape != x.shape:
            raise ValueError("frozen mask shape mismatch")
        if not np.all(np.isin(x[fr], (0.0, 1.0))):
            raise ValueError("frozen coordinates must be exactly 0 or 1")


def build_block_scaling(w, bits: int, groupsize, blocks=None) -> QuantGrid:
    """Build a symmetric block-scaling grid from weights.

    Each group's scale is ``max |w_j| / (2^(bits-1) - 1)``; an all-zero group
    gets the sentinel scale 1 (every representable multiple of any scale
    collapses to the needed 0).  ``groupsize`` may be an integer, the string
    ``"per-tensor"``, or None.

    ``blocks`` optionally partitions the vector into spans (e.g. the layers
    of a model) that groups never straddle: per-tensor then means one scale
    per span, and integer group runs restart at every span boundary.
    """
    w = np.asarray(w, dtype=np.float64)
    if bits < 2:
        raise GridConfigError(f"bits must be >= 2, got {bits}")
    if groupsize == PER_TENSOR:
        groupsize = None
    if groupsize is not None:
        groupsize = int(groupsize)
        if groupsize < 1:
            raise GridConfigError(f"groupsize must be >= 1, got {groupsize}")
    n = w.shape[0]
    lmax = (1 << (bits - 1)) - 1
    spans = [(0, n)] if blocks is None else [(int(a), int(b)) for a, b in blocks]
    bounds = []
    for lo, hi in spans:
        if groupsize is None:
            bounds.append((lo, hi))
        else:
            bounds.extend((at, min(at + groupsize, hi)) for at in range(lo, hi, groupsize))
    scales = np.empty(len(bounds))
    for g, (lo, hi) in enumerate(bounds):
        peak = float(np.max(np.abs(w[lo:hi]))) if hi > lo else 0.0
        scales[g] = peak / lmax if peak > 0 else 1.0
    # the compact contiguous representation suffices without explicit blocks
    group_bounds = None if blocks is None else tuple(bounds)
    return QuantGrid(kind="block_scaling", n=n, bits=bits, groupsize=groupsize,
                     scales=scales, group_bounds=group_bounds)


def explicit_grid(points, n: int | None = None) -> QuantGrid:
    """Build an explicit grid.

    ``points`` is either a single sorted array shared by all ``n`` coordinates
    or a sequence of per-coordinate sorted arrays.
    """
    first = np.asarray(points[0]) if not np.isscalar(points[0]) else None
    if first is None:  # one shared list
        if n is None:
            raise GridConfigError("n required when sharing one point list")
        shared = np.asarray(points, dtype=np.float64)
        return QuantGrid(kind="explicit", n=n, points=tuple([shared] * n))
    lists = tuple(np.asarray(p, dtype=np.float64) for p in points)
    return QuantGrid(kind="explicit", n=len(lists), points=lists)


def _bracket_block(w: Array, grid: QuantGrid):
    s = grid.coordinate_scales()
    lmax = grid.level_bound()
    lo, hi = -lmax * s, lmax * s
    t = w / s
    k_dn = np.floor(t)
    k_up = np.ceil(t)
    down = k_dn * s
    up = k_up * s
    # float repair: w/s may round across an integer; shift by one level where needed
    bad = down > w
    down[bad] = (k_dn[bad] - 1) * s[bad]
    bad = up < w
    up[bad] = (k_up[bad] + 1) * s[bad]
    # exact grid hits collapse the bracket
    up = np.where(down == w, down, up)
    down = np.where(up == w, up, down)
    # out-of-range weights clamp to the nearest extreme point
    below = w <= lo
    above = w >= hi
    down = np.where(below, lo, np.where(above, hi, down))
    up = np.where(below, lo, np.where(above, hi, up))
    return down, up


def _bracket_explicit(w: Array, grid: QuantGrid):
    down = np.empty_like(w)
    up = np.empty_like(w)
    shared = all(p is grid.points[0] for p in grid.points)
    if shared:
        pts = grid.points[0]
        i = np.searchsorted(pts, w, side="left")
        exact = (i < len(pts)) & (pts[np.minimum(i, len(pts) - 1)] == w)
        below = i == 0
        above = i == len(pts)
        down = np.where(below, pts[0], pts[np.maximum(i - 1, 0)])
        up = np.where(above, pts[-1], pts[np.minimum(i, len(pts) - 1)])
        down = np.where(exact, up, down)
        return down, up
    for j in range(grid.n):
        pts = grid.points[j]
        i = int(np.searchsorted(pts, w[j], side="left"))
        if i < len(pts) and pts[i] == w[j]:
            down[j] = up[j] = pts[i]
        elif i == 0:
            down[j] = up[j] = pts[0]
        elif i == len(pts):
            down[j] = up[j] = pts[-1]
        else:
            down[j], up[j] = pts[i - 1], pts[i]
    return down, up


def bracket_of(w, grid: QuantGrid) -> Bracket:
    """Adjacent grid points below/above each weight.

    Exact grid points collapse to a zero-width bracket; out-of-range weights
    clamp both endpoints to the nearest extreme grid point.
    """
    w = np.asarray(w, dtype=np.float64)
    if w.shape[0] != grid.n:
        raise ValueError(f"weights have length {w.shape[0]}, grid expects {grid.n}")
    if grid.kind == "block_scaling":
        down, up = _bracket_block(w.copy(), grid)
    else:
        down, up = _bracket_explicit(w, grid)
    return Bracket(w_down=down, w_up=up, delta=up - down, w=w)


def interp_weights(state: InterpState) -> Array:
    """w^x = w_down * (1 - x) + w_up * x, coordinatewise."""
    br = state.bracket
    x = np.asarray(state.x)
    return br.w_down * (1.0 - x) + br.w_up * x


def nearer_up(w: Array, down: Array, up: Array) -> Array:
    """True where ``up`` is the nearest of the two; ties pick the smaller magnitude.

    A tie is declared within a few ulps of the exact midpoint so that
    decimal-midpoint inputs (0.45 between 0.3 and 0.6) behave as intended
    despite binary rounding.
    """
    d_down = w - down
    d_up = up - w
    band = 32.0 * np.finfo(np.float64).eps * np.maximum.reduce(
        [np.abs(w), np.abs(down), np.abs(up)])
    tie = np.abs(d_up - d_down) <= band
    magnitude_favors_up = np.abs(up) < np.abs(down)
    return (~tie & (d_up < d_down)) | (tie & magnitude_favors_up)


def rtn(w, grid: QuantGrid) -> Array:
    """Round to nearest grid point; ties go to the smaller-magnitude point.

    The output always lies on the bracket of ``w`` (the nearest point is one
    of the two adjacent ones).
    """
    br = bracket_of(w, grid)
    take_up = nearer_up(br.w, br.w_down, br.w_up)
    return np.where(take_up, br.w_up, br.w_down)


def bits_per_param(grid: QuantGrid) -> float:
    """Effective storage cost: bits plus the amortized 16-bit group scale."""
    if grid.kind != "block_scaling":
        raise GridAccountingError("bit accounting is defined for block_scaling grids only")
    if grid.groupsize is None:
        return float(grid.bits)
    return grid.bits + SCALE_BITS / grid.groupsize


def grid_to_record(grid: QuantGrid) -> dict:
    """Structured-text form; scales/points as hex floats for exact round-trip."""
    if grid.kind == "block_scaling":
        record = {
            "kind": grid.kind,
            "bits": grid.bits,
            "groupsize": PER_TENSOR if grid.groupsize is None else grid.groupsize,
            "scales": floats_to_hex(grid.scales),
            "n": grid.n,
        }
        if grid.group_bounds is not None:
            record["group_bounds"] = [list(b) for b in grid.group_bounds]
        return record
    return {
        "kind": grid.kind,
        "points": [floats_to_hex(p) for p in grid.points],
        "n": grid.n,
    }


def grid_from_record(rec: dict) -> QuantGrid:
    if rec["kind"] == "block_scaling":
        gs = rec["groupsize"]
        bounds = rec.get("group_bounds")
        return QuantGrid(
            kind="block_scaling",
            n=rec["n"],
            bits=rec["bits"],
            groupsize=None if gs == PER_TENSOR else int(gs),
            scales=hex_to_floats(rec["scales"]),
            group_bounds=None if bounds is None else tuple(tuple(b) for b in bounds),
        )
    return QuantGrid(
        kind="explicit",
        n=rec["n"],
        points=tuple(hex_to_floats(p) for p in rec["points"]),
    )


def save_grid(grid: QuantGrid, path) -> None:
    dump_record(grid_to_record(grid), path)


def load_grid(path) -> QuantGrid:
    return grid_from_record(load_record(path))
