"""
Virtual gridding of taxi demand.

Continuous latitude/longitude/time is discretized into evenly spaced grid
cells and fixed-duration time slots. Demand events are tallied per
(cell, slot) and the tallies are mapped onto the four demand levels
non / low / med / high.

The projection is a local equirectangular approximation anchored at the
south-west corner of the grid:

    dx_km = (lon - origin_lon) * 111.320 * cos(origin_lat)
    dy_km = (lat - origin_lat) * 110.574

Cells and slots are half-open: a point exactly on a boundary belongs to
the next cell / slot.
"""

import math
from dataclasses import dataclass, field
from enum import IntEnum
from typing import Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np

import src.config as config
from src.app.errors import InvalidConfig, InvalidCoordinate, NegativeTime, OutOfBounds

SECONDS_PER_DAY = 86400
# 1970-01-01 was a Thursday; day_of_week uses Monday = 0
EPOCH_WEEKDAY = 3
# values this close to an integer number of cells snap onto the boundary
BOUNDARY_SNAP = 1e-9


class DemandLevel(IntEnum):
    NON = 0
    LOW = 1
    MED = 2
    HIGH = 3

    @property
    def label(self) -> str:
        return config.LEVEL_NAMES[int(self)]


@dataclass(frozen=True)
class GridSpec:
    origin_lat: float = config.GRID_ORIGIN_LAT
    origin_lon: float = config.GRID_ORIGIN_LON
    cell_size_km: float = config.GRID_CELL_SIZE_KM
    n_rows: int = config.GRID_N_ROWS
    n_cols: int = config.GRID_N_COLS
    slot_duration_s: float = config.SLOT_DURATION_SECONDS
    epoch_start: float = config.EPOCH_START
    utc_offset_hours: float = config.UTC_OFFSET_HOURS

    def __post_init__(self) -> None:
        if not (math.isfinite(self.origin_lat) and -90.0 < self.origin_lat < 90.0):
            raise InvalidConfig("grid.origin_lat", f"must be a finite latitude, got {self.origin_lat}")
        if not math.isfinite(self.origin_lon):
            raise InvalidConfig("grid.origin_lon", f"must be finite, got {self.origin_lon}")
        if not self.cell_size_km > 0:
            raise InvalidConfig("grid.cell_size_km", f"must be > 0, got {self.cell_size_km}")
        if int(self.n_rows) != self.n_rows or self.n_rows < 1:
            raise InvalidConfig("grid.n_rows", f"must be an integer >= 1, got {self.n_rows}")
        if int(self.n_cols) != self.n_cols or self.n_cols < 1:
            raise InvalidConfig("grid.n_cols", f"must be an integer >= 1, got {self.n_cols}")
        if not self.slot_duration_s > 0:
            raise InvalidConfig("grid.slot_duration_s", f"must be > 0, got {self.slot_duration_s}")

    @property
    def km_per_deg_lon(self) -> float:
        return config.KM_PER_DEG_LON_EQUATOR * math.cos(math.radians(self.origin_lat))

    @property
    def n_cells(self) -> int:
        return self.n_rows * self.n_cols

    def cells(self) -> List["CellId"]:
        """Every cell of the grid, row-major."""
        return [CellId(r, c) for r in range(self.n_rows) for c in range(self.n_cols)]

    def contains(self, cell: "CellId") -> bool:
        return 0 <= cell.row < self.n_rows and 0 <= cell.col < self.n_cols


@dataclass(frozen=True, order=True)
class CellId:
    row: int
    col: int


@dataclass(frozen=True, order=True)
class SlotId:
    """Time slot; identity is the index, hour/day are derived from the slot start."""

    index: int
    hour_of_day: int = field(default=0, compare=False)
    day_of_week: int = field(default=0, compare=False)


@dataclass(frozen=True)
class LevelThresholds:
    boundaries: Tuple[int, int, int] = config.LEVEL_THRESHOLDS

    def __post_init__(self) -> None:
        b = tuple(self.boundaries)
        if len(b) != config.N_CLASSES - 1:
            raise InvalidConfig(
                "thresholds", f"need exactly {config.N_CLASSES - 1} boundaries, got {len(b)}"
            )
        if any(int(x) != x for x in b):
            raise InvalidConfig("thresholds", f"boundaries must be integers, got {list(b)}")
        if b[0] < 0 or not all(lo < hi for lo, hi in zip(b, b[1:])):
            raise InvalidConfig("thresholds", f"need 0 <= b1 < b2 < b3, got {list(b)}")
        object.__setattr__(self, "boundaries", tuple(int(x) for x in b))


@dataclass
class DemandGrid:
    spec: GridSpec
    counts: Dict[Tuple[CellId, SlotId], int] = field(default_factory=dict)
    skipped: int = 0

    def count(self, cell: CellId, slot: SlotId) -> int:
        return self.counts.get((cell, slot), 0)

    def total(self) -> int:
        return sum(self.counts.values())

    def slot_range(self) -> Optional[Tuple[int, int]]:
        """Inclusive (first, last) slot index with any demand, None when empty."""
        if not self.counts:
            return None
        indices = [slot.index for _, slot in self.counts]
        return min(indices), max(indices)


def cell_of(lat: float, lon: float, spec: GridSpec) -> CellId:
    """Map a coordinate to its grid cell.

    Raises:
        InvalidCoordinate: lat or lon is NaN or infinite
        OutOfBounds: the cell falls outside the grid
    """
    if not (math.isfinite(lat) and math.isfinite(lon)):
        raise InvalidCoordinate(f"non-finite coordinate ({lat}, {lon})")

    dx_km = (lon - spec.origin_lon) * spec.km_per_deg_lon
    dy_km = (lat - spec.origin_lat) * config.KM_PER_DEG_LAT
    col = _snapped_floor(dx_km / spec.cell_size_km)
    row = _snapped_floor(dy_km / spec.cell_size_km)

    if not (0 <= row < spec.n_rows and 0 <= col < spec.n_cols):
        raise OutOfBounds(f"({lat}, {lon}) maps to row {row}, col {col} outside {spec.n_rows}x{spec.n_cols}")
    return CellId(row, col)


def cell_center(cell: CellId, spec: GridSpec) -> Tuple[float, float]:
    """(lat, lon) of the center of `cell`; inverse of the cell_of projection."""
    lat = spec.origin_lat + (cell.row + 0.5) * spec.cell_size_km / config.KM_PER_DEG_LAT
    lon = spec.origin_lon + (cell.col + 0.5) * spec.cell_size_km / spec.km_per_deg_lon
    return lat, lon


def cell_bounds(cell: CellId, spec: GridSpec) -> Tuple[float, float, float, float]:
    """(lat_lo, lat_hi, lon_lo, lon_hi) of the half-open cell."""
    lat_lo = spec.origin_lat + cell.row * spec.cell_size_km / config.KM_PER_DEG_LAT
    lat_hi = spec.origin_lat + (cell.row + 1) * spec.cell_size_km / config.KM_PER_DEG_LAT
    lon_lo = spec.origin_lon + cell.col * spec.cell_size_km / spec.km_per_deg_lon
    lon_hi = spec.origin_lon + (cell.col + 1) * spec.cell_size_km / spec.km_per_deg_lon
    return lat_lo, lat_hi, lon_lo, lon_hi


def slot_of(t: float, spec: GridSpec) -> SlotId:
    """Map a timestamp (epoch seconds) to its time slot.

    The slot's hour_of_day and day_of_week are those of the slot start, not
    of t. They equal t's own local hour and weekday whenever slot boundaries
    fall on local hour boundaries, as with the default hourly slots.

    Raises:
        NegativeTime: t is earlier than spec.epoch_start
    """
    if not math.isfinite(t):
        raise NegativeTime(f"non-finite timestamp {t}")
    if t < spec.epoch_start:
        raise NegativeTime(f"timestamp {t} precedes epoch_start {spec.epoch_start}")
    index = int(math.floor((t - spec.epoch_start) / spec.slot_duration_s))
    return slot_from_index(index, spec)


def slot_from_index(index: int, spec: GridSpec) -> SlotId:
    """Build SlotId `index`; hour and weekday are local values at the slot start."""
    start = spec.epoch_start + index * spec.slot_duration_s
    hour, dow = local_hour_and_weekday(start, spec.utc_offset_hours)
    return SlotId(index, hour, dow)


def local_hour_and_weekday(t: float, utc_offset_hours: float) -> Tuple[int, int]:
    """Hour of day [0, 24) and day of week [0, 7), Monday = 0, at a fixed UTC offset."""
    local = t + utc_offset_hours * 3600.0
    day = math.floor(local / SECONDS_PER_DAY)
    hour = int(math.floor((local - day * SECONDS_PER_DAY) / 3600.0)) % 24
    return hour, int((day + EPOCH_WEEKDAY) % 7)


def is_demand_event(kind: str, demand_events: str) -> bool:
    if demand_events == "pickups":
        return kind == "pickup"
    if demand_events == "both":
        return kind in ("pickup", "dropoff")
    raise InvalidConfig("prepare.demand_events", f"expected 'pickups' or 'both', got {demand_events!r}")


def aggregate(events: Iterable, spec: GridSpec, demand_events: str = config.DEMAND_EVENTS) -> DemandGrid:
    """Tally qualifying located events per (cell, slot).

    Each event needs `lat`, `lon`, `t` and `kind` attributes. Events outside
    the grid (or before the epoch) are counted in `DemandGrid.skipped`.
    """
    grid = DemandGrid(spec)
    for event in events:
        if not is_demand_event(event.kind, demand_events):
            continue
        try:
            key = (cell_of(event.lat, event.lon, spec), slot_of(event.t, spec))
        except (OutOfBounds, NegativeTime, InvalidCoordinate):
            grid.skipped += 1
            continue
        grid.counts[key] = grid.counts.get(key, 0) + 1
    return grid


def level_of(count: int, th: LevelThresholds) -> DemandLevel:
    b1, b2, b3 = th.boundaries
    if count <= b1:
        return DemandLevel.NON
    if count <= b2:
        return DemandLevel.LOW
    if count <= b3:
        return DemandLevel.MED
    return DemandLevel.HIGH


def quantile_thresholds(counts: Sequence[int]) -> LevelThresholds:
    """Tertile boundaries of the nonzero counts, forced strictly increasing.

    Zero demand is always "non" (b1 = 0); low/med/high split the nonzero
    counts into thirds.
    """
    nonzero = np.asarray([c for c in counts if c > 0], dtype=float)
    if nonzero.size == 0:
        return LevelThresholds((0, 1, 2))
    q1, q2 = np.quantile(nonzero, [1.0 / 3.0, 2.0 / 3.0])
    b2 = max(int(math.floor(q1)), 1)
    b3 = max(int(math.floor(q2)), b2 + 1)
    return LevelThresholds((0, b2, b3))


def _snapped_floor(value: float) -> int:
    nearest = round(value)
    if abs(value - nearest) < BOUNDARY_SNAP:
        return int(nearest)
    return int(math.floor(value))
