"""
Trip-data ingestion: GPS traces + pickup/drop-off logs -> labeled samples.

Pipeline:
    parse_trajectories / parse_events   CSV -> records
    merge                               join by vehicle id and time, locate each event
    build_samples                       aggregate per (cell, slot) and label
    build_facility_datasets             the same, one dataset per facility

An event is located from the vehicle's fixes within LOCATE_WINDOW_SECONDS
(45 s) of the event time. Events without such a fix are omitted, as are
events of vehicles that have no trace at all.
"""

import bisect
import math
import os
import re
from dataclasses import dataclass, field, replace
from datetime import datetime, timezone
from typing import Dict, Iterable, List, Optional, Sequence, Set, TextIO, Tuple, Union

import numpy as np
import pandas as pd

import src.config as config
from src.app.errors import InvalidConfig, MalformedRow
from src.app.grid import (
    CellId,
    DemandGrid,
    DemandLevel,
    GridSpec,
    LevelThresholds,
    SlotId,
    aggregate,
    level_of,
    slot_from_index,
)
from src.app.nn import encode_features
from src.helper.atomic_io import write_csv_atomic
from src.helper.clock import log

TRAJECTORY_COLUMNS = ("vehicle_id", "timestamp", "lat", "lon")
EVENT_COLUMNS = ("vehicle_id", "timestamp", "kind", "facility_id")
SAMPLE_COLUMNS = ("facility_id", "row", "col", "slot", "count", "level")
_PARSER_LINE = re.compile(r"line (\d+)")
EVENT_KINDS = ("pickup", "dropoff")

EXACT = "exact"
INTERPOLATED = "interpolated"
NEAREST = "nearest"

Source = Union[str, "os.PathLike[str]", TextIO]


@dataclass(frozen=True)
class GpsFix:
    vehicle_id: str
    t: float
    lat: float
    lon: float


@dataclass(frozen=True)
class DemandEvent:
    vehicle_id: str
    t: float
    kind: str
    facility_id: str


@dataclass(frozen=True)
class LocatedEvent:
    event: DemandEvent
    lat: float
    lon: float
    resolution: str

    @property
    def t(self) -> float:
        return self.event.t

    @property
    def kind(self) -> str:
        return self.event.kind

    @property
    def facility_id(self) -> str:
        return self.event.facility_id


@dataclass(frozen=True, eq=False)
class LabeledSample:
    """One (cell, slot) training row.

    Equality is identity: two facilities may hold samples for the same
    (cell, slot) and they must stay distinguishable.
    """

    cell: CellId
    slot: SlotId
    features: np.ndarray
    label: DemandLevel
    count: int


@dataclass
class FacilityDataset:
    facility_id: str
    samples: List[LabeledSample]
    cells: Set[CellId] = field(default_factory=set)


@dataclass
class MergeResult:
    located: List[LocatedEvent]
    omitted_count: int

    @property
    def total(self) -> int:
        return len(self.located) + self.omitted_count


def parse_timestamp(text: str) -> float:
    """Epoch seconds from integer/decimal epoch seconds or an RFC 3339 string.

    Naive RFC 3339 strings (no offset) are read as UTC.
    """
    text = text.strip()
    try:
        value = float(text)
    except ValueError:
        stamp = datetime.fromisoformat(text.replace("Z", "+00:00").replace("z", "+00:00"))
        if stamp.tzinfo is None:
            stamp = stamp.replace(tzinfo=timezone.utc)
        return stamp.timestamp()
    if not math.isfinite(value):
        raise ValueError(f"non-finite timestamp {text!r}")
    return value


def parse_trajectories(stream: Source) -> List[GpsFix]:
    """Parse a `vehicle_id,timestamp,lat,lon` CSV.

    Returns fixes grouped by vehicle (ascending id) and sorted by time within
    each vehicle. A repeated (vehicle, timestamp) keeps its first occurrence.

    Raises:
        MalformedRow: a row does not parse; carries the 1-based line number
    """
    frame = _read_csv(stream, TRAJECTORY_COLUMNS)
    source = _source_name(stream)

    vehicles: List[str] = []
    times: List[float] = []
    lats: List[float] = []
    lons: List[float] = []
    for line_no, vehicle_id, stamp, lat, lon in frame.itertuples(name=None):
        if not vehicle_id.strip():
            raise MalformedRow(line_no, "empty vehicle_id", source)
        try:
            t = parse_timestamp(stamp)
        except ValueError:
            raise MalformedRow(line_no, f"bad timestamp {stamp!r}", source)
        lat_value = _parse_coordinate(lat, "lat", line_no, source)
        lon_value = _parse_coordinate(lon, "lon", line_no, source)
        vehicles.append(vehicle_id.strip())
        times.append(t)
        lats.append(lat_value)
        lons.append(lon_value)

    if not vehicles:
        return []

    table = pd.DataFrame({"vehicle_id": vehicles, "t": times, "lat": lats, "lon": lons})
    table = table.drop_duplicates(subset=["vehicle_id", "t"], keep="first")
    table = table.sort_values(["vehicle_id", "t"], kind="mergesort")
    fixes = [GpsFix(v, float(t), float(a), float(o)) for v, t, a, o in table.itertuples(index=False, name=None)]
    log(f"Ingest: parsed {len(fixes)} GPS fixes for {table['vehicle_id'].nunique()} vehicles from {source}")
    return fixes


def parse_events(stream: Source) -> List[DemandEvent]:
    """Parse a `vehicle_id,timestamp,kind,facility_id` CSV, keeping file order."""
    frame = _read_csv(stream, EVENT_COLUMNS)
    source = _source_name(stream)

    events: List[DemandEvent] = []
    for line_no, vehicle_id, stamp, kind, facility_id in frame.itertuples(name=None):
        if not vehicle_id.strip():
            raise MalformedRow(line_no, "empty vehicle_id", source)
        if kind.strip() not in EVENT_KINDS:
            raise MalformedRow(line_no, f"kind must be pickup or dropoff, got {kind!r}", source)
        if not facility_id.strip():
            raise MalformedRow(line_no, "empty facility_id", source)
        try:
            t = parse_timestamp(stamp)
        except ValueError:
            raise MalformedRow(line_no, f"bad timestamp {stamp!r}", source)
        events.append(DemandEvent(vehicle_id.strip(), t, kind.strip(), facility_id.strip()))
    log(f"Ingest: parsed {len(events)} demand events from {source}")
    return events


def locate_event(
    fixes: Sequence[GpsFix], ev: DemandEvent, window_s: float = config.LOCATE_WINDOW_SECONDS
) -> Optional[LocatedEvent]:
    """Resolve where `ev` happened from its vehicle's time-sorted fixes.

    Priority: a fix at exactly ev.t (exact), fixes on both sides within the
    window (linear interpolation), the single nearest fix within the window
    (nearest). Returns None when no fix lies within the window.
    """
    times = [fix.t for fix in fixes]
    return _locate(times, fixes, ev, window_s)


def merge(
    fixes: Iterable[GpsFix], events: Sequence[DemandEvent], window_s: float = config.LOCATE_WINDOW_SECONDS
) -> MergeResult:
    """Join events to traces by vehicle id and time; input event order is kept."""
    by_vehicle: Dict[str, List[GpsFix]] = {}
    for fix in fixes:
        by_vehicle.setdefault(fix.vehicle_id, []).append(fix)
    traces: Dict[str, Tuple[List[float], List[GpsFix]]] = {}
    for vehicle_id, vehicle_fixes in by_vehicle.items():
        vehicle_fixes.sort(key=lambda fix: fix.t)
        traces[vehicle_id] = ([fix.t for fix in vehicle_fixes], vehicle_fixes)

    located: List[LocatedEvent] = []
    omitted = 0
    unknown = 0
    for ev in events:
        trace = traces.get(ev.vehicle_id)
        if trace is None:
            unknown += 1
            omitted += 1
            continue
        result = _locate(trace[0], trace[1], ev, window_s)
        if result is None:
            omitted += 1
        else:
            located.append(result)

    log(f"Ingest: merged {len(events)} events -> {len(located)} located, {omitted} omitted ({unknown} unknown vehicle)")
    return MergeResult(located, omitted)


def build_samples(
    located: Iterable[LocatedEvent],
    spec: GridSpec,
    th: LevelThresholds,
    enumeration: str = config.SAMPLE_ENUMERATION,
    demand_events: str = config.DEMAND_EVENTS,
    cells: Optional[Iterable[CellId]] = None,
    slot_range: Optional[Tuple[int, int]] = None,
) -> Tuple[List[LabeledSample], DemandGrid]:
    """Aggregate located events and emit labeled samples.

    dense: one sample for every cell (of `cells`, default the whole grid) and
    every slot in `slot_range` (default: the observed range), zero demand
    included. sparse: one sample per (cell, slot) with demand.

    Samples come out ordered by (slot, row, col).
    """
    if enumeration not in ("dense", "sparse"):
        raise InvalidConfig("prepare.enumeration", f"expected 'dense' or 'sparse', got {enumeration!r}")

    grid = aggregate(located, spec, demand_events)
    if grid.skipped:
        log(f"Ingest: skipped {grid.skipped} events outside the grid")

    if enumeration == "sparse":
        keys = sorted(grid.counts, key=lambda key: (key[1].index, key[0].row, key[0].col))
        if cells is not None:
            allowed = set(cells)
            keys = [key for key in keys if key[0] in allowed]
        return [_make_sample(cell, slot, grid.counts[(cell, slot)], spec, th) for cell, slot in keys], grid

    if slot_range is None:
        slot_range = grid.slot_range()
    if slot_range is None:
        return [], grid
    cell_list = sorted(set(cells)) if cells is not None else spec.cells()

    samples: List[LabeledSample] = []
    for index in range(slot_range[0], slot_range[1] + 1):
        slot = slot_from_index(index, spec)
        for cell in cell_list:
            samples.append(_make_sample(cell, slot, grid.count(cell, slot), spec, th))
    return samples, grid


def build_facility_datasets(
    located: Sequence[LocatedEvent],
    spec: GridSpec,
    th: LevelThresholds,
    enumeration: str = config.SAMPLE_ENUMERATION,
    demand_events: str = config.DEMAND_EVENTS,
) -> List[FacilityDataset]:
    """One dataset per facility id, in ascending id order.

    A facility's cells are the cells holding at least one of its demand
    events; all facilities share the slot range observed over the corpus.
    """
    overall = aggregate(located, spec, demand_events)
    slot_range = overall.slot_range()

    by_facility: Dict[str, List[LocatedEvent]] = {}
    for item in located:
        by_facility.setdefault(item.facility_id, []).append(item)

    datasets: List[FacilityDataset] = []
    for facility_id in sorted(by_facility):
        facility_grid = aggregate(by_facility[facility_id], spec, demand_events)
        covered = {cell for cell, _ in facility_grid.counts}
        if not covered or slot_range is None:
            datasets.append(FacilityDataset(facility_id, [], set()))
            continue
        samples, _ = build_samples(
            by_facility[facility_id], spec, th, enumeration, demand_events, cells=covered, slot_range=slot_range
        )
        datasets.append(FacilityDataset(facility_id, samples, covered))
        log(f"Ingest: facility {facility_id}: {len(covered)} cells, {len(samples)} samples")
    return datasets


def relabel(dataset: FacilityDataset, th: LevelThresholds) -> FacilityDataset:
    """The same samples with labels recomputed from their counts under `th`."""
    samples = [replace(s, label=level_of(s.count, th)) for s in dataset.samples]
    return FacilityDataset(dataset.facility_id, samples, set(dataset.cells))


def label_histogram(samples: Iterable[LabeledSample]) -> Dict[str, int]:
    counts = {name: 0 for name in config.LEVEL_NAMES}
    for sample in samples:
        counts[sample.label.label] += 1
    return counts


def write_samples(dataset: FacilityDataset, path: str) -> None:
    rows = [
        (dataset.facility_id, s.cell.row, s.cell.col, s.slot.index, s.count, s.label.label)
        for s in dataset.samples
    ]
    write_csv_atomic(path, SAMPLE_COLUMNS, rows)


def read_samples(path: str, spec: GridSpec) -> FacilityDataset:
    """Load a samples.csv written by write_samples; features are re-encoded."""
    frame = _read_csv(path, SAMPLE_COLUMNS)
    names = {name: level for level, name in enumerate(config.LEVEL_NAMES)}
    facility_ids = set()
    samples: List[LabeledSample] = []
    for line_no, facility_id, row, col, slot, count, level in frame.itertuples(name=None):
        if level not in names:
            raise MalformedRow(line_no, f"unknown level {level!r}", str(path))
        try:
            cell = CellId(int(row), int(col))
            slot_id = slot_from_index(int(slot), spec)
            count_value = int(count)
        except ValueError:
            raise MalformedRow(line_no, "row/col/slot/count must be integers", str(path))
        if not spec.contains(cell):
            raise MalformedRow(line_no, f"cell {cell} outside the configured grid", str(path))
        facility_ids.add(facility_id)
        samples.append(
            LabeledSample(cell, slot_id, encode_features(cell, slot_id, spec), DemandLevel(names[level]), count_value)
        )
    if len(facility_ids) > 1:
        raise MalformedRow(2, f"mixed facility ids {sorted(facility_ids)}", str(path))
    facility_id = facility_ids.pop() if facility_ids else os.path.basename(os.path.dirname(os.path.abspath(path)))
    return FacilityDataset(facility_id, samples, {s.cell for s in samples})


def write_trajectories(fixes: Iterable[GpsFix], path: str) -> None:
    write_csv_atomic(path, TRAJECTORY_COLUMNS, ((f.vehicle_id, _format_time(f.t), repr(f.lat), repr(f.lon)) for f in fixes))


def write_events(events: Iterable[DemandEvent], path: str) -> None:
    write_csv_atomic(path, EVENT_COLUMNS, ((e.vehicle_id, _format_time(e.t), e.kind, e.facility_id) for e in events))


def _locate(times: List[float], fixes: Sequence[GpsFix], ev: DemandEvent, window_s: float) -> Optional[LocatedEvent]:
    if not fixes:
        return None

    right = bisect.bisect_left(times, ev.t)
    if right < len(times) and times[right] == ev.t:
        fix = fixes[right]
        return LocatedEvent(ev, fix.lat, fix.lon, EXACT)

    before = fixes[right - 1] if right > 0 else None
    after = fixes[right] if right < len(fixes) else None
    before_ok = before is not None and ev.t - before.t <= window_s
    after_ok = after is not None and after.t - ev.t <= window_s

    if before_ok and after_ok:
        u = (ev.t - before.t) / (after.t - before.t)
        lat = before.lat + (after.lat - before.lat) * u
        lon = before.lon + (after.lon - before.lon) * u
        return LocatedEvent(ev, lat, lon, INTERPOLATED)
    if before_ok:
        return LocatedEvent(ev, before.lat, before.lon, NEAREST)
    if after_ok:
        return LocatedEvent(ev, after.lat, after.lon, NEAREST)
    return None


def _make_sample(cell: CellId, slot: SlotId, count: int, spec: GridSpec, th: LevelThresholds) -> LabeledSample:
    return LabeledSample(cell, slot, encode_features(cell, slot, spec), level_of(count, th), count)


def _read_csv(stream: Source, columns: Sequence[str]) -> pd.DataFrame:
    """Read a CSV as strings, indexed by 1-based physical line number.

    The header is read as an ordinary row so that pandas never infers an
    index column from a first data row with an extra field. Blank lines are
    dropped after numbering.
    """
    source = _source_name(stream)
    try:
        frame = pd.read_csv(
            stream,
            header=None,
            dtype=str,
            keep_default_na=False,
            skipinitialspace=True,
            skip_blank_lines=False,
        )
    except pd.errors.EmptyDataError:
        raise MalformedRow(1, f"missing header, expected {','.join(columns)}", source)
    except pd.errors.ParserError as e:
        match = _PARSER_LINE.search(str(e))
        raise MalformedRow(int(match.group(1)) if match else 1, f"unparseable CSV: {e}", source)
    frame = frame.fillna("")
    header = [str(c).strip() for c in frame.iloc[0]]
    if header != list(columns):
        raise MalformedRow(1, f"header must be {','.join(columns)}, got {','.join(header)}", source)
    frame = frame.iloc[1:].copy()
    frame.columns = list(columns)
    frame.index = pd.RangeIndex(2, len(frame) + 2)
    blank = (frame.apply(lambda column: column.str.strip()) == "").all(axis=1)
    return frame[~blank]


def _parse_coordinate(text: str, name: str, line_no: int, source: str) -> float:
    try:
        value = float(text)
    except ValueError:
        raise MalformedRow(line_no, f"bad {name} {text!r}", source)
    if not math.isfinite(value):
        raise MalformedRow(line_no, f"non-finite {name} {text!r}", source)
    return value


def _format_time(t: float) -> str:
    return str(int(t)) if float(t).is_integer() else repr(float(t))


def _source_name(stream: Source) -> str:
    if isinstance(stream, (str, os.PathLike)):
        return str(stream)
    return getattr(stream, "name", "<stream>")
