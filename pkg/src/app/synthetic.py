"""
Synthetic multi-facility taxi corpus.

Real provider data is private, so experiments run on a generated stand-in
with a planted, learnable structure:

- facilities tile the grid in a near-square layout of rectangular blocks
  (16 facilities -> 4 x 4 blocks), so domains are distinct and adjacent;
- each facility plants hotspots in its block, hotspot i with peak rate
  hotspot_peaks[i] trips per hour;
- the hourly rate of a cell is

      (base_rate + sum_i peak_i * exp(-d_i^2 / (2 sigma^2)) * [r_i <= radius]) * hour_mult * weekday_mult

  where r_i is the Chebyshev distance in cells to hotspot i, and rush,
  night and evening hours scale the day profile. The defaults (one hotspot
  of 1.2 trips per hour, radius 0, no base rate) put each facility's demand
  on a single cell, about 15k trips over 16 facilities and 30 days;
- pickup counts are Poisson draws of that rate, each pickup starts a trip
  that ends with a drop-off in the same block 5 to 30 minutes later;
- every event gets GPS fixes on a 5 s cadence along straight-line motion
  through the event point, except that with probability gap_fraction the
  fixes around an event are lost.

Generation is a pure function of (config, grid, seed). Each facility draws
from its own generator derived from (seed, facility id).
"""

import math
from dataclasses import asdict, dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

import src.config as config
from src.app.errors import InvalidConfig
from src.app.grid import CellId, GridSpec, LevelThresholds, cell_bounds, local_hour_and_weekday
from src.app.ingest import DemandEvent, FacilityDataset, GpsFix, build_facility_datasets, merge
from src.helper.clock import log
from src.helper.seeding import make_rng

SPEED_RANGE_MPS = (3.0, 12.0)
TRIP_DURATION_RANGE_S = (300, 1800)


@dataclass(frozen=True)
class SyntheticConfig:
    n_facilities: int = config.N_FACILITIES
    days: int = config.SYNTHETIC_DAYS
    hotspot_peaks: Tuple[float, ...] = config.HOTSPOT_PEAKS
    hotspot_sigma_km: float = config.HOTSPOT_SIGMA_KM
    hotspot_radius_cells: int = config.HOTSPOT_RADIUS_CELLS
    base_rate: float = config.BASE_RATE
    vehicles_per_facility: int = config.VEHICLES_PER_FACILITY
    rush_hours: Tuple[int, ...] = config.RUSH_HOURS
    rush_multiplier: float = config.RUSH_MULTIPLIER
    night_hours: Tuple[int, ...] = config.NIGHT_HOURS
    night_multiplier: float = config.NIGHT_MULTIPLIER
    evening_multiplier: float = config.EVENING_MULTIPLIER
    weekend_multiplier: float = config.WEEKEND_MULTIPLIER
    gap_fraction: float = config.GAP_FRACTION
    fix_cadence_s: int = int(config.FIX_CADENCE_SECONDS)
    fixes_per_side: int = config.FIXES_PER_SIDE

    def __post_init__(self) -> None:
        for name in ("n_facilities", "days", "vehicles_per_facility", "fix_cadence_s", "fixes_per_side"):
            value = getattr(self, name)
            if int(value) != value or value < 1:
                raise InvalidConfig(f"synthetic.{name}", f"must be a positive integer, got {value}")
        if int(self.hotspot_radius_cells) != self.hotspot_radius_cells or self.hotspot_radius_cells < 0:
            raise InvalidConfig("synthetic.hotspot_radius_cells", f"must be an integer >= 0, got {self.hotspot_radius_cells}")
        if not self.hotspot_peaks or any(p < 0 for p in self.hotspot_peaks):
            raise InvalidConfig("synthetic.hotspot_peaks", "need at least one non-negative peak rate")
        if not self.hotspot_sigma_km > 0:
            raise InvalidConfig("synthetic.hotspot_sigma_km", f"must be > 0, got {self.hotspot_sigma_km}")
        for name in ("base_rate", "rush_multiplier", "night_multiplier", "evening_multiplier", "weekend_multiplier"):
            if getattr(self, name) < 0:
                raise InvalidConfig(f"synthetic.{name}", f"must be >= 0, got {getattr(self, name)}")
        if not 0.0 <= self.gap_fraction < 1.0:
            raise InvalidConfig("synthetic.gap_fraction", f"must be in [0, 1), got {self.gap_fraction}")
        for name in ("rush_hours", "night_hours"):
            if any(not 0 <= h < 24 for h in getattr(self, name)):
                raise InvalidConfig(f"synthetic.{name}", "hours must lie in [0, 24)")

    def to_dict(self) -> dict:
        return {key: list(value) if isinstance(value, tuple) else value for key, value in asdict(self).items()}


@dataclass
class SyntheticCorpus:
    fixes: List[GpsFix]
    events: List[DemandEvent]
    domains: Dict[str, List[CellId]] = field(default_factory=dict)
    hotspots: Dict[str, List[CellId]] = field(default_factory=dict)

    @property
    def trips(self) -> int:
        return sum(1 for event in self.events if event.kind == "pickup")


def facility_ids(n_facilities: int) -> List[str]:
    return [f"F{index:02d}" for index in range(n_facilities)]


def block_layout(n_facilities: int, spec: GridSpec) -> Dict[str, List[CellId]]:
    """Split the grid into n_facilities adjacent rectangular blocks.

    Block rows = the largest divisor of n_facilities not above its square
    root; cell ranges are split as evenly as possible.
    """
    block_rows = max(d for d in range(1, int(math.isqrt(n_facilities)) + 1) if n_facilities % d == 0)
    block_cols = n_facilities // block_rows
    if block_rows > spec.n_rows or block_cols > spec.n_cols:
        raise InvalidConfig(
            "synthetic.n_facilities",
            f"{n_facilities} facilities need a {block_rows}x{block_cols} block layout, grid is {spec.n_rows}x{spec.n_cols}",
        )
    row_parts = np.array_split(np.arange(spec.n_rows), block_rows)
    col_parts = np.array_split(np.arange(spec.n_cols), block_cols)

    ids = facility_ids(n_facilities)
    domains: Dict[str, List[CellId]] = {}
    for index, facility_id in enumerate(ids):
        rows = row_parts[index // block_cols]
        cols = col_parts[index % block_cols]
        domains[facility_id] = [CellId(int(r), int(c)) for r in rows for c in cols]
    return domains


def hour_multiplier(hour: int, cfg: SyntheticConfig) -> float:
    if hour in cfg.rush_hours:
        return cfg.rush_multiplier
    if hour in cfg.night_hours:
        return cfg.night_multiplier
    if hour >= 20:
        return cfg.evening_multiplier
    return 1.0


def planted_rates(
    cells: Sequence[CellId], hotspots: Sequence[CellId], cfg: SyntheticConfig, spec: GridSpec, n_slots: int
) -> np.ndarray:
    """Expected pickups per (slot, cell) as an (n_slots x n_cells) array."""
    spatial = np.full(len(cells), cfg.base_rate, dtype=np.float64)
    rows = np.array([c.row for c in cells], dtype=np.float64)
    cols = np.array([c.col for c in cells], dtype=np.float64)
    for hotspot, peak in zip(hotspots, cfg.hotspot_peaks):
        d2 = ((rows - hotspot.row) ** 2 + (cols - hotspot.col) ** 2) * spec.cell_size_km**2
        reach = np.maximum(np.abs(rows - hotspot.row), np.abs(cols - hotspot.col)) <= cfg.hotspot_radius_cells
        spatial += np.where(reach, peak * np.exp(-d2 / (2.0 * cfg.hotspot_sigma_km**2)), 0.0)

    temporal = np.empty(n_slots, dtype=np.float64)
    for index in range(n_slots):
        hour, dow = local_hour_and_weekday(spec.epoch_start + index * spec.slot_duration_s, spec.utc_offset_hours)
        weekday = cfg.weekend_multiplier if dow >= 5 else 1.0
        # rates are per hour; rescale for other slot lengths
        temporal[index] = hour_multiplier(hour, cfg) * weekday * spec.slot_duration_s / 3600.0
    return np.outer(temporal, spatial)


def generate_corpus(cfg: SyntheticConfig, seed: int, spec: Optional[GridSpec] = None) -> SyntheticCorpus:
    """Raw traces and event logs for every facility."""
    spec = spec or GridSpec()
    n_slots = int(cfg.days * 86400 // spec.slot_duration_s)
    if n_slots < 1:
        raise InvalidConfig("synthetic.days", "corpus must span at least one time slot")

    domains = block_layout(cfg.n_facilities, spec)
    fixes: List[GpsFix] = []
    events: List[DemandEvent] = []
    hotspots_by_facility: Dict[str, List[CellId]] = {}

    for facility_id, cells in domains.items():
        rng = make_rng(seed, "synthetic", facility_id)
        n_hotspots = min(len(cfg.hotspot_peaks), len(cells))
        hotspots = [cells[i] for i in sorted(rng.choice(len(cells), size=n_hotspots, replace=False))]
        hotspots_by_facility[facility_id] = hotspots

        counts = rng.poisson(planted_rates(cells, hotspots, cfg, spec, n_slots))
        vehicle_ids = [f"{facility_id}-V{v:02d}" for v in range(cfg.vehicles_per_facility)]
        for slot_index, cell_index in zip(*np.nonzero(counts)):
            slot_start = spec.epoch_start + int(slot_index) * spec.slot_duration_s
            for _ in range(int(counts[slot_index, cell_index])):
                vehicle_id = vehicle_ids[int(rng.integers(len(vehicle_ids)))]
                pickup_t = int(slot_start + rng.integers(0, int(spec.slot_duration_s)))
                pickup_lat, pickup_lon = _uniform_point(cells[int(cell_index)], spec, rng)
                dropoff_t = pickup_t + int(rng.integers(*TRIP_DURATION_RANGE_S))
                dropoff_lat, dropoff_lon = _uniform_point(cells[int(rng.integers(len(cells)))], spec, rng)

                for kind, t, lat, lon in (
                    ("pickup", pickup_t, pickup_lat, pickup_lon),
                    ("dropoff", dropoff_t, dropoff_lat, dropoff_lon),
                ):
                    events.append(DemandEvent(vehicle_id, float(t), kind, facility_id))
                    if rng.random() >= cfg.gap_fraction:
                        fixes.extend(_trace_through(vehicle_id, t, lat, lon, cfg, spec, rng))

    events.sort(key=lambda e: (e.t, e.facility_id, e.vehicle_id, e.kind))
    fixes.sort(key=lambda f: (f.vehicle_id, f.t))
    corpus = SyntheticCorpus(fixes, events, domains, hotspots_by_facility)
    log(
        f"Synthetic: {cfg.n_facilities} facilities, {n_slots} slots, {corpus.trips} trips, "
        f"{len(events)} events, {len(fixes)} GPS fixes (seed {seed})"
    )
    return corpus


def generate_synthetic(
    cfg: SyntheticConfig,
    seed: int,
    spec: Optional[GridSpec] = None,
    th: Optional[LevelThresholds] = None,
    enumeration: str = config.SAMPLE_ENUMERATION,
    demand_events: str = config.DEMAND_EVENTS,
) -> List[FacilityDataset]:
    """Labeled per-facility datasets from a freshly generated corpus.

    The corpus goes through the same merge / labeling path as real input, so
    lost GPS fixes surface as omitted events here too.
    """
    spec = spec or GridSpec()
    th = th or LevelThresholds()
    corpus = generate_corpus(cfg, seed, spec)
    merged = merge(corpus.fixes, corpus.events)
    return build_facility_datasets(merged.located, spec, th, enumeration, demand_events)


def _uniform_point(cell: CellId, spec: GridSpec, rng: np.random.Generator) -> Tuple[float, float]:
    lat_lo, lat_hi, lon_lo, lon_hi = cell_bounds(cell, spec)
    # keep clear of the edges so the point stays in its cell after rounding
    u, v = rng.uniform(0.01, 0.99, size=2)
    return lat_lo + (lat_hi - lat_lo) * float(u), lon_lo + (lon_hi - lon_lo) * float(v)


def _trace_through(
    vehicle_id: str, t: int, lat: float, lon: float, cfg: SyntheticConfig, spec: GridSpec, rng: np.random.Generator
) -> List[GpsFix]:
    """Fixes on the cadence around time t along a straight line through (lat, lon)."""
    speed = rng.uniform(*SPEED_RANGE_MPS)
    heading = rng.uniform(0.0, 2.0 * math.pi)
    dlat_per_s = speed * math.cos(heading) / 1000.0 / config.KM_PER_DEG_LAT
    dlon_per_s = speed * math.sin(heading) / 1000.0 / spec.km_per_deg_lon
    phase = int(rng.integers(0, cfg.fix_cadence_s))

    fixes = []
    for k in range(-cfg.fixes_per_side + 1, cfg.fixes_per_side + 1):
        fix_t = t - phase + k * cfg.fix_cadence_s
        dt = fix_t - t
        fixes.append(GpsFix(vehicle_id, float(fix_t), lat + dlat_per_s * dt, lon + dlon_per_s * dt))
    return fixes
