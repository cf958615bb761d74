import io

import numpy as np
import pytest

from src.app.errors import InvalidConfig, MalformedRow
from src.app.grid import CellId, DemandLevel, GridSpec, LevelThresholds, SlotId, cell_center, level_of
from src.app.ingest import (
    EXACT,
    INTERPOLATED,
    NEAREST,
    DemandEvent,
    FacilityDataset,
    GpsFix,
    LabeledSample,
    build_facility_datasets,
    build_samples,
    label_histogram,
    locate_event,
    merge,
    parse_events,
    parse_timestamp,
    parse_trajectories,
    read_samples,
    relabel,
    write_events,
    write_samples,
    write_trajectories,
)
from src.app.nn import encode_features

SPEC = GridSpec()
T0 = SPEC.epoch_start + 1000.0


def pickup(t, vehicle="v1", facility="F00"):
    return DemandEvent(vehicle, t, "pickup", facility)


def test_parse_trajectories_header_only_is_empty():
    assert parse_trajectories(io.StringIO("vehicle_id,timestamp,lat,lon\n")) == []


def test_parse_trajectories_sorts_per_vehicle_by_time():
    text = (
        "vehicle_id,timestamp,lat,lon\n"
        "v2,100,35.1,139.1\n"
        "v1,20,35.2,139.2\n"
        "v1,10,35.3,139.3\n"
    )
    fixes = parse_trajectories(io.StringIO(text))
    assert [(f.vehicle_id, f.t) for f in fixes] == [("v1", 10.0), ("v1", 20.0), ("v2", 100.0)]


def test_parse_trajectories_keeps_the_first_duplicate():
    text = "vehicle_id,timestamp,lat,lon\nv1,10,35.0,139.0\nv1,10,36.0,140.0\n"
    fixes = parse_trajectories(io.StringIO(text))
    assert fixes == [GpsFix("v1", 10.0, 35.0, 139.0)]


def test_parse_trajectories_reports_the_bad_line():
    text = "vehicle_id,timestamp,lat,lon\nv1,10,35.0,139.0\nv1,20,abc,139.0\n"
    with pytest.raises(MalformedRow) as excinfo:
        parse_trajectories(io.StringIO(text))
    assert excinfo.value.line_no == 3
    assert "lat" in excinfo.value.reason


def test_parse_trajectories_counts_blank_lines_in_the_reported_line():
    text = "vehicle_id,timestamp,lat,lon\nv1,10,35.0,139.0\n\nv1,20,abc,139.0\n"
    with pytest.raises(MalformedRow) as excinfo:
        parse_trajectories(io.StringIO(text))
    assert excinfo.value.line_no == 4


def test_parse_trajectories_skips_blank_lines():
    text = "vehicle_id,timestamp,lat,lon\n\nv1,10,35.0,139.0\n\n"
    assert parse_trajectories(io.StringIO(text)) == [GpsFix("v1", 10.0, 35.0, 139.0)]


def test_parse_trajectories_reports_the_line_with_an_extra_field():
    text = "vehicle_id,timestamp,lat,lon\nv1,10,35.0,139.0\nv1,20,35.0,139.0,9\n"
    with pytest.raises(MalformedRow) as excinfo:
        parse_trajectories(io.StringIO(text))
    assert excinfo.value.line_no == 3


def test_parse_events_reports_an_extra_field_on_the_first_data_line():
    text = "vehicle_id,timestamp,kind,facility_id\nv1,10,pickup,F00,x\n"
    with pytest.raises(MalformedRow) as excinfo:
        parse_events(io.StringIO(text))
    assert excinfo.value.line_no == 2


def test_parse_trajectories_rejects_a_wrong_header():
    with pytest.raises(MalformedRow) as excinfo:
        parse_trajectories(io.StringIO("id,t,lat,lon\nv1,1,35,139\n"))
    assert excinfo.value.line_no == 1


def test_parse_timestamp_accepts_epoch_and_rfc3339():
    assert parse_timestamp("1672531200") == 1672531200.0
    assert parse_timestamp("1672531200.5") == 1672531200.5
    assert parse_timestamp("2023-01-01T00:00:00Z") == 1672531200.0
    assert parse_timestamp("2023-01-01T09:00:00+09:00") == 1672531200.0
    assert parse_timestamp("2023-01-01T00:00:00") == 1672531200.0


def test_parse_events_keeps_file_order_and_validates_kind():
    text = "vehicle_id,timestamp,kind,facility_id\nv1,20,dropoff,F01\nv1,10,pickup,F01\n"
    events = parse_events(io.StringIO(text))
    assert [e.kind for e in events] == ["dropoff", "pickup"]

    bad = "vehicle_id,timestamp,kind,facility_id\nv1,20,hail,F01\n"
    with pytest.raises(MalformedRow) as excinfo:
        parse_events(io.StringIO(bad))
    assert excinfo.value.line_no == 2


def test_locate_exact_fix():
    fixes = [GpsFix("v1", T0 - 5, 35.0, 139.0), GpsFix("v1", T0, 35.2, 139.2)]
    located = locate_event(fixes, pickup(T0))
    assert (located.lat, located.lon, located.resolution) == (35.2, 139.2, EXACT)


def test_locate_interpolates_between_bracketing_fixes():
    fixes = [GpsFix("v1", T0 - 5, 35.0, 139.0), GpsFix("v1", T0 + 5, 35.001, 139.001)]
    located = locate_event(fixes, pickup(T0))
    assert located.resolution == INTERPOLATED
    assert located.lat == pytest.approx(35.0005, abs=1e-12)
    assert located.lon == pytest.approx(139.0005, abs=1e-12)


def test_locate_uses_the_nearest_fix_when_only_one_side_is_in_the_window():
    fixes = [GpsFix("v1", T0 - 60, 34.0, 138.0), GpsFix("v1", T0 + 45, 35.1, 139.1)]
    located = locate_event(fixes, pickup(T0))
    assert (located.lat, located.lon, located.resolution) == (35.1, 139.1, NEAREST)


def test_locate_omits_events_46_seconds_from_any_fix():
    fixes = [GpsFix("v1", T0 - 46, 35.0, 139.0), GpsFix("v1", T0 + 46, 35.1, 139.1)]
    assert locate_event(fixes, pickup(T0)) is None
    assert locate_event([], pickup(T0)) is None


def test_interpolation_is_exact_on_linear_motion():
    rng = np.random.default_rng(3)
    for _ in range(50):
        t0 = T0 + rng.uniform(0, 1000)
        t1 = t0 + rng.uniform(1, 40)
        lat0, lon0 = 35.0 + rng.uniform(0, 0.1), 139.0 + rng.uniform(0, 0.1)
        dlat, dlon = rng.uniform(-0.01, 0.01, size=2)
        t = rng.uniform(t0, t1)
        fixes = [GpsFix("v1", t0, lat0, lon0), GpsFix("v1", t1, lat0 + dlat, lon0 + dlon)]
        located = locate_event(fixes, pickup(t))
        if t in (t0, t1):
            continue
        u = (t - t0) / (t1 - t0)
        assert abs(located.lat - (lat0 + u * dlat)) < 1e-9
        assert abs(located.lon - (lon0 + u * dlon)) < 1e-9


def test_merge_omits_events_of_unknown_vehicles():
    result = merge([], [pickup(T0, "ghost"), pickup(T0 + 1, "ghost")])
    assert result.located == []
    assert result.omitted_count == 2


def test_merge_matches_a_per_event_oracle_and_conserves_events():
    rng = np.random.default_rng(11)
    fixes = []
    for vehicle in ("a", "b", "c"):
        for t in sorted(rng.choice(np.arange(0, 3000, 5), size=60, replace=False)):
            fixes.append(GpsFix(vehicle, T0 + float(t), 35.01, 139.01))
    events = [pickup(T0 + float(rng.uniform(0, 3000)), str(rng.choice(["a", "b", "c", "d"]))) for _ in range(50)]

    result = merge(list(reversed(fixes)), events)

    expected_located = [
        e for e in events if any(f.vehicle_id == e.vehicle_id and abs(f.t - e.t) <= 45.0 for f in fixes)
    ]
    assert [item.event for item in result.located] == expected_located
    assert len(result.located) + result.omitted_count == len(events)
    assert result.total == len(events)


def test_dense_samples_without_events_cover_the_grid():
    spec = GridSpec(n_rows=2, n_cols=2)
    samples, grid = build_samples([], spec, LevelThresholds(), "dense", slot_range=(0, 0))
    assert len(samples) == 4
    assert all(s.label == DemandLevel.NON for s in samples)
    assert grid.total() == 0


def test_three_pickups_in_one_cell_hour_are_med():
    lat, lon = cell_center(CellId(2, 3), SPEC)
    located = merge(
        [GpsFix("v1", T0 + i, lat, lon) for i in range(3)],
        [pickup(T0 + i) for i in range(3)],
    ).located
    samples, _ = build_samples(located, SPEC, LevelThresholds(), "sparse")
    assert len(samples) == 1
    assert samples[0].cell == CellId(2, 3)
    assert samples[0].count == 3
    assert samples[0].label == DemandLevel.MED


def test_dense_enumeration_emits_every_cell_and_slot_in_order():
    spec = GridSpec(n_rows=3, n_cols=2)
    lat, lon = cell_center(CellId(1, 1), spec)
    fixes = [GpsFix("v1", spec.epoch_start + 10, lat, lon), GpsFix("v1", spec.epoch_start + 7300, lat, lon)]
    events = [pickup(spec.epoch_start + 10), pickup(spec.epoch_start + 7300)]
    samples, _ = build_samples(merge(fixes, events).located, spec, LevelThresholds(), "dense")

    assert len(samples) == 3 * 2 * 3
    keys = [(s.slot.index, s.cell.row, s.cell.col) for s in samples]
    assert keys == sorted(keys)
    for s in samples:
        expected = 1 if s.cell == CellId(1, 1) and s.slot.index in (0, 2) else 0
        assert s.count == expected
        assert s.label == level_of(expected, LevelThresholds())
        assert np.array_equal(s.features, encode_features(s.cell, s.slot, spec))


def test_build_samples_rejects_unknown_enumeration():
    with pytest.raises(InvalidConfig):
        build_samples([], SPEC, LevelThresholds(), "everything")


def test_facility_datasets_cover_their_own_cells_over_the_shared_slot_range():
    a = cell_center(CellId(0, 0), SPEC)
    b = cell_center(CellId(5, 5), SPEC)
    fixes = [GpsFix("va", T0, *a), GpsFix("vb", T0 + 3600 * 4, *b)]
    events = [pickup(T0, "va", "F01"), pickup(T0 + 3600 * 4, "vb", "F00")]
    datasets = build_facility_datasets(merge(fixes, events).located, SPEC, LevelThresholds())

    assert [d.facility_id for d in datasets] == ["F00", "F01"]
    assert datasets[0].cells == {CellId(5, 5)}
    assert datasets[1].cells == {CellId(0, 0)}
    for dataset in datasets:
        assert len(dataset.samples) == 5
        assert sum(s.count for s in dataset.samples) == 1


def test_label_histogram_counts_every_level():
    spec = GridSpec(n_rows=1, n_cols=2)
    samples, _ = build_samples([], spec, LevelThresholds(), "dense", slot_range=(0, 1))
    assert label_histogram(samples) == {"non": 4, "low": 0, "med": 0, "high": 0}


def test_samples_file_preserves_cells_slots_and_labels(tmp_path):
    spec = GridSpec(n_rows=2, n_cols=2)
    lat, lon = cell_center(CellId(1, 0), spec)
    located = merge(
        [GpsFix("v1", spec.epoch_start + i, lat, lon) for i in range(7)],
        [pickup(spec.epoch_start + i) for i in range(7)],
    ).located
    samples, _ = build_samples(located, spec, LevelThresholds(), "dense")
    path = tmp_path / "F00" / "samples.csv"
    write_samples(FacilityDataset("F00", samples, {CellId(1, 0)}), str(path))

    assert path.read_text().splitlines()[0] == "facility_id,row,col,slot,count,level"
    loaded = read_samples(str(path), spec)
    assert loaded.facility_id == "F00"
    assert [(s.cell, s.slot, s.count, s.label) for s in loaded.samples] == [
        (s.cell, s.slot, s.count, s.label) for s in samples
    ]
    assert loaded.samples[0].slot.hour_of_day == samples[0].slot.hour_of_day
    assert all(np.array_equal(x.features, y.features) for x, y in zip(loaded.samples, samples))


def test_read_samples_rejects_unknown_levels(tmp_path):
    path = tmp_path / "samples.csv"
    path.write_text("facility_id,row,col,slot,count,level\nF00,0,0,0,1,huge\n")
    with pytest.raises(MalformedRow) as excinfo:
        read_samples(str(path), SPEC)
    assert excinfo.value.line_no == 2


def test_corpus_writers_produce_parseable_files(tmp_path):
    fixes = [GpsFix("v1", T0, 35.01, 139.01), GpsFix("v1", T0 + 2.5, 35.02, 139.02)]
    events = [pickup(T0), DemandEvent("v1", T0 + 2.5, "dropoff", "F00")]
    write_trajectories(fixes, str(tmp_path / "trajectories.csv"))
    write_events(events, str(tmp_path / "events.csv"))

    assert parse_trajectories(str(tmp_path / "trajectories.csv")) == fixes
    assert parse_events(str(tmp_path / "events.csv")) == events


def test_relabel_recomputes_levels_from_counts():
    cell = CellId(0, 0)
    old = LevelThresholds((0, 2, 5))
    samples = []
    for index, count in enumerate((0, 1, 3, 9)):
        slot = SlotId(index, index, 0)
        samples.append(LabeledSample(cell, slot, encode_features(cell, slot, SPEC), level_of(count, old), count))
    dataset = FacilityDataset("F00", samples, {cell})
    relabelled = relabel(dataset, LevelThresholds((0, 1, 2)))
    assert [s.label for s in relabelled.samples] == [DemandLevel.NON, DemandLevel.LOW, DemandLevel.HIGH, DemandLevel.HIGH]
    assert [s.label for s in dataset.samples] == [DemandLevel.NON, DemandLevel.LOW, DemandLevel.MED, DemandLevel.HIGH]
    assert relabelled.cells == {cell}
