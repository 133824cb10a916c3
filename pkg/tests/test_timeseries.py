import math
import statistics

import numpy as np
import pandas as pd
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from icuextract.cohort import select_cohort
from icuextract.ingest import attach_stay_to_lab_events, load_source_dataset
from icuextract.resources import (
    ExtractConfig,
    ItemMapEntry,
    VariableRange,
    index_item_map,
    load_item_map,
    load_variable_ranges,
    resolve_variable,
)
from icuextract.timeseries import (
    Action,
    UnknownUnit,
    aggregate_hourly,
    apply_outlier_policy,
    bucket_hour,
    convert_units,
    filter_missingness,
    read_grid,
    summarize_missingness,
    write_grid,
)

from conftest import SourceBuilder, basic_source

HR = VariableRange("heart_rate", 0, 0, 350, 390)


def test_convert_units_examples():
    assert convert_units(98.6, "F", "temperature") == pytest.approx(37.0, abs=1e-12)
    assert convert_units(98.6, "°F", "temperature") == pytest.approx(37.0, abs=1e-12)
    assert convert_units(37.0, "c", "temperature") == 37.0
    assert convert_units(180, "cm", "height") == 180
    assert convert_units(70, "in", "height") == pytest.approx(177.8)
    assert convert_units(154.3234054, "lb", "weight") == pytest.approx(70.0, abs=1e-4)
    assert convert_units(16, "oz", "weight") == pytest.approx(0.45359237, rel=1e-8)
    assert convert_units(80, "", "weight") == 80
    assert convert_units(80, "bpm", "none") == 80


def test_lb_oracle_independent_arithmetic():
    # exact product is 69.99991920185680..., i.e. 70 kg to about 1e-4; 70 kg is 154.32358352941 lb
    from fractions import Fraction

    kg = Fraction("154.3234054") * Fraction("0.45359237")
    assert float(kg) == pytest.approx(69.9999192018568, abs=1e-12)
    assert convert_units(154.3234054, "lb", "weight") == pytest.approx(float(kg), rel=1e-15)
    assert float(Fraction(70) / Fraction("0.45359237")) == pytest.approx(154.32358352941, abs=1e-10)


def test_unknown_unit():
    with pytest.raises(UnknownUnit):
        convert_units(1.0, "furlongs", "height")


def test_outlier_policy_examples():
    assert apply_outlier_policy(400, HR).action is Action.DROP
    assert apply_outlier_policy(370, HR) == (Action.CLAMP, 350)
    assert apply_outlier_policy(80, HR) == (Action.KEEP, 80)
    assert apply_outlier_policy(-1, HR).action is Action.DROP
    assert apply_outlier_policy(1e9, VariableRange("x", None, None, None, None)) == (Action.KEEP, 1e9)
    assert apply_outlier_policy(5, None) == (Action.KEEP, 5)


def _bound():
    return st.one_of(st.none(), st.floats(-1e3, 1e3, allow_nan=False))


@st.composite
def ordered_ranges(draw):
    xs = sorted(draw(st.lists(st.floats(-1e3, 1e3, allow_nan=False), min_size=4, max_size=4)))
    keep = draw(st.lists(st.booleans(), min_size=4, max_size=4))
    b = [x if k else None for x, k in zip(xs, keep)]
    return VariableRange("v", *b)


@settings(max_examples=500, deadline=None)
@given(rng=ordered_ranges(), value=st.floats(-2e3, 2e3, allow_nan=False))
def test_clamp_is_idempotent(rng, value):
    d = apply_outlier_policy(value, rng)
    if d.action is Action.CLAMP:
        assert apply_outlier_policy(d.value, rng) == (Action.KEEP, d.value)
    if d.action is not Action.DROP:
        lo = -math.inf if rng.valid_low is None else rng.valid_low
        hi = math.inf if rng.valid_high is None else rng.valid_high
        assert lo <= d.value <= hi or (rng.valid_low is None and rng.valid_high is None)


def test_bucket_hour_examples():
    t0 = pd.Timestamp("2100-01-01 00:00")
    assert bucket_hour(t0, t0, 24) == 0
    assert bucket_hour(t0 + pd.Timedelta(minutes=59), t0, 24) == 0
    assert bucket_hour(t0 + pd.Timedelta(minutes=60), t0, 24) == 1
    assert bucket_hour(t0 + pd.Timedelta(hours=24, minutes=1), t0, 24) is None
    assert bucket_hour(t0 - pd.Timedelta(minutes=1), t0, 24) is None


def _run(builder, tmp_path, config=None, item_map=None, ranges=None, threads=1):
    ds = load_source_dataset(builder.write(tmp_path / "src"))
    cohort = select_cohort(ds, config)
    events, dropped = attach_stay_to_lab_events(ds.events, ds.icustays)
    grid, report = aggregate_hourly(
        events, cohort, item_map or load_item_map(), ranges or load_variable_ranges(), config, threads=threads
    )
    return ds, cohort, grid, report, dropped


def _cell(grid, stay, hour, var):
    c = grid.cells
    hit = c.loc[(c["icustay_id"] == stay) & (c["hours_in"] == hour) & (c["variable"] == var)]
    return None if hit.empty else hit.iloc[0]


def test_two_values_sample_std(tmp_path):
    b = SourceBuilder()
    b.patient(1)
    b.admission(10, 1, "2100-01-01 00:00:00", "2100-01-05 00:00:00")
    b.stay(100, 10, 1, "2100-01-01 00:00:00", "2100-01-02 00:00:00")
    b.event(1, 10, 100, 211, "2100-01-01 03:10:00", 80)
    b.event(1, 10, 100, 211, "2100-01-01 03:20:00", 90)
    b.event(1, 10, 100, 211, "2100-01-01 05:00:00", 80)
    _, _, grid, _, _ = _run(b, tmp_path)
    c = _cell(grid, 100, 3, "heart_rate")
    assert (c["mean"], c["count"]) == (85.0, 2)
    assert c["std"] == pytest.approx(7.0710678, abs=1e-7)
    single = _cell(grid, 100, 5, "heart_rate")
    assert (single["mean"], single["count"]) == (80.0, 1) and np.isnan(single["std"])


def test_grouped_itemids_pool(tmp_path):
    b = SourceBuilder()
    b.patient(1)
    b.admission(10, 1, "2100-01-01 00:00:00", "2100-01-05 00:00:00")
    b.stay(100, 10, 1, "2100-01-01 00:00:00", "2100-01-02 00:00:00")
    b.event(1, 10, 100, 211, "2100-01-01 01:10:00", 60)
    b.event(1, 10, 100, 220045, "2100-01-01 01:40:00", 70)
    _, _, grid, _, _ = _run(b, tmp_path)
    c = _cell(grid, 100, 1, "heart_rate")
    assert (c["mean"], c["count"]) == (65.0, 2)
    _, _, raw, _, _ = _run(b, tmp_path / "raw", ExtractConfig(group_by_level2=False))
    assert "211" in raw.variables and "220045" in raw.variables and "heart_rate" not in raw.variables
    assert _cell(raw, 100, 1, "211")["mean"] == 60 and _cell(raw, 100, 1, "220045")["mean"] == 70


def test_basic_pipeline_disposition(tmp_path):
    ds, cohort, grid, report, dropped = _run(basic_source(), tmp_path)
    assert dropped == 0
    assert len(grid.index) == int(np.ceil(cohort.table["los_icu_hours"]).sum())
    assert _cell(grid, 100, 2, "temperature")["mean"] == pytest.approx(37.0)
    assert _cell(grid, 100, 3, "glucose")["mean"] == 120
    assert report.per_variable["heart_rate"].n_dropped == 1
    t = report.totals()
    parts = t["n_kept"] + t["n_clamped_low"] + t["n_clamped_high"] + t["n_dropped"] + t["n_unit_errors"]
    assert parts + t["n_out_of_stay"] + t["n_unmapped"] == t["n_events"] == len(ds.events)


def test_grid_dense_and_sorted(tmp_path):
    _, cohort, grid, _, _ = _run(basic_source(), tmp_path)
    sizes = grid.index.groupby("icustay_id").size()
    expected = pd.Series(np.ceil(cohort.table["los_icu_hours"].to_numpy()).astype(int), index=cohort.table["icustay_id"])
    assert (sizes.reindex(expected.index) == expected).all()
    assert grid.variables == sorted(grid.variables)
    assert (grid.cells["count"] >= 1).all()
    assert (grid.cells["std"].isna() == (grid.cells["count"] == 1)).all()


def test_final_partial_hour_lands_in_last_row(tmp_path):
    b = SourceBuilder()
    b.patient(1)
    b.admission(10, 1, "2100-01-01 00:00:00", "2100-01-05 00:00:00")
    b.stay(100, 10, 1, "2100-01-01 00:00:00", "2100-01-01 12:30:00")
    b.event(1, 10, 100, 211, "2100-01-01 12:20:00", 70)
    b.event(1, 10, 100, 211, "2100-01-01 12:30:00", 71)
    b.event(1, 10, 100, 211, "2100-01-01 13:00:00", 72)
    _, _, grid, report, _ = _run(b, tmp_path)
    assert grid.n_hours.tolist() == [13]
    assert _cell(grid, 100, 12, "heart_rate")["count"] == 2
    assert report.per_variable["heart_rate"].n_out_of_stay == 1


def _oracle(builder, item_map, ranges, config):
    """Scalar per-event pipeline with dict pooling, independent of the vectorized path."""
    by_id = index_item_map(item_map)
    rng = {r.variable: r for r in ranges}
    stays = {r["icustay_id"]: r for r in builder.rows["icustays"]}
    pools = {}
    for e in builder.rows["events"]:
        stay = stays[e["icustay_id"]]
        var = resolve_variable(e["itemid"], by_id, config.group_by_level2)
        if var is None:
            continue
        entry = by_id[e["itemid"]]
        try:
            v = convert_units(float(e["valuenum"]), e["valueuom"], entry.unit_class)
        except UnknownUnit:
            continue
        d = apply_outlier_policy(v, rng.get(entry.aggregate_group))
        if d.action is Action.DROP:
            continue
        intime, outtime = pd.Timestamp(stay["intime"]), pd.Timestamp(stay["outtime"])
        n = math.ceil((outtime - intime) / pd.Timedelta(hours=1))
        h = bucket_hour(e["charttime"], intime, n)
        if h is None:
            continue
        pools.setdefault((stay["icustay_id"], h, var), []).append(d.value)
    return {
        k: (statistics.fmean(v), len(v), statistics.stdev(v) if len(v) > 1 else None) for k, v in pools.items()
    }


SMALL_MAP = [
    ItemMapEntry(211, "hr", "heart_rate", "none"),
    ItemMapEntry(220045, "hr", "heart_rate", "none"),
    ItemMapEntry(676, "temp", "temperature", "temperature"),
    ItemMapEntry(763, "wt", "weight", "weight"),
]
SMALL_RANGES = [
    VariableRange("heart_rate", 0, 0, 350, 390),
    VariableRange("temperature", 14.2, 26, 45, 47),
    VariableRange("weight", 0, 0, 550, 550),
]
ITEMS = [(211, ""), (220045, ""), (676, "C"), (676, "F"), (676, "kelvin"), (763, "kg"), (763, "lb"), (999, "")]


@settings(max_examples=40, deadline=None)
@given(
    los_min=st.lists(st.integers(12 * 60, 60 * 60), min_size=1, max_size=3),
    events=st.lists(
        st.tuples(st.integers(0, 2), st.integers(-120, 62 * 60), st.sampled_from(ITEMS), st.floats(-50, 800, allow_nan=False)),
        max_size=60,
    ),
    grouped=st.booleans(),
)
def test_aggregation_matches_scalar_oracle(tmp_path_factory, los_min, events, grouped):
    b = SourceBuilder()
    for k, minutes in enumerate(los_min):
        sid = k + 1
        b.patient(sid)
        b.admission(sid * 10, sid, "2100-01-01 00:00:00", "2100-01-10 00:00:00")
        out = pd.Timestamp("2100-01-01 00:00:00") + pd.Timedelta(minutes=minutes)
        b.stay(sid * 100, sid * 10, sid, "2100-01-01 00:00:00", out.strftime("%Y-%m-%d %H:%M:%S"))
    for k, offset, (item, uom), v in events:
        k = k % len(los_min)
        sid = k + 1
        t = pd.Timestamp("2100-01-01 00:00:00") + pd.Timedelta(minutes=offset)
        b.event(sid, sid * 10, sid * 100, item, t.strftime("%Y-%m-%d %H:%M:%S"), repr(round(v, 3)), uom)
    cfg = ExtractConfig(group_by_level2=grouped)
    _, _, grid, report, _ = _run(b, tmp_path_factory.mktemp("agg"), cfg, SMALL_MAP, SMALL_RANGES)
    expected = _oracle(b, SMALL_MAP, SMALL_RANGES, cfg)
    got = {
        (r.icustay_id, r.hours_in, r.variable): (r.mean, r.count, None if np.isnan(r.std) else r.std)
        for r in grid.cells.itertuples()
    }
    assert set(got) == set(expected)
    for k, (m, n, s) in expected.items():
        gm, gn, gs = got[k]
        assert gn == n and abs(gm - m) <= 1e-9 * max(1, abs(m))
        assert (gs is None) == (s is None)
        if s is not None:
            assert abs(gs - s) <= 1e-9 * max(1, abs(s))
    t = report.totals()
    assert sum(v for k, v in t.items() if k not in ("n_events", "n_not_in_cohort")) == t["n_events"]


def test_threads_bit_identical(tmp_path):
    from icuextract import synthgen

    truth_dir = tmp_path / "s"
    synthgen.generate_to(truth_dir, synthgen.GenParams(n_subjects=150, seed=5))
    ds = load_source_dataset(truth_dir)
    cohort = select_cohort(ds)
    events, _ = attach_stay_to_lab_events(ds.events, ds.icustays)
    g1, r1 = aggregate_hourly(events, cohort, load_item_map(), load_variable_ranges(), threads=1)
    g4, r4 = aggregate_hourly(events, cohort, load_item_map(), load_variable_ranges(), threads=4)
    pd.testing.assert_frame_equal(g1.cells, g4.cells, check_exact=True)
    assert r1.to_dict() == r4.to_dict()


def _grid_with_presence(tmp_path):
    b = SourceBuilder()
    b.patient(1)
    b.admission(10, 1, "2100-01-01 00:00:00", "2100-01-05 00:00:00")
    b.stay(100, 10, 1, "2100-01-01 00:00:00", "2100-01-01 20:00:00")
    for h in range(10):  # heart rate in 50% of the 20 rows
        b.event(1, 10, 100, 211, f"2100-01-01 {h:02d}:30:00", 70 + h)
    for h in range(8):  # respiratory rate in 40%
        b.event(1, 10, 100, 618, f"2100-01-01 {h:02d}:30:00", 16)
    for h in range(20):  # oxygen saturation in all rows
        b.event(1, 10, 100, 646, f"2100-01-01 {h:02d}:10:00", 97)
    return _run(b, tmp_path)[2]


def test_filter_missingness(tmp_path):
    grid = _grid_with_presence(tmp_path)
    same, dropped = filter_missingness(grid, 0)
    assert same is grid and dropped == []
    kept, dropped = filter_missingness(grid, 50)
    assert "heart_rate" in kept.variables and "respiratory_rate" in dropped
    assert "oxygen_saturation" in kept.variables
    assert all(v not in kept.variables for v in dropped)


def test_summarize_missingness(tmp_path):
    grid = _grid_with_presence(tmp_path)
    s = summarize_missingness(grid).set_index("variable")
    assert s.loc["heart_rate", "presence_pct"] == 50.0
    assert s.loc["oxygen_saturation", "presence_pct"] == 100.0
    assert s.loc["glucose", "presence_pct"] == 0.0
    assert s.loc["heart_rate", "mean"] == pytest.approx(74.5)
    assert s.loc["heart_rate", "std"] == pytest.approx(statistics.stdev(range(70, 80)))


def test_grid_csv_round_trip(tmp_path):
    _, _, grid, _, _ = _run(basic_source(), tmp_path)
    write_grid(grid, tmp_path / "vl.csv")
    again = read_grid(tmp_path / "vl.csv")
    assert again.variables == grid.variables
    pd.testing.assert_frame_equal(grid.cells.reset_index(drop=True), again.cells, check_dtype=False)
    header = (tmp_path / "vl.csv").read_text().splitlines()[0].split(",")
    assert header[:4] == ["subject_id", "hadm_id", "icustay_id", "hours_in"]
    assert header[4:7] == ["anion_gap_mean", "anion_gap_count", "anion_gap_std"]
    write_grid(grid, tmp_path / "m.csv", stats=("mean",))
    assert all(c.endswith("_mean") for c in (tmp_path / "m.csv").read_text().splitlines()[0].split(",")[4:])
