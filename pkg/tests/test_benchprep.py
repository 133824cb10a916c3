import itertools

import numpy as np
import pandas as pd
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from icuextract.benchprep import (
    AGE_BUCKETS,
    GAP_HOURS,
    ONSET,
    PREDICTION_HOURS,
    STAY_OFF,
    STAY_ON,
    WEAN,
    WINDOW_CLASSES,
    WINDOW_HOURS,
    BadRatios,
    age_bucket,
    build_dynamic_samples,
    build_fixed_samples,
    compute_train_stats,
    dynamic_anchors,
    feature_columns,
    label_window,
    simple_impute,
    split_cohort,
)
from icuextract.timeseries import HourlyGrid

S = 25.0


def test_split_deterministic_and_degenerate():
    ids = range(1000)
    a = split_cohort(ids, seed=3)
    assert a.equals(split_cohort(list(ids)[::-1], seed=3))
    assert set(split_cohort(ids, (1, 0, 0), seed=3)) == {"train"}
    assert not a.equals(split_cohort(ids, seed=4))


def test_split_fractions_10k_seed7():
    s = split_cohort(range(100_000, 110_000), (0.7, 0.15, 0.15), seed=7)
    frac = s.value_counts(normalize=True)
    for name, r in zip(("train", "val", "test"), (0.7, 0.15, 0.15)):
        assert abs(frac[name] - r) <= 0.02


@pytest.mark.parametrize("ratios", [(0.5, 0.5, 0.5), (0.7, 0.3), (1.2, -0.1, -0.1)])
def test_bad_ratios(ratios):
    with pytest.raises(BadRatios):
        split_cohort([1, 2], ratios)


def _toy_grid(values_by_stay: dict[int, list], variables=("x",)):
    """Grid from per-stay lists of hourly values (None = absent) for one variable."""
    idx, cells = [], []
    for sid, vals in values_by_stay.items():
        for h, v in enumerate(vals):
            idx.append((sid, sid * 10, sid * 100, h))
            if v is not None:
                cells.append((sid * 100, h, variables[0], float(v), 1, np.nan))
    index = pd.DataFrame(idx, columns=["subject_id", "hadm_id", "icustay_id", "hours_in"])
    cells = pd.DataFrame(cells, columns=["icustay_id", "hours_in", "variable", "mean", "count", "std"])
    n_hours = index.groupby("icustay_id", sort=False).size()
    return HourlyGrid(index, list(variables), cells, n_hours)


def test_train_stats_examples():
    grid = _toy_grid({1: [0, 10, None], 2: [5, 5], 3: [100]})
    split = pd.Series({1: "train", 2: "val", 3: "test"})
    stats = compute_train_stats(grid, split)
    assert stats.loc["x", "mean"] == 5.0
    assert stats.loc["x", "std"] == pytest.approx(7.0710678, abs=1e-7)
    const = compute_train_stats(_toy_grid({1: [5, 5, 5]}), pd.Series({1: "train"}))
    assert tuple(const.loc["x"]) == (5.0, 1e-6)
    never = compute_train_stats(_toy_grid({1: [None], 2: [3.0]}), pd.Series({1: "train", 2: "test"}))
    assert tuple(never.loc["x"]) == (0.0, 1.0)


def _series(vals):
    return np.array([[np.nan if v is None else v] for v in vals], dtype=float)


def test_impute_examples():
    value, mask, delta = simple_impute(_series([None, 5, None, None]), np.array([0.0]), S)
    assert value[:, 0].tolist() == [5, 5, 5, 5]
    assert mask[:, 0].tolist() == [0, 1, 0, 0]
    assert delta[:, 0].tolist() == [S, 0, 1, 2]
    value, mask, delta = simple_impute(_series([None] * 4), np.array([7.5]), S)
    assert value[:, 0].tolist() == [7.5] * 4 and delta[:, 0].tolist() == [S] * 4
    value, mask, delta = simple_impute(_series([1, 2, 3]), np.array([0.0]), S)
    assert value[:, 0].tolist() == [1, 2, 3] and mask[:, 0].tolist() == [1, 1, 1] and delta[:, 0].tolist() == [0, 0, 0]
    value, _, _ = simple_impute(_series([None, 2, None, 4, None]), np.array([0.0]), S)
    assert value[:, 0].tolist() == [3, 2, 2, 4, 4]


def _impute_oracle(series, global_mean, sentinel):
    obs = [v for v in series if v is not None]
    own = sum(obs) / len(obs) if obs else global_mean
    values, masks, deltas, last, last_h = [], [], [], None, None
    for h, v in enumerate(series):
        if v is not None:
            last, last_h = v, h
            values.append(v), masks.append(1), deltas.append(0)
        else:
            values.append(own if last is None else last)
            masks.append(0)
            deltas.append(sentinel if last_h is None else h - last_h)
    return values, masks, deltas


@settings(max_examples=1000, deadline=None)
@given(
    series=st.lists(st.one_of(st.none(), st.floats(-1e3, 1e3, allow_nan=False)), min_size=1, max_size=30),
    gmean=st.floats(-10, 10),
)
def test_impute_recurrence(series, gmean):
    value, mask, delta = simple_impute(_series(series), np.array([gmean]), S)
    ev, em, ed = _impute_oracle(series, gmean, S)
    assert not np.isnan(value).any()
    assert np.allclose(value[:, 0], ev, rtol=1e-12, atol=1e-9)
    assert mask[:, 0].tolist() == em and delta[:, 0].tolist() == ed
    for h in range(1, len(series)):
        if mask[h, 0] == 0 and delta[h - 1, 0] != S:
            assert delta[h, 0] == delta[h - 1, 0] + 1


def test_label_window_examples():
    assert label_window(0, [0, 1, 1, 1]) == ONSET
    assert label_window(1, [1, 1, 1, 1]) == STAY_ON
    assert label_window(1, [1, 0, 0, 0]) == WEAN
    assert label_window(0, [1, 0, 1, 0]) == ONSET
    assert label_window(0, [0, 0, 0, 0]) == STAY_OFF


def test_label_window_exhaustive():
    seen = {c: 0 for c in WINDOW_CLASSES}
    for before, *window in itertools.product((0, 1), repeat=5):
        label = label_window(before, window)
        if before == 0:
            want = ONSET if any(window) else STAY_OFF
        else:
            want = STAY_ON if all(window) else WEAN
        assert label == want
        seen[label] += 1
    assert seen == {ONSET: 15, STAY_OFF: 1, STAY_ON: 1, WEAN: 15}


def test_age_bucket():
    assert [age_bucket(a) for a in (0, 30, 30.5, 31, 50, 51, 70, 71, 300)] == [
        "<30", "<30", "31-50", "31-50", "31-50", "51-70", "51-70", ">70", ">70"
    ]
    assert set(AGE_BUCKETS) == {"<30", "31-50", "51-70", ">70"}


def test_anchors():
    assert list(dynamic_anchors(40)) == list(range(25))
    assert len(dynamic_anchors(16)) == 1
    assert len(dynamic_anchors(15)) == 0


def _prep(p, seed=0):
    split = split_cohort(p["cohort"].table["subject_id"], seed=seed)
    stats = compute_train_stats(p["grid"], split)
    return split, stats


def test_fixed_samples_shape_and_labels(small_pipeline):
    p = small_pipeline
    split, stats = _prep(p)
    s = build_fixed_samples(p["grid"], p["cohort"], split, stats)
    t = p["cohort"].table.set_index("icustay_id")
    eligible = t.index[np.ceil(t["los_icu_hours"]) >= 30]
    assert sorted(s.ids["icustay_id"]) == sorted(eligible)
    assert s.features.shape == (len(eligible), 24, len(p["grid"].variables), 3)
    assert not np.isnan(s.features).any()
    los = t.loc[s.ids["icustay_id"], "los_icu_hours"].to_numpy()
    assert (s.labels["los3"].to_numpy() == (los > 72)).all()
    assert (s.labels["los7"].to_numpy() == (los > 168)).all()
    assert (s.labels["mort_icu"] <= s.labels["mort_hosp"]).all()
    frame = s.to_frame()
    assert feature_columns(s.variables, 24)[0] in frame.columns
    assert frame.shape[0] == len(s)


def test_fixed_boundary_labels():
    from icuextract.cohort import Cohort

    # stays of 28h (excluded), 72h (los3 false), 240h-like long stay with death
    table = pd.DataFrame(
        {
            "subject_id": [1, 2, 3],
            "hadm_id": [10, 20, 30],
            "icustay_id": [100, 200, 300],
            "los_icu_hours": [28.0, 72.0, 239.5],
            "mort_icu": [False, False, True],
            "mort_hosp": [False, False, True],
        }
    )
    grid = _toy_grid({1: [1.0] * 28, 2: [1.0] * 72, 3: [1.0] * 240})
    cohort = Cohort(table=table, exclusions={}, reasons=pd.Series(dtype=object))
    split = pd.Series({1: "train", 2: "train", 3: "test"})
    s = build_fixed_samples(grid, cohort, split, compute_train_stats(grid, split))
    assert s.ids["icustay_id"].tolist() == [200, 300]
    assert s.labels.loc[0].tolist() == [0, 0, 0, 0]
    assert s.labels.loc[1].tolist() == [1, 1, 1, 1]


def test_fixed_features_ignore_hours_after_24(small_pipeline):
    p = small_pipeline
    split, stats = _prep(p)
    grid = p["grid"]
    base = build_fixed_samples(grid, p["cohort"], split, stats)
    means = grid.matrix("mean")
    rng = np.random.default_rng(0)
    late = grid.index["hours_in"].to_numpy() >= 24
    mutated = means.copy()
    mutated[late] = rng.normal(size=mutated[late].shape) * 50
    after = build_fixed_samples(grid.with_matrix(mutated), p["cohort"], split, stats)
    assert base.features.tobytes() == after.features.tobytes()


def test_dynamic_samples(small_pipeline):
    p = small_pipeline
    split, stats = _prep(p)
    s = build_dynamic_samples(p["grid"], p["igrid"], p["cohort"], split, stats, "vent")
    n_hours = p["grid"].n_hours
    expected = int(np.maximum(n_hours.to_numpy() - 15, 0).sum())
    assert len(s) == expected
    assert s.features.shape[1:] == (WINDOW_HOURS, len(p["grid"].variables), 3)
    assert not np.isnan(s.features).any()
    t = s.ids["t"].to_numpy()
    stay_n = n_hours.reindex(s.ids["icustay_id"]).to_numpy()
    assert (t + WINDOW_HOURS + GAP_HOURS + PREDICTION_HOURS <= stay_n).all()
    # gap: first prediction hour minus last input hour minus one is exactly 6
    last_input = t + WINDOW_HOURS - 1
    first_pred = t + WINDOW_HOURS + GAP_HOURS
    assert ((first_pred - last_input - 1) == GAP_HOURS).all()
    assert set(s.labels["label_vent"]) <= set(WINDOW_CLASSES)
    tod = s.statics["time_of_day"].to_numpy()
    assert ((tod >= 0) & (tod <= 23)).all()
    onehot = s.statics.filter(like="static__age_bucket=")
    assert (onehot.sum(axis=1) == 1).all()
    order = list(zip(s.ids["subject_id"], s.ids["t"]))
    assert order == sorted(order)


def test_dynamic_labels_follow_grid(small_pipeline):
    p = small_pipeline
    split, stats = _prep(p)
    s = build_dynamic_samples(p["grid"], p["igrid"], p["cohort"], split, stats, "vaso")
    f = p["igrid"].to_frame().set_index(["icustay_id", "hours_in"])["vaso"]
    rng = np.random.default_rng(1)
    for i in rng.choice(len(s), size=min(300, len(s)), replace=False):
        sid, t = int(s.ids["icustay_id"].iloc[i]), int(s.ids["t"].iloc[i])
        before = f[(sid, t + 11)]
        window = [f[(sid, t + 12 + k)] for k in range(4)]
        assert s.labels["label_vaso"].iloc[i] == label_window(before, window)


def test_dynamic_all_off_stay_is_stayoff(small_pipeline):
    p = small_pipeline
    split, stats = _prep(p)
    s = build_dynamic_samples(p["grid"], p["igrid"], p["cohort"], split, stats, "vent")
    ever = p["igrid"].to_frame().groupby("icustay_id")["vent"].max()
    off = ever.index[ever == 0]
    labels = s.labels["label_vent"][s.ids["icustay_id"].isin(off).to_numpy()]
    assert len(labels) and set(labels) == {STAY_OFF}


def test_standardized_train_values(small_pipeline):
    p = small_pipeline
    split, stats = _prep(p)
    grid = p["grid"]
    stay_subject = grid.index.drop_duplicates("icustay_id").set_index("icustay_id")["subject_id"]
    cells = grid.cells.loc[grid.cells["icustay_id"].map(stay_subject).map(split).eq("train")]
    for var, g in cells.groupby("variable"):
        if len(g) < 2:
            continue
        z = (g["mean"].to_numpy() - stats.loc[var, "mean"]) / stats.loc[var, "std"]
        assert abs(z.mean()) < 1e-6
        if stats.loc[var, "std"] > 1e-6:
            assert abs(z.std(ddof=1) - 1) < 1e-3
