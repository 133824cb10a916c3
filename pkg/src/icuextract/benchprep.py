"""Supervised samples from the hourly grids.

Two prediction frameworks are built here:

* fixed: the first 24 grid hours of every stay with at least 30 hours,
  labelled with mortality and long-LOS outcomes (6 hour gap before the
  30 hour mark);
* dynamic: sliding 6 hour input windows, a 6 hour gap, then a 4 hour
  prediction window labelled Onset / StayOn / Wean / StayOff for one
  intervention.

Time-varying inputs use the (value, mask, delta) imputation triplet.
Values are imputed in raw units and then standardized with training-split
statistics, which is equivalent to standardizing first because every fill
rule is affine-equivariant.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from typing import Iterator

import numpy as np
import pandas as pd

from .cohort import Cohort
from .interventions import InterventionGrid
from .timeseries import HourlyGrid

SPLITS = ("train", "val", "test")
STAT_NAMES = ("value", "mask", "delta")
STD_FLOOR = 1e-6

FIXED_HOURS = 24
FIXED_MIN_HOURS = 30
WINDOW_HOURS = 6
GAP_HOURS = 6
PREDICTION_HOURS = 4

ONSET, STAY_ON, WEAN, STAY_OFF = "Onset", "StayOn", "Wean", "StayOff"
WINDOW_CLASSES = (ONSET, STAY_ON, WEAN, STAY_OFF)
STATIC_FIELDS = ("gender", "age_bucket", "ethnicity", "first_careunit", "admission_type")
AGE_BUCKETS = ("<30", "31-50", "51-70", ">70")


class BadRatios(ValueError):
    pass


def _unit_hash(seed: int, subject_id: int) -> float:
    digest = hashlib.blake2b(f"{seed}:{subject_id}".encode(), digest_size=8).digest()
    return int.from_bytes(digest, "big") / 2.0**64


def split_cohort(subject_ids, ratios=(0.70, 0.15, 0.15), seed: int = 0) -> pd.Series:
    """Assign each subject to train/val/test from a seeded hash of its id."""
    ratios = tuple(float(r) for r in ratios)
    if len(ratios) != 3 or any(r < 0 for r in ratios) or abs(sum(ratios) - 1.0) > 1e-9:
        raise BadRatios(f"ratios must be three nonnegative numbers summing to 1, got {ratios}")
    ids = sorted(set(int(s) for s in subject_ids))
    cut1, cut2 = ratios[0], ratios[0] + ratios[1]
    out = {}
    for sid in ids:
        u = _unit_hash(seed, sid)
        out[sid] = "train" if u < cut1 else ("val" if u < cut2 else "test")
    return pd.Series(out, name="split", dtype=object)


def compute_train_stats(grid: HourlyGrid, split: pd.Series) -> pd.DataFrame:
    """Per-variable mean and sample std of observed hourly means in train stays.

    The std is floored at 1e-6; variables never observed in train get (0, 1).
    """
    stay_subject = grid.index.drop_duplicates("icustay_id").set_index("icustay_id")["subject_id"]
    cells = grid.cells
    in_train = cells["icustay_id"].map(stay_subject).map(split).eq("train")
    g = cells.loc[in_train].groupby("variable")["mean"]
    mean, std = g.mean(), g.std(ddof=1)
    rows = []
    for v in grid.variables:
        if v not in mean.index:
            rows.append((v, 0.0, 1.0))
            continue
        s = std.get(v)
        s = STD_FLOOR if s is None or not np.isfinite(s) or s < STD_FLOOR else float(s)
        rows.append((v, float(mean[v]), s))
    return pd.DataFrame(rows, columns=["variable", "mean", "std"]).set_index("variable")


def simple_impute(raw: np.ndarray, global_means: np.ndarray, sentinel: float) -> tuple[np.ndarray, ...]:
    """(value, mask, delta) for series shaped (..., hours, variables).

    Missing values are forward filled, then backfilled with the series'
    own mean, then with ``global_means`` if the variable never appears.
    ``delta`` counts hours since the last observation and is ``sentinel``
    until the first one.
    """
    raw = np.asarray(raw, dtype=float)
    observed = ~np.isnan(raw)
    hours = raw.shape[-2]
    t = np.arange(hours).reshape((hours, 1))
    last = np.where(observed, t, -1)
    last = np.maximum.accumulate(last, axis=-2)
    seen = last >= 0
    filled = np.take_along_axis(np.where(observed, raw, 0.0), np.maximum(last, 0), axis=-2)

    n_obs = observed.sum(axis=-2, keepdims=True)
    total = np.where(observed, raw, 0.0).sum(axis=-2, keepdims=True)
    with np.errstate(invalid="ignore", divide="ignore"):
        own_mean = np.where(n_obs > 0, total / np.maximum(n_obs, 1), np.asarray(global_means, dtype=float))
    value = np.where(seen, filled, np.broadcast_to(own_mean, raw.shape))
    delta = np.where(seen, t - last, sentinel).astype(float)
    return value, observed.astype(float), delta


def standardize(values: np.ndarray, stats: pd.DataFrame) -> np.ndarray:
    return (values - stats["mean"].to_numpy()) / stats["std"].to_numpy()


def age_bucket(age: float) -> str:
    if age <= 30:
        return "<30"
    if age <= 50:
        return "31-50"
    if age <= 70:
        return "51-70"
    return ">70"


def label_window(state_before: int, window_values) -> str:
    """Class of a prediction window given the state in the hour before it."""
    window = [int(v) for v in window_values]
    if state_before:
        return WEAN if 0 in window else STAY_ON
    return ONSET if 1 in window else STAY_OFF


def feature_columns(variables, hours: int) -> list[str]:
    return [f"{v}__{s}__h{k}" for k in range(hours) for v in variables for s in STAT_NAMES]


@dataclass
class SampleSet:
    """Flat time-varying features plus ids and labels."""

    ids: pd.DataFrame
    features: np.ndarray  # (n, hours, variables, 3) in STAT_NAMES order
    variables: list[str]
    labels: pd.DataFrame
    statics: pd.DataFrame = field(default_factory=pd.DataFrame)

    def __len__(self) -> int:
        return len(self.ids)

    def flat(self) -> np.ndarray:
        n = len(self.ids)
        x = self.features.reshape(n, -1)
        if len(self.statics.columns):
            x = np.hstack([x, self.statics.to_numpy(dtype=float)])
        return x

    def to_frame(self) -> pd.DataFrame:
        hours = self.features.shape[1]
        feats = pd.DataFrame(self.flat()[:, : hours * len(self.variables) * 3], columns=feature_columns(self.variables, hours))
        parts = [self.ids.reset_index(drop=True), feats]
        if len(self.statics.columns):
            parts.append(self.statics.reset_index(drop=True))
        parts.append(self.labels.reset_index(drop=True))
        return pd.concat(parts, axis=1)


def _stay_frame(grid: HourlyGrid, cohort: Cohort, split: pd.Series) -> pd.DataFrame:
    stays = cohort.table.set_index("icustay_id").reindex(grid.n_hours.index)
    return stays.assign(
        n_hours=grid.n_hours.to_numpy(),
        offset=grid.offsets.to_numpy(),
        split=stays["subject_id"].map(split).to_numpy(),
    )


def _triplet(raw, stats, sentinel, delta_stats=None) -> np.ndarray:
    value, mask, delta = simple_impute(raw, stats["mean"].to_numpy(), sentinel)
    value = standardize(value, stats)
    if delta_stats is not None:
        delta = (delta - delta_stats["mean"].to_numpy()) / delta_stats["std"].to_numpy()
    return np.stack([value, mask, delta], axis=-1)


def build_fixed_samples(
    grid: HourlyGrid,
    cohort: Cohort,
    split: pd.Series,
    stats: pd.DataFrame,
    sentinel: float = FIXED_HOURS + 1,
) -> SampleSet:
    """One sample per stay with at least 30 grid hours, features from hours 0-23."""
    stays = _stay_frame(grid, cohort, split)
    stays = stays.loc[stays["n_hours"] >= FIXED_MIN_HOURS]
    means = grid.matrix("mean")
    rows = stays["offset"].to_numpy()[:, None] + np.arange(FIXED_HOURS)
    raw = means[rows] if len(rows) else np.zeros((0, FIXED_HOURS, len(grid.variables)))
    features = _triplet(raw, stats.reindex(grid.variables), sentinel)
    ids = pd.DataFrame(
        {
            "subject_id": stays["subject_id"].to_numpy(),
            "hadm_id": stays["hadm_id"].to_numpy(),
            "icustay_id": stays.index.to_numpy(),
            "split": stays["split"].to_numpy(),
        }
    )
    los = stays["los_icu_hours"].to_numpy()
    labels = pd.DataFrame(
        {
            "mort_icu": stays["mort_icu"].to_numpy().astype(int),
            "mort_hosp": stays["mort_hosp"].to_numpy().astype(int),
            "los3": (los > 72).astype(int),
            "los7": (los > 168).astype(int),
        }
    )
    return SampleSet(ids=ids, features=features, variables=list(grid.variables), labels=labels)


def static_vocabulary(cohort: Cohort) -> dict[str, list[str]]:
    table = cohort.table
    vocab = {f: sorted(table[f].astype(str).unique()) for f in STATIC_FIELDS if f != "age_bucket"}
    vocab["age_bucket"] = list(AGE_BUCKETS)
    return {f: vocab[f] for f in STATIC_FIELDS}


def _one_hot(stays: pd.DataFrame, vocab: dict[str, list[str]]) -> pd.DataFrame:
    cols = {}
    buckets = stays["age"].map(age_bucket)
    for f in STATIC_FIELDS:
        source = buckets if f == "age_bucket" else stays[f].astype(str)
        for cat in vocab[f]:
            cols[f"static__{f}={cat}"] = (source == cat).to_numpy().astype(float)
    return pd.DataFrame(cols, index=stays.index)


def dynamic_anchors(n_hours: int) -> range:
    """Window starts t whose whole input + gap + prediction span fits the stay."""
    return range(max(n_hours - (WINDOW_HOURS + GAP_HOURS + PREDICTION_HOURS) + 1, 0))


def _anchor_rows(stays: pd.DataFrame) -> tuple[np.ndarray, np.ndarray]:
    span = WINDOW_HOURS + GAP_HOURS + PREDICTION_HOURS
    n_anchor = np.maximum(stays["n_hours"].to_numpy() - span + 1, 0)
    which = np.repeat(np.arange(len(stays)), n_anchor)
    starts = np.concatenate([[0], np.cumsum(n_anchor)[:-1]]) if len(n_anchor) else np.zeros(0, dtype=int)
    t = np.arange(int(n_anchor.sum())) - starts[which]
    return which, t


def dynamic_delta_stats(grid: HourlyGrid, cohort: Cohort, split: pd.Series, chunk: int = 500) -> pd.DataFrame:
    """Per-variable mean/std of the raw delta over all train input windows."""
    stays = _stay_frame(grid, cohort, split)
    stays = stays.loc[stays["split"] == "train"]
    observed = ~np.isnan(grid.matrix("mean"))
    V = len(grid.variables)
    total, total_sq, n = np.zeros(V), np.zeros(V), 0
    for lo in range(0, len(stays), chunk):
        part = stays.iloc[lo : lo + chunk]
        which, t = _anchor_rows(part)
        rows = part["offset"].to_numpy()[which][:, None] + t[:, None] + np.arange(WINDOW_HOURS)
        raw = np.where(observed[rows], 0.0, np.nan)
        _, _, delta = simple_impute(raw, np.zeros(V), WINDOW_HOURS + 1)
        total += delta.sum(axis=(0, 1))
        total_sq += (delta**2).sum(axis=(0, 1))
        n += delta.shape[0] * delta.shape[1]
    if n < 2:
        return pd.DataFrame({"mean": np.zeros(V), "std": np.ones(V)}, index=pd.Index(grid.variables, name="variable"))
    mean = total / n
    var = np.maximum(total_sq - n * mean**2, 0.0) / (n - 1)
    std = np.maximum(np.sqrt(var), STD_FLOOR)
    return pd.DataFrame({"mean": mean, "std": std}, index=pd.Index(grid.variables, name="variable"))


def iter_dynamic_samples(
    grid: HourlyGrid,
    interventions: InterventionGrid,
    cohort: Cohort,
    split: pd.Series,
    stats: pd.DataFrame,
    target: str,
    delta_stats: pd.DataFrame | None = None,
    sentinel: float = WINDOW_HOURS + 1,
    chunk: int = 500,
    vocab: dict[str, list[str]] | None = None,
) -> Iterator[SampleSet]:
    """Dynamic samples in stay chunks, ordered by (subject_id, t)."""
    if target not in ("vent", "vaso"):
        raise ValueError(f"target must be 'vent' or 'vaso', got {target!r}")
    stays = _stay_frame(grid, cohort, split)
    means = grid.matrix("mean")
    target_col = interventions.column(target)
    vocab = vocab or static_vocabulary(cohort)
    stats = stats.reindex(grid.variables)
    for lo in range(0, len(stays), chunk):
        part = stays.iloc[lo : lo + chunk]
        which, t = _anchor_rows(part)
        base = part["offset"].to_numpy()[which] + t
        raw = means[base[:, None] + np.arange(WINDOW_HOURS)]
        features = _triplet(raw, stats, sentinel, delta_stats)

        before = target_col[base + WINDOW_HOURS + GAP_HOURS - 1]
        window = target_col[base[:, None] + WINDOW_HOURS + GAP_HOURS + np.arange(PREDICTION_HOURS)]
        labels = np.where(
            before == 1,
            np.where(window.min(axis=1) == 0, WEAN, STAY_ON),
            np.where(window.max(axis=1) == 1, ONSET, STAY_OFF),
        )
        statics = _one_hot(part, vocab).iloc[which].reset_index(drop=True)
        statics["time_of_day"] = ((part["intime"].dt.hour.to_numpy()[which] + t) % 24).astype(float)
        ids = pd.DataFrame(
            {
                "subject_id": part["subject_id"].to_numpy()[which],
                "hadm_id": part["hadm_id"].to_numpy()[which],
                "icustay_id": part.index.to_numpy()[which],
                "t": t,
                "split": part["split"].to_numpy()[which],
            }
        )
        yield SampleSet(
            ids=ids,
            features=features,
            variables=list(grid.variables),
            labels=pd.DataFrame({f"label_{target}": labels}),
            statics=statics,
        )


def build_dynamic_samples(
    grid: HourlyGrid,
    interventions: InterventionGrid,
    cohort: Cohort,
    split: pd.Series,
    stats: pd.DataFrame,
    target: str,
    rescale_delta: bool = True,
    sentinel: float = WINDOW_HOURS + 1,
) -> SampleSet:
    delta_stats = dynamic_delta_stats(grid, cohort, split) if rescale_delta else None
    parts = list(iter_dynamic_samples(grid, interventions, cohort, split, stats, target, delta_stats, sentinel))
    if not parts:
        return SampleSet(
            ids=pd.DataFrame(columns=["subject_id", "hadm_id", "icustay_id", "t", "split"]),
            features=np.zeros((0, WINDOW_HOURS, len(grid.variables), 3)),
            variables=list(grid.variables),
            labels=pd.DataFrame(columns=[f"label_{target}"]),
        )
    return SampleSet(
        ids=pd.concat([p.ids for p in parts], ignore_index=True),
        features=np.concatenate([p.features for p in parts]),
        variables=list(grid.variables),
        labels=pd.concat([p.labels for p in parts], ignore_index=True),
        statics=pd.concat([p.statics for p in parts], ignore_index=True),
    )


def config_hash(obj) -> str:
    return hashlib.sha256(json.dumps(obj, sort_keys=True, default=str).encode()).hexdigest()[:16]
