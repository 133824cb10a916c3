"""Hourly binary intervention indicators."""

from __future__ import annotations

import math

import numpy as np
import pandas as pd

from .cohort import Cohort
from .ingest import INTERVENTION_NAMES
from .timeseries import HOUR_NS, INDEX_COLUMNS, build_index

VASOPRESSORS = (
    "adenosine",
    "dobutamine",
    "dopamine",
    "epinephrine",
    "isuprel",
    "milrinone",
    "norepinephrine",
    "phenylephrine",
    "vasopressin",
)
INTERMITTENT = ("colloid_bolus", "crystalloid_bolus")
CONTINUOUS = tuple(n for n in INTERVENTION_NAMES if n not in INTERMITTENT)


class UnknownInterventionName(ValueError):
    pass


def _hours(t, intime) -> float:
    return (pd.Timestamp(t) - pd.Timestamp(intime)) / pd.Timedelta(hours=1)


def rasterize_continuous(starttime, endtime, intime, n_hours: int) -> set[int]:
    """Hours whose [h, h+1) overlaps [start, end); a zero-length record marks its own hour."""
    s, e = _hours(starttime, intime), _hours(endtime, intime)
    lo = math.floor(s)
    hi = lo if s == e else math.ceil(e) - 1
    return set(range(max(lo, 0), min(hi, n_hours - 1) + 1))


def rasterize_intermittent(starttime, intime, n_hours: int) -> set[int]:
    h = math.floor(_hours(starttime, intime))
    return {h} if 0 <= h < n_hours else set()


class InterventionGrid:
    """Dense 0/1 table on the same (stay, hour) index as the vitals grid."""

    def __init__(self, index: pd.DataFrame, values: np.ndarray, n_hours: pd.Series):
        self.index = index
        self.values = values  # (rows, len(INTERVENTION_NAMES)) uint8
        self.n_hours = n_hours

    def column(self, name: str) -> np.ndarray:
        return self.values[:, INTERVENTION_NAMES.index(name)]

    def to_frame(self) -> pd.DataFrame:
        out = self.index.copy()
        for j, name in enumerate(INTERVENTION_NAMES):
            out[name] = self.values[:, j].astype("int64")
        return out

    def mean_hours(self) -> dict[str, float]:
        """Average on-hours per stay for each column."""
        n = len(self.n_hours)
        return {name: float(self.values[:, j].sum()) / n if n else 0.0 for j, name in enumerate(INTERVENTION_NAMES)}


def build_intervention_grid(events: pd.DataFrame, cohort: Cohort) -> InterventionGrid:
    index, n_hours = build_index(cohort)
    values = np.zeros((len(index), len(INTERVENTION_NAMES)), dtype=np.uint8)

    unknown = ~events["name"].isin(INTERVENTION_NAMES)
    if unknown.any():
        raise UnknownInterventionName(f"unknown intervention name {events.loc[unknown, 'name'].iloc[0]!r}")

    stay_ids = cohort.table["icustay_id"].to_numpy()
    ev = events.loc[events["icustay_id"].isin(stay_ids)]
    if len(ev):
        stay = ev["icustay_id"].to_numpy()
        intime = cohort.table.set_index("icustay_id")["intime"].reindex(stay).to_numpy().astype("int64")
        n = n_hours.reindex(stay).to_numpy()
        offset = pd.Series(np.concatenate([[0], np.cumsum(n_hours.to_numpy())[:-1]]), index=n_hours.index)
        base = offset.reindex(stay).to_numpy()
        s = ev["starttime"].to_numpy().astype("int64") - intime
        e = ev["endtime"].to_numpy().astype("int64") - intime
        col = pd.Index(INTERVENTION_NAMES).get_indexer(ev["name"])

        lo = np.floor_divide(s, HOUR_NS)
        # ceil(e / 1h) - 1 for positive-length intervals, the start hour otherwise
        hi = np.where(s == e, lo, -np.floor_divide(-e, HOUR_NS) - 1)
        intermittent = ev["name"].isin(INTERMITTENT).to_numpy()
        hi = np.where(intermittent, lo, hi)
        lo = np.maximum(lo, 0)
        hi = np.minimum(hi, n - 1)
        length = np.maximum(hi - lo + 1, 0)
        rep = np.repeat(np.arange(len(ev)), length)
        starts = np.concatenate([[0], np.cumsum(length)[:-1]])
        hour = lo[rep] + (np.arange(int(length.sum())) - starts[rep])
        values[base[rep] + hour, col[rep]] = 1

    vaso = INTERVENTION_NAMES.index("vaso")
    drugs = [INTERVENTION_NAMES.index(d) for d in VASOPRESSORS]
    values[:, vaso] |= values[:, drugs].max(axis=1)
    return InterventionGrid(index, values, n_hours)


def write_interventions(grid: InterventionGrid, path) -> None:
    grid.to_frame().to_csv(path, index=False, lineterminator="\n")


def read_interventions(path) -> InterventionGrid:
    df = pd.read_csv(path)
    index = df[list(INDEX_COLUMNS)].astype("int64")
    values = df[list(INTERVENTION_NAMES)].to_numpy().astype(np.uint8)
    n_hours = index.groupby("icustay_id", sort=False).size().astype("int64")
    return InterventionGrid(index, values, n_hours)
