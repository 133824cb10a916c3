"""Hourly vitals/labs grid.

Each event goes through a fixed chain: resolve its variable, convert units,
apply the outlier policy, bucket into an hour of its stay.  Survivors are
pooled per (stay, hour, variable) into mean/count/std cells.
"""

from __future__ import annotations

import enum
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np
import pandas as pd

from .cohort import Cohort
from .resources import ExtractConfig, ItemMapEntry, VariableRange, resolve_variable

log = logging.getLogger(__name__)

HOUR_NS = 3_600_000_000_000
INDEX_COLUMNS = ("subject_id", "hadm_id", "icustay_id", "hours_in")
CELL_STATS = ("mean", "count", "std")

LB_TO_KG = 0.45359237
OZ_TO_KG = 0.0283495231
IN_TO_CM = 2.54


def _f_to_c(v):
    return (v - 32.0) * 5.0 / 9.0


# unit class -> normalized uom -> converter to canonical (None: already canonical)
UNIT_CONVERSIONS = {
    "weight": {"kg": None, "lb": lambda v: v * LB_TO_KG, "lbs": lambda v: v * LB_TO_KG, "oz": lambda v: v * OZ_TO_KG},
    "height": {"cm": None, "in": lambda v: v * IN_TO_CM, "inch": lambda v: v * IN_TO_CM, "inches": lambda v: v * IN_TO_CM},
    "temperature": {"c": None, "°c": None, "f": _f_to_c, "°f": _f_to_c},
}


class UnknownUnit(ValueError):
    pass


def convert_units(valuenum: float, valueuom: str | None, unit_class: str) -> float:
    """Canonical value (kg, cm, Celsius); empty uom is taken as canonical."""
    if unit_class == "none":
        return valuenum
    uom = (valueuom or "").strip().lower()
    if uom == "":
        return valuenum
    try:
        conv = UNIT_CONVERSIONS[unit_class][uom]
    except KeyError:
        raise UnknownUnit(f"unit {valueuom!r} not recognized for {unit_class}") from None
    return valuenum if conv is None else conv(valuenum)


def _convert_array(values: np.ndarray, uoms: pd.Series, classes: pd.Series) -> tuple[np.ndarray, np.ndarray]:
    """Vectorized convert_units; returns (converted, unit_error mask)."""
    out = values.astype(float, copy=True)
    errors = np.zeros(len(values), dtype=bool)
    cls = classes.to_numpy()
    convertible = cls != "none"
    if not convertible.any():
        return out, errors
    pos = np.flatnonzero(convertible)
    norm = uoms.iloc[pos].fillna("").astype(str).str.strip().str.lower().to_numpy()
    keys = pd.DataFrame({"c": cls[pos], "u": norm})
    for (unit_class, uom), idx in keys.groupby(["c", "u"], sort=True).indices.items():
        rows = pos[idx]
        if uom == "":
            continue
        table = UNIT_CONVERSIONS[unit_class]
        if uom not in table:
            errors[rows] = True
        elif table[uom] is not None:
            out[rows] = table[uom](out[rows])
    return out, errors


class Action(enum.Enum):
    KEEP = "keep"
    CLAMP = "clamp"
    DROP = "drop"


class OutlierDecision(NamedTuple):
    action: Action
    value: float | None


def apply_outlier_policy(value: float, rng: VariableRange | None) -> OutlierDecision:
    """Drop beyond the outlier bounds, clamp into the valid range, else keep."""
    if rng is None:
        return OutlierDecision(Action.KEEP, value)
    if (rng.outlier_low is not None and value < rng.outlier_low) or (
        rng.outlier_high is not None and value > rng.outlier_high
    ):
        return OutlierDecision(Action.DROP, None)
    if rng.valid_low is not None and value < rng.valid_low:
        return OutlierDecision(Action.CLAMP, rng.valid_low)
    if rng.valid_high is not None and value > rng.valid_high:
        return OutlierDecision(Action.CLAMP, rng.valid_high)
    return OutlierDecision(Action.KEEP, value)


KEEP, CLAMP_LOW, CLAMP_HIGH, DROP = 0, 1, 2, 3


def _policy_array(values: np.ndarray, bounds: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Vectorized policy; ``bounds`` has columns (outlier_low, valid_low, valid_high, outlier_high), NaN = absent."""
    olo, vlo, vhi, ohi = (bounds[:, i] for i in range(4))
    code = np.full(len(values), KEEP, dtype=np.int8)
    with np.errstate(invalid="ignore"):
        low = values < vlo
        high = values > vhi
        drop = (values < olo) | (values > ohi)
    code[low] = CLAMP_LOW
    code[high] = CLAMP_HIGH
    code[drop] = DROP
    out = np.where(low, vlo, np.where(high, vhi, values))
    return out, code


def bucket_hour(charttime, intime, n_hours: int) -> int | None:
    """Hour index of ``charttime`` in a stay, or None when off the grid."""
    h = math.floor((pd.Timestamp(charttime) - pd.Timestamp(intime)) / pd.Timedelta(hours=1))
    return h if 0 <= h < n_hours else None


@dataclass
class VariableCounts:
    n_kept: int = 0
    n_clamped_low: int = 0
    n_clamped_high: int = 0
    n_dropped: int = 0
    n_unit_errors: int = 0
    n_out_of_stay: int = 0

    def total(self) -> int:
        return (
            self.n_kept + self.n_clamped_low + self.n_clamped_high + self.n_dropped + self.n_unit_errors + self.n_out_of_stay
        )


@dataclass
class OutlierReport:
    """Disposition of every event offered to aggregation.

    Each event lands in exactly one bucket: ``n_not_in_cohort`` (stay not
    selected), ``n_unmapped``, or one of the per-variable counters.
    """

    per_variable: dict[str, VariableCounts] = field(default_factory=dict)
    n_unmapped: int = 0
    n_not_in_cohort: int = 0
    n_events: int = 0

    def totals(self) -> dict[str, int]:
        keys = ("n_kept", "n_clamped_low", "n_clamped_high", "n_dropped", "n_unit_errors", "n_out_of_stay")
        out = {k: sum(getattr(c, k) for c in self.per_variable.values()) for k in keys}
        out["n_unmapped"] = self.n_unmapped
        out["n_not_in_cohort"] = self.n_not_in_cohort
        out["n_events"] = self.n_events
        return out

    def to_dict(self) -> dict:
        return {
            "totals": self.totals(),
            "per_variable": {v: vars(c) for v, c in sorted(self.per_variable.items())},
        }


@dataclass
class HourlyGrid:
    """Dense (stay, hour) index with sparse per-variable cells.

    ``cells`` is a long table with columns icustay_id, hours_in, variable,
    mean, count, std, sorted by (icustay_id, hours_in, variable).
    """

    index: pd.DataFrame
    variables: list[str]
    cells: pd.DataFrame
    n_hours: pd.Series  # by icustay_id, in index order

    @property
    def offsets(self) -> pd.Series:
        starts = np.concatenate([[0], np.cumsum(self.n_hours.to_numpy())[:-1]])
        return pd.Series(starts, index=self.n_hours.index)

    def row_positions(self, cells: pd.DataFrame | None = None) -> np.ndarray:
        cells = self.cells if cells is None else cells
        return self.offsets.reindex(cells["icustay_id"].to_numpy()).to_numpy() + cells["hours_in"].to_numpy()

    def matrix(self, stat: str = "mean") -> np.ndarray:
        """(rows, variables) array of one cell statistic, NaN where absent."""
        out = np.full((len(self.index), len(self.variables)), np.nan)
        if len(self.cells):
            col = pd.Index(self.variables).get_indexer(self.cells["variable"])
            out[self.row_positions(), col] = self.cells[stat].to_numpy(dtype=float)
        return out

    def select_variables(self, keep) -> HourlyGrid:
        keep = sorted(set(keep) & set(self.variables))
        cells = self.cells.loc[self.cells["variable"].isin(keep)].reset_index(drop=True)
        return HourlyGrid(self.index, keep, cells, self.n_hours)

    def with_matrix(self, means: np.ndarray) -> HourlyGrid:
        """Grid carrying ``means`` as single-observation cells (used for perturbation tests)."""
        rows, cols = np.nonzero(~np.isnan(means))
        idx = self.index.iloc[rows]
        cells = pd.DataFrame(
            {
                "icustay_id": idx["icustay_id"].to_numpy(),
                "hours_in": idx["hours_in"].to_numpy(),
                "variable": np.asarray(self.variables, dtype=object)[cols],
                "mean": means[rows, cols],
                "count": np.ones(len(rows), dtype="int64"),
                "std": np.full(len(rows), np.nan),
            }
        )
        return HourlyGrid(self.index, list(self.variables), cells, self.n_hours)

    def to_wide(self, stats=CELL_STATS) -> pd.DataFrame:
        wide = self.index.copy()
        mats = {s: self.matrix(s) for s in stats}
        for j, var in enumerate(self.variables):
            for s in stats:
                col = mats[s][:, j]
                if s == "count":
                    wide[f"{var}_count"] = pd.array(col, dtype="Float64").astype("Int64")
                else:
                    wide[f"{var}_{s}"] = col
        return wide


def build_index(cohort: Cohort) -> tuple[pd.DataFrame, pd.Series]:
    table = cohort.table
    n_hours = np.ceil(table["los_icu_hours"].to_numpy()).astype("int64")
    rep = np.repeat(np.arange(len(table)), n_hours)
    starts = np.concatenate([[0], np.cumsum(n_hours)[:-1]]) if len(n_hours) else np.zeros(0, dtype="int64")
    hours = np.arange(int(n_hours.sum())) - np.repeat(starts, n_hours)
    index = pd.DataFrame(
        {
            "subject_id": table["subject_id"].to_numpy()[rep],
            "hadm_id": table["hadm_id"].to_numpy()[rep],
            "icustay_id": table["icustay_id"].to_numpy()[rep],
            "hours_in": hours.astype("int64"),
        }
    )
    return index, pd.Series(n_hours, index=table["icustay_id"].to_numpy(), name="n_hours")


def _pool_cells(survivors: pd.DataFrame) -> pd.DataFrame:
    # deterministic reduction order inside every cell
    survivors = survivors.sort_values(
        ["icustay_id", "hours_in", "variable", "charttime", "itemid", "value"], kind="stable"
    )
    g = survivors.groupby(["icustay_id", "hours_in", "variable"], sort=True, observed=True)["value"]
    cells = pd.DataFrame({"mean": g.mean(), "count": g.count().astype("int64"), "std": g.std(ddof=1)}).reset_index()
    cells["variable"] = cells["variable"].astype(object)
    return cells


def aggregate_hourly(
    events: pd.DataFrame,
    cohort: Cohort,
    item_map: list[ItemMapEntry],
    ranges: list[VariableRange],
    config: ExtractConfig | None = None,
    threads: int = 1,
) -> tuple[HourlyGrid, OutlierReport]:
    """Build the hourly grid for the cohort stays.

    ``events`` must already carry an ``icustay_id`` (see
    ``ingest.attach_stay_to_lab_events``).  Stays are reduced independently,
    so ``threads`` changes wall-clock time only.
    """
    config = config or ExtractConfig()
    report = OutlierReport()
    index, n_hours = build_index(cohort)

    stay_ids = cohort.table["icustay_id"].to_numpy()
    in_cohort = events["icustay_id"].isin(stay_ids).to_numpy()
    report.n_not_in_cohort = int((~in_cohort).sum())
    ev = events.loc[in_cohort]
    report.n_events = len(ev)

    by_id = {e.itemid: e for e in item_map}
    itemids = pd.Index(sorted(by_id))
    var_of = pd.Series(
        [resolve_variable(i, by_id, config.group_by_level2) for i in itemids], index=itemids, dtype=object
    )
    group_of = pd.Series([by_id[i].aggregate_group for i in itemids], index=itemids, dtype=object)
    class_of = pd.Series([by_id[i].unit_class for i in itemids], index=itemids, dtype=object)

    variable = ev["itemid"].map(var_of)
    mapped = variable.notna().to_numpy()
    report.n_unmapped = int((~mapped).sum())
    ev = ev.loc[mapped]
    variable = variable[mapped].to_numpy()

    values, unit_err = _convert_array(ev["valuenum"].to_numpy(), ev["valueuom"], ev["itemid"].map(class_of))

    range_rows = {r.variable: r for r in ranges}
    groups = ev["itemid"].map(group_of).to_numpy()
    bounds = np.full((len(ev), 4), np.nan)
    for g in np.unique(groups):
        r = range_rows.get(g)
        if r is None:
            continue
        b = [np.nan if x is None else x for x in (r.outlier_low, r.valid_low, r.valid_high, r.outlier_high)]
        bounds[groups == g] = b
    values, code = _policy_array(values, bounds)
    code[unit_err] = -1

    stay = ev["icustay_id"].to_numpy()
    intime = cohort.table.set_index("icustay_id")["intime"]
    delta = ev["charttime"].to_numpy().astype("int64") - intime.reindex(stay).to_numpy().astype("int64")
    hour = np.floor_divide(delta, HOUR_NS)
    on_grid = (hour >= 0) & (hour < n_hours.reindex(stay).to_numpy())
    survives = (code >= 0) & (code != DROP)
    off_grid = survives & ~on_grid

    tally = pd.DataFrame({"variable": variable, "code": np.where(off_grid, 9, code)})
    counts = tally.groupby(["variable", "code"]).size()
    names = {KEEP: "n_kept", CLAMP_LOW: "n_clamped_low", CLAMP_HIGH: "n_clamped_high", DROP: "n_dropped", -1: "n_unit_errors", 9: "n_out_of_stay"}
    for (var, c), n in counts.items():
        setattr(report.per_variable.setdefault(var, VariableCounts()), names[c], int(n))

    keep = survives & on_grid
    survivors = pd.DataFrame(
        {
            "icustay_id": stay[keep],
            "hours_in": hour[keep],
            "variable": variable[keep],
            "charttime": ev["charttime"].to_numpy()[keep],
            "itemid": ev["itemid"].to_numpy()[keep],
            "value": values[keep],
        }
    )

    if threads > 1 and len(survivors):
        chunks = np.array_split(np.asarray(stay_ids), threads)
        parts = [survivors.loc[survivors["icustay_id"].isin(c)] for c in chunks]
        with ThreadPoolExecutor(max_workers=threads) as pool:
            pooled = list(pool.map(_pool_cells, parts))
        cells = pd.concat(pooled, ignore_index=True)
        cells = cells.sort_values(["icustay_id", "hours_in", "variable"], kind="stable").reset_index(drop=True)
    else:
        cells = _pool_cells(survivors)

    variables = sorted(set(var_of))
    grid = HourlyGrid(index=index, variables=variables, cells=cells, n_hours=n_hours)
    t = report.totals()
    log.info(
        "aggregated %d events: kept %d, clamped %d, dropped %d, unit errors %d, off-grid %d, unmapped %d",
        report.n_events,
        t["n_kept"],
        t["n_clamped_low"] + t["n_clamped_high"],
        t["n_dropped"],
        t["n_unit_errors"],
        t["n_out_of_stay"],
        t["n_unmapped"],
    )
    return grid, report


def presence_percent(grid: HourlyGrid) -> dict[str, float]:
    total = len(grid.index)
    counts = grid.cells.groupby("variable").size() if len(grid.cells) else pd.Series(dtype="int64")
    return {v: (100.0 * int(counts.get(v, 0)) / total if total else 0.0) for v in grid.variables}


def filter_missingness(grid: HourlyGrid, min_percent: float) -> tuple[HourlyGrid, list[str]]:
    """Keep variables present in at least ``min_percent`` percent of index rows."""
    if min_percent <= 0:
        return grid, []
    presence = presence_percent(grid)
    kept = [v for v in grid.variables if presence[v] >= min_percent]
    dropped = [v for v in grid.variables if presence[v] < min_percent]
    return grid.select_variables(kept), dropped


def summarize_missingness(grid: HourlyGrid, variables=None) -> pd.DataFrame:
    """Per-variable presence percentage, mean and std of observed hourly means."""
    variables = list(grid.variables if variables is None else variables)
    presence = presence_percent(grid)
    g = grid.cells.groupby("variable")["mean"]
    means, stds = g.mean(), g.std(ddof=1)
    rows = []
    for v in variables:
        rows.append(
            {
                "variable": v,
                "presence_pct": presence.get(v, 0.0),
                "mean": float(means.get(v, np.nan)),
                "std": float(stds.get(v, np.nan)),
            }
        )
    return pd.DataFrame(rows, columns=["variable", "presence_pct", "mean", "std"])


def _fmt_float(col: np.ndarray) -> np.ndarray:
    out = np.full(len(col), "", dtype=object)
    ok = ~np.isnan(col)
    out[ok] = [repr(x) for x in col[ok].tolist()]
    return out


def write_grid(grid: HourlyGrid, path, stats=CELL_STATS) -> None:
    """Write the wide table; absent cells are empty strings."""
    wide = {c: grid.index[c].to_numpy() for c in INDEX_COLUMNS}
    mats = {s: grid.matrix(s) for s in stats}
    for j, var in enumerate(grid.variables):
        for s in stats:
            col = mats[s][:, j]
            if s == "count":
                out = np.full(len(col), "", dtype=object)
                ok = ~np.isnan(col)
                out[ok] = col[ok].astype("int64").astype(str)
                wide[f"{var}_count"] = out
            else:
                wide[f"{var}_{s}"] = _fmt_float(col)
    pd.DataFrame(wide).to_csv(path, index=False, lineterminator="\n")


def read_grid(path) -> HourlyGrid:
    """Inverse of ``write_grid`` (mean-only tables give count 1, std absent)."""
    wide = pd.read_csv(path, keep_default_na=True)
    index = wide[list(INDEX_COLUMNS)].astype("int64")
    stats_cols = [c for c in wide.columns if c not in INDEX_COLUMNS]
    variables = sorted({c.rsplit("_", 1)[0] for c in stats_cols})
    parts = []
    for var in variables:
        mean = wide[f"{var}_mean"].to_numpy(dtype=float)
        ok = ~np.isnan(mean)
        count = wide[f"{var}_count"].to_numpy(dtype=float)[ok] if f"{var}_count" in wide else np.ones(ok.sum())
        std = wide[f"{var}_std"].to_numpy(dtype=float)[ok] if f"{var}_std" in wide else np.full(ok.sum(), np.nan)
        parts.append(
            pd.DataFrame(
                {
                    "icustay_id": index["icustay_id"].to_numpy()[ok],
                    "hours_in": index["hours_in"].to_numpy()[ok],
                    "variable": var,
                    "mean": mean[ok],
                    "count": count.astype("int64"),
                    "std": std,
                }
            )
        )
    cells = (
        pd.concat(parts, ignore_index=True)
        if parts
        else pd.DataFrame(columns=["icustay_id", "hours_in", "variable", "mean", "count", "std"])
    )
    cells = cells.sort_values(["icustay_id", "hours_in", "variable"], kind="stable").reset_index(drop=True)
    n_hours = index.groupby("icustay_id", sort=False).size()
    return HourlyGrid(index=index, variables=variables, cells=cells, n_hours=n_hours.astype("int64"))
