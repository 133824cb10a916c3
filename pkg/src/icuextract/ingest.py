"""Load and validate the five source tables.

Source files are RFC-4180 CSVs with a mandatory header row.  Timestamps are
timezone-naive ISO-8601 and an empty field means null.  Every table is held as
a pandas DataFrame with fixed dtypes; the column contracts live in ``SCHEMAS``.
"""

from __future__ import annotations

import hashlib
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import pandas as pd

log = logging.getLogger(__name__)

TIME_FORMAT = "%Y-%m-%d %H:%M:%S"

# Canonical order; also the column order of the interventions output.
INTERVENTION_NAMES = (
    "vent",
    "vaso",
    "adenosine",
    "dobutamine",
    "dopamine",
    "epinephrine",
    "isuprel",
    "milrinone",
    "norepinephrine",
    "phenylephrine",
    "vasopressin",
    "colloid_bolus",
    "crystalloid_bolus",
    "nivdurations",
)

# column -> (kind, nullable)
SCHEMAS: dict[str, dict[str, tuple[str, bool]]] = {
    "patients": {
        "subject_id": ("int", False),
        "gender": ("str", False),
        "dob": ("time", False),
        "ethnicity": ("str", False),
        "insurance": ("str", False),
    },
    "admissions": {
        "hadm_id": ("int", False),
        "subject_id": ("int", False),
        "admittime": ("time", False),
        "dischtime": ("time", False),
        "deathtime": ("time", True),
        "admission_type": ("str", False),
        "hospital_expire_flag": ("bool", False),
    },
    "icustays": {
        "icustay_id": ("int", False),
        "hadm_id": ("int", False),
        "subject_id": ("int", False),
        "intime": ("time", False),
        "outtime": ("time", False),
        "first_careunit": ("str", False),
    },
    "events": {
        "subject_id": ("int", False),
        "hadm_id": ("int", False),
        "icustay_id": ("int", True),
        "itemid": ("int", False),
        "charttime": ("time", False),
        "valuenum": ("float", False),
        "valueuom": ("str", True),
    },
    "intervention_events": {
        "icustay_id": ("int", False),
        "name": ("str", False),
        "starttime": ("time", False),
        "endtime": ("time", False),
    },
}

TABLES = tuple(SCHEMAS)


class IngestError(Exception):
    """Base class for source-data problems."""


class MissingFile(IngestError):
    pass


class SchemaMismatch(IngestError):
    pass


class ParseError(IngestError):
    def __init__(self, table: str, row: int, column: str, value: str, reason: str = "unparseable"):
        self.table, self.row, self.column, self.value = table, row, column, value
        super().__init__(f"{table}.csv row {row}, column {column!r}: {reason} value {value!r}")


class IntegrityError(IngestError):
    pass


@dataclass(frozen=True)
class SourceDataset:
    patients: pd.DataFrame
    admissions: pd.DataFrame
    icustays: pd.DataFrame
    events: pd.DataFrame
    intervention_events: pd.DataFrame
    digests: dict[str, str] = field(default_factory=dict, compare=False)

    def table(self, name: str) -> pd.DataFrame:
        return getattr(self, name)

    def counts(self) -> dict[str, int]:
        return {name: len(self.table(name)) for name in TABLES}


def _bad_row(table: str, raw: pd.Series, bad: np.ndarray, column: str, reason: str = "unparseable"):
    pos = int(np.flatnonzero(bad)[0])
    # header is line 1, so data row i (0-based) is line i + 2
    raise ParseError(table, pos + 2, column, raw.iloc[pos], reason)


def _convert_column(table: str, column: str, raw: pd.Series, kind: str, nullable: bool) -> pd.Series:
    empty = (raw == "").to_numpy()
    if empty.any() and not nullable:
        _bad_row(table, raw, empty, column, "missing")
    if kind == "str":
        return raw.where(~empty, None) if nullable else raw
    if kind == "int":
        num = pd.to_numeric(raw.where(~empty, None), errors="coerce")
        bad = (num.isna().to_numpy() & ~empty) | (num.notna().to_numpy() & (num.fillna(0) % 1 != 0).to_numpy())
        if bad.any():
            _bad_row(table, raw, bad, column)
        return num.astype("Int64") if nullable else num.astype("int64")
    if kind == "float":
        num = pd.to_numeric(raw.where(~empty, None), errors="coerce")
        bad = (~np.isfinite(num.to_numpy(dtype=float))) & ~empty
        if bad.any():
            _bad_row(table, raw, bad, column, "non-finite or unparseable")
        return num.astype("float64")
    if kind == "time":
        ts = pd.to_datetime(raw.where(~empty, None), format="ISO8601", errors="coerce")
        bad = ts.isna().to_numpy() & ~empty
        if bad.any():
            _bad_row(table, raw, bad, column)
        return ts.astype("datetime64[ns]")
    if kind == "bool":
        lowered = raw.str.lower()
        truthy = lowered.isin(["1", "true", "t", "y"])
        falsy = lowered.isin(["0", "false", "f", "n"])
        bad = ~(truthy | falsy).to_numpy()
        if bad.any():
            _bad_row(table, raw, bad, column)
        return truthy.astype(bool)
    raise ValueError(kind)


def parse_table(table: str, path: Path) -> pd.DataFrame:
    if not path.is_file():
        raise MissingFile(f"missing source file {path}")
    raw = pd.read_csv(path, dtype=str, keep_default_na=False, na_filter=False, encoding="utf-8")
    schema = SCHEMAS[table]
    got, want = set(raw.columns), set(schema)
    if got != want:
        parts = []
        if want - got:
            parts.append(f"missing columns {sorted(want - got)}")
        if got - want:
            parts.append(f"unexpected columns {sorted(got - want)}")
        raise SchemaMismatch(f"{path.name}: " + "; ".join(parts))
    out = pd.DataFrame(
        {col: _convert_column(table, col, raw[col], kind, nullable) for col, (kind, nullable) in schema.items()}
    )
    _check_row_invariants(table, out)
    return out


def _check_row_invariants(table: str, df: pd.DataFrame) -> None:
    def fail(mask, column, reason):
        mask = np.asarray(mask)
        if mask.any():
            _bad_row(table, df[column].astype(str), mask, column, reason)

    if table == "patients":
        fail(df["subject_id"].duplicated().to_numpy(), "subject_id", "duplicate")
    elif table == "admissions":
        fail((df["admittime"] > df["dischtime"]).to_numpy(), "dischtime", "dischtime before admittime in")
        fail((df["deathtime"] < df["admittime"]).to_numpy(), "deathtime", "deathtime before admittime in")
        fail(df["hadm_id"].duplicated().to_numpy(), "hadm_id", "duplicate")
    elif table == "icustays":
        fail((df["intime"] >= df["outtime"]).to_numpy(), "outtime", "outtime not after intime in")
        fail(df["icustay_id"].duplicated().to_numpy(), "icustay_id", "duplicate")
    elif table == "intervention_events":
        fail((df["starttime"] > df["endtime"]).to_numpy(), "endtime", "endtime before starttime in")
        fail((~df["name"].isin(INTERVENTION_NAMES)).to_numpy(), "name", "unknown intervention")


def check_integrity(ds: SourceDataset) -> None:
    patients = set(ds.patients["subject_id"])
    adm = ds.admissions.set_index("hadm_id")["subject_id"]
    stays = ds.icustays

    def dangling(mask, what):
        mask = np.asarray(mask)
        if mask.any():
            raise IntegrityError(f"{what} ({int(mask.sum())} rows, first at data row {int(np.flatnonzero(mask)[0]) + 1})")

    dangling(~ds.admissions["subject_id"].isin(patients), "admissions reference unknown subject_id")
    dangling(~stays["hadm_id"].isin(adm.index), "icustays reference unknown hadm_id")
    dangling(~stays["subject_id"].isin(patients), "icustays reference unknown subject_id")
    owner = stays["hadm_id"].map(adm)
    dangling(owner.notna() & (owner != stays["subject_id"]), "icustays subject_id disagrees with admission")

    ev = ds.events
    dangling(~ev["hadm_id"].isin(adm.index), "events reference unknown hadm_id")
    dangling(~ev["subject_id"].isin(patients), "events reference unknown subject_id")
    has_stay = ev["icustay_id"].notna()
    dangling(has_stay & ~ev["icustay_id"].isin(stays["icustay_id"]), "events reference unknown icustay_id")
    dangling(
        ~ds.intervention_events["icustay_id"].isin(stays["icustay_id"]),
        "intervention_events reference unknown icustay_id",
    )


def _digest(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def load_source_dataset(directory: str | Path, threads: int = 1) -> SourceDataset:
    """Parse and validate all five source tables under ``directory``.

    Tables are independent until the integrity check, so they may be parsed on
    a thread pool; the result does not depend on ``threads``.
    """
    directory = Path(directory)
    paths = {t: directory / f"{t}.csv" for t in TABLES}
    for p in paths.values():
        if not p.is_file():
            raise MissingFile(f"missing source file {p}")
    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            futures = {t: pool.submit(parse_table, t, p) for t, p in paths.items()}
            tables = {t: f.result() for t, f in futures.items()}
    else:
        tables = {t: parse_table(t, p) for t, p in paths.items()}
    ds = SourceDataset(**tables, digests={t: _digest(p) for t, p in paths.items()})
    check_integrity(ds)
    log.info("loaded source dataset: %s", ds.counts())
    return ds


def attach_stay_to_lab_events(events: pd.DataFrame, stays: pd.DataFrame) -> tuple[pd.DataFrame, int]:
    """Give every event without an ``icustay_id`` the stay that contains it.

    A lab event belongs to the stay of the same admission whose closed
    interval [intime, outtime] contains its charttime.  Events matching no
    stay are dropped; their number is returned alongside the events.  If
    stays of one admission overlap, the earliest-starting one wins.
    """
    missing = events["icustay_id"].isna().to_numpy()
    if not missing.any():
        return events.reset_index(drop=True), 0
    labs = events.loc[missing].drop(columns="icustay_id")
    labs = labs.assign(_row=np.flatnonzero(missing))
    cand = labs.merge(stays[["hadm_id", "icustay_id", "intime", "outtime"]], on="hadm_id", how="inner")
    inside = (cand["intime"] <= cand["charttime"]) & (cand["charttime"] <= cand["outtime"])
    cand = cand.loc[inside].sort_values(["_row", "intime", "icustay_id"], kind="stable")
    cand = cand.drop_duplicates("_row", keep="first")

    out = events.copy()
    assigned = pd.Series(pd.array([pd.NA] * len(events), dtype="Int64"))
    assigned.iloc[cand["_row"].to_numpy()] = cand["icustay_id"].to_numpy()
    out["icustay_id"] = out["icustay_id"].fillna(assigned)
    keep = out["icustay_id"].notna().to_numpy()
    dropped = int((~keep).sum())
    if dropped:
        log.info("dropped %d lab events outside every ICU stay", dropped)
    out = out.loc[keep].reset_index(drop=True)
    out["icustay_id"] = out["icustay_id"].astype("int64")
    return out, dropped


def _format_column(s: pd.Series) -> pd.Series:
    if pd.api.types.is_datetime64_any_dtype(s):
        return s.dt.strftime(TIME_FORMAT).fillna("")
    if pd.api.types.is_bool_dtype(s):
        return s.astype(int).astype(str)
    if pd.api.types.is_float_dtype(s):
        return s.map(lambda v: "" if pd.isna(v) else repr(float(v)))
    return s.astype(object).where(s.notna(), "").astype(str)


def write_table(df: pd.DataFrame, table: str, path: Path) -> None:
    cols = list(SCHEMAS[table])
    formatted = pd.DataFrame({c: _format_column(df[c]) for c in cols})
    formatted.to_csv(path, index=False, lineterminator="\n")


def write_source_dataset(ds: SourceDataset, directory: str | Path) -> None:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    for t in TABLES:
        write_table(ds.table(t), t, directory / f"{t}.csv")
