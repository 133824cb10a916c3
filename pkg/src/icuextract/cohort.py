"""Cohort selection and the static ``patients`` table."""

from __future__ import annotations

from dataclasses import dataclass
from datetime import datetime

import numpy as np
import pandas as pd

from .ingest import TIME_FORMAT, SourceDataset
from .resources import ExtractConfig

# fixed attribution order for exclusion counts
EXCLUSION_REASONS = ("not_first", "age", "min_duration", "max_duration")

COHORT_COLUMNS = (
    "subject_id",
    "hadm_id",
    "icustay_id",
    "age",
    "gender",
    "ethnicity",
    "insurance",
    "admission_type",
    "first_careunit",
    "admittime",
    "dischtime",
    "intime",
    "outtime",
    "mort_icu",
    "mort_hosp",
    "los_icu_hours",
)


class NegativeAge(ValueError):
    pass


def compute_age(dob: datetime, intime: datetime) -> int:
    """Completed years of life at ``intime``.

    >>> compute_age(datetime(1980, 6, 1), datetime(2010, 6, 1))
    30
    """
    if dob > intime:
        raise NegativeAge(f"dob {dob} after intime {intime}")
    years = intime.year - dob.year
    if (intime.month, intime.day, intime.time()) < (dob.month, dob.day, dob.time()):
        years -= 1
    return years


def compute_ages(dob: pd.Series, intime: pd.Series) -> np.ndarray:
    """Vectorized ``compute_age`` over aligned timestamp series."""
    dob = pd.DatetimeIndex(dob)
    intime = pd.DatetimeIndex(intime)
    if (dob > intime).any():
        i = int(np.flatnonzero(dob > intime)[0])
        raise NegativeAge(f"dob {dob[i]} after intime {intime[i]}")

    def calendar_key(t: pd.DatetimeIndex) -> np.ndarray:
        tod = (t - t.normalize()).to_numpy().astype("int64")
        return (t.month.to_numpy().astype("int64") * 32 + t.day.to_numpy()) * 86_400_000_000_000 + tod

    years = intime.year.to_numpy().astype("int64") - dob.year.to_numpy()
    return years - (calendar_key(intime) < calendar_key(dob))


def los_hours(intime: pd.Series, outtime: pd.Series) -> pd.Series:
    return (outtime - intime).dt.total_seconds() / 3600.0


def derive_outcomes(stay, admission) -> tuple[bool, bool, float]:
    """(mort_icu, mort_hosp, los_icu_hours) for one stay and its admission.

    Both arguments only need attribute or key access to the usual fields.
    """
    get = (lambda o, k: o[k]) if isinstance(stay, (dict, pd.Series)) else getattr
    intime, outtime = get(stay, "intime"), get(stay, "outtime")
    death = get(admission, "deathtime")
    has_death = death is not None and not pd.isna(death)
    mort_icu = bool(has_death and intime <= death <= outtime)
    mort_hosp = bool(get(admission, "hospital_expire_flag")) or bool(
        has_death and death <= get(admission, "dischtime")
    )
    los = (outtime - intime).total_seconds() / 3600.0
    return mort_icu, mort_hosp, los


@dataclass
class Cohort:
    table: pd.DataFrame
    exclusions: dict[str, int]
    # one entry per source stay: "included" or the first failing criterion
    reasons: pd.Series

    def __len__(self) -> int:
        return len(self.table)

    @property
    def n_hours(self) -> pd.Series:
        """Dense grid length per stay, indexed by icustay_id."""
        return pd.Series(
            np.ceil(self.table["los_icu_hours"].to_numpy()).astype("int64"),
            index=self.table["icustay_id"].to_numpy(),
            name="n_hours",
        )


def select_cohort(ds: SourceDataset, config: ExtractConfig | None = None) -> Cohort:
    config = config or ExtractConfig()
    stays = ds.icustays.merge(
        ds.admissions.drop(columns="subject_id"), on="hadm_id", how="left", validate="many_to_one"
    ).merge(ds.patients, on="subject_id", how="left", validate="many_to_one")
    stays = stays.sort_values(["subject_id", "intime", "icustay_id"], kind="stable").reset_index(drop=True)

    first = ~stays["subject_id"].duplicated(keep="first")
    age = compute_ages(stays["dob"], stays["intime"])
    los = los_hours(stays["intime"], stays["outtime"])

    checks = {
        "not_first": first.to_numpy(),
        "age": age >= config.min_age,
        "min_duration": (los >= config.min_duration).to_numpy(),
        "max_duration": (los < config.max_duration).to_numpy(),
    }
    reason = np.full(len(stays), "included", dtype=object)
    undecided = np.ones(len(stays), dtype=bool)
    for name in EXCLUSION_REASONS:
        fails = undecided & ~checks[name]
        reason[fails] = name
        undecided &= ~fails
    exclusions = {name: int((reason == name).sum()) for name in EXCLUSION_REASONS}

    kept = stays.loc[undecided].copy()
    kept["age"] = age[undecided]
    kept["los_icu_hours"] = los[undecided]
    death = kept["deathtime"]
    has_death = death.notna()
    kept["mort_icu"] = (has_death & (kept["intime"] <= death) & (death <= kept["outtime"])).astype(bool)
    kept["mort_hosp"] = (kept["hospital_expire_flag"].astype(bool) | (has_death & (death <= kept["dischtime"]))).astype(
        bool
    )
    table = kept[list(COHORT_COLUMNS)].sort_values("subject_id", kind="stable").reset_index(drop=True)
    reasons = pd.Series(reason, index=stays["icustay_id"].to_numpy(), name="reason").sort_index()
    return Cohort(table=table, exclusions=exclusions, reasons=reasons)


def write_patients(cohort: Cohort, path) -> None:
    out = cohort.table.copy()
    for col in ("admittime", "dischtime", "intime", "outtime"):
        out[col] = out[col].dt.strftime(TIME_FORMAT)
    for col in ("mort_icu", "mort_hosp"):
        out[col] = out[col].astype(int)
    out["los_icu_hours"] = out["los_icu_hours"].map(lambda v: repr(float(v)))
    out.to_csv(path, index=False, lineterminator="\n")


def read_patients(path) -> Cohort:
    """Reload a written ``patients`` table as a Cohort (exclusion details are not stored there)."""
    table = pd.read_csv(path, keep_default_na=False, dtype={c: str for c in ("gender", "ethnicity", "insurance", "admission_type", "first_careunit")})
    for col in ("admittime", "dischtime", "intime", "outtime"):
        table[col] = pd.to_datetime(table[col], format="ISO8601")
    for col in ("mort_icu", "mort_hosp"):
        table[col] = table[col].astype(int).astype(bool)
    table["los_icu_hours"] = table["los_icu_hours"].astype(float)
    return Cohort(table=table[list(COHORT_COLUMNS)], exclusions={}, reasons=pd.Series(dtype=object, name="reason"))
