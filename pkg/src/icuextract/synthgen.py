"""Seeded synthetic source tables with a ground-truth sidecar.

The generator decides the fate of every record up front (kept, clamped,
dropped, bad unit, unmapped, off the grid) and derives the expected cohort,
hourly cells, outlier counts, intervention hours and outcome labels from that
plan alone.  None of the pipeline code is used to produce the ground truth.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from datetime import datetime, timedelta
from pathlib import Path

import numpy as np
import pandas as pd

from .ingest import INTERVENTION_NAMES, TIME_FORMAT
from .resources import ItemMapEntry, VariableRange, load_item_map, load_variable_ranges

# canonical-unit (mean, between-patient sd, within-patient sd)
VALUE_MODELS = {
    "anion_gap": (13.0, 3.0, 1.5),
    "bicarbonate": (24.0, 3.0, 1.5),
    "blood_urea_nitrogen": (25.0, 10.0, 3.0),
    "chloride": (104.0, 4.0, 2.0),
    "creatinine": (1.2, 0.5, 0.2),
    "diastolic_blood_pressure": (65.0, 10.0, 7.0),
    "fraction_inspired_oxygen": (0.45, 0.1, 0.05),
    "glascow_coma_scale_total": (12.0, 2.0, 1.0),
    "glucose": (130.0, 30.0, 20.0),
    "heart_rate": (85.0, 10.0, 8.0),
    "height": (170.0, 10.0, 0.5),
    "hematocrit": (31.0, 4.0, 1.5),
    "hemoglobin": (10.5, 1.5, 0.5),
    "lactate": (2.0, 0.8, 0.5),
    "magnesium": (2.0, 0.2, 0.15),
    "mean_blood_pressure": (80.0, 10.0, 7.0),
    "oxygen_saturation": (96.0, 2.0, 1.5),
    "ph": (7.38, 0.05, 0.03),
    "platelets": (220.0, 60.0, 20.0),
    "potassium": (4.1, 0.4, 0.3),
    "respiratory_rate": (18.0, 4.0, 3.0),
    "sodium": (139.0, 3.0, 1.5),
    "systolic_blood_pressure": (120.0, 15.0, 10.0),
    "temperature": (37.0, 0.5, 0.3),
    "weight": (80.0, 15.0, 0.5),
    "white_blood_cell_count": (10.0, 3.0, 1.5),
}

DEFAULT_EVENT_RATES = {
    "heart_rate": 0.7,
    "systolic_blood_pressure": 0.25,
    "diastolic_blood_pressure": 0.25,
    "mean_blood_pressure": 0.25,
    "respiratory_rate": 0.3,
    "oxygen_saturation": 0.3,
    "temperature": 0.12,
    "weight": 0.01,
    "height": 0.005,
    "fraction_inspired_oxygen": 0.05,
    "glascow_coma_scale_total": 0.08,
    "glucose": 0.08,
    "white_blood_cell_count": 0.03,
    "sodium": 0.03,
    "potassium": 0.03,
    "creatinine": 0.03,
    "blood_urea_nitrogen": 0.03,
    "hemoglobin": 0.03,
    "hematocrit": 0.03,
    "platelets": 0.03,
    "chloride": 0.03,
    "bicarbonate": 0.03,
    "lactate": 0.015,
    "ph": 0.04,
    "anion_gap": 0.02,
    "magnesium": 0.02,
}

# name -> (mean episodes per stay, mean duration hours); boluses ignore duration
DEFAULT_INTERVENTIONS = {
    "vent": (1.0, 25.0),
    "vaso": (0.03, 6.0),
    "adenosine": (0.01, 0.5),
    "dobutamine": (0.05, 8.0),
    "dopamine": (0.08, 10.0),
    "epinephrine": (0.06, 8.0),
    "isuprel": (0.01, 2.0),
    "milrinone": (0.05, 15.0),
    "norepinephrine": (0.2, 12.0),
    "phenylephrine": (0.25, 14.0),
    "vasopressin": (0.06, 14.0),
    "colloid_bolus": (0.15, 0.0),
    "crystalloid_bolus": (1.2, 0.0),
    "nivdurations": (0.35, 30.0),
}

CANONICAL_UOM = {"none": "", "weight": "kg", "height": "cm", "temperature": "C"}
ALT_UNITS = {
    "weight": (("lb", 1 / 0.45359237), ("lbs", 1 / 0.45359237), ("oz", 1 / 0.0283495231)),
    "height": (("in", 1 / 2.54), ("inches", 1 / 2.54)),
    "temperature": (("F", None), ("°F", None)),
}
BAD_UOM = "furlongs"
UNMAPPED_ITEMID_BASE = 990_000

GENDERS = ("F", "M")
ETHNICITIES = ("ASIAN", "BLACK", "HISPANIC", "OTHER", "WHITE")
ETHNICITY_P = (0.03, 0.08, 0.03, 0.15, 0.71)
INSURANCES = ("Government", "Medicaid", "Medicare", "Private", "Self Pay")
INSURANCE_P = (0.03, 0.08, 0.53, 0.35, 0.01)
ADMISSION_TYPES = ("ELECTIVE", "EMERGENCY", "URGENT")
ADMISSION_P = (0.17, 0.80, 0.03)
CAREUNITS = ("CCU", "CSRU", "MICU", "SICU", "TSICU")
CAREUNIT_P = (0.15, 0.20, 0.36, 0.16, 0.13)


class BadParams(ValueError):
    pass


@dataclass
class GenParams:
    n_subjects: int = 1000
    repeat_stay_fraction: float = 0.15
    same_admission_repeat_fraction: float = 0.5
    child_fraction: float = 0.03
    masked_age_fraction: float = 0.05
    short_stay_fraction: float = 0.05
    long_stay_fraction: float = 0.03
    los_median_hours: float = 36.0
    los_sigma: float = 0.8
    event_rates: dict[str, float] = field(default_factory=lambda: dict(DEFAULT_EVENT_RATES))
    event_rate_scale: float = 1.0
    clamp_rate: float = 0.005
    drop_rate: float = 0.002
    unit_variant_fraction: float = 0.3
    unit_error_rate: float = 0.001
    unmapped_rate: float = 0.002
    off_grid_rate: float = 0.005
    interventions: dict[str, tuple[float, float]] = field(default_factory=lambda: dict(DEFAULT_INTERVENTIONS))
    zero_length_fraction: float = 0.05
    mortality_icu_rate: float = 0.10
    mortality_post_icu_rate: float = 0.04
    mortality_signal: float = 2.0
    seed: int = 0

    def __post_init__(self):
        rates = [
            self.repeat_stay_fraction,
            self.same_admission_repeat_fraction,
            self.child_fraction,
            self.masked_age_fraction,
            self.short_stay_fraction,
            self.long_stay_fraction,
            self.clamp_rate,
            self.drop_rate,
            self.unit_variant_fraction,
            self.unit_error_rate,
            self.unmapped_rate,
            self.off_grid_rate,
            self.zero_length_fraction,
            self.mortality_icu_rate,
            self.mortality_post_icu_rate,
        ]
        if any(not 0.0 <= r <= 1.0 for r in rates):
            raise BadParams("all rates and fractions must lie in [0, 1]")
        if self.child_fraction + self.masked_age_fraction > 1 or self.short_stay_fraction + self.long_stay_fraction > 1:
            raise BadParams("category fractions exceed 1")
        fates = self.clamp_rate + self.drop_rate + self.unit_error_rate + self.unmapped_rate + self.off_grid_rate
        if fates > 1:
            raise BadParams("event fate rates exceed 1")
        if self.mortality_icu_rate + self.mortality_post_icu_rate > 1:
            raise BadParams("mortality rates exceed 1")


@dataclass
class GroundTruth:
    """Expected pipeline results under the default extraction keywords."""

    stays: pd.DataFrame  # icustay_id, subject_id, hadm_id, age, los_hours, n_hours, reason, mort_icu, mort_hosp
    cells: pd.DataFrame  # icustay_id, hours_in, variable, mean, count, std
    counts: dict[str, dict[str, int]]  # per variable
    n_unmapped: int
    n_lab_unattached: int
    n_not_in_cohort: int
    intervention_hours: pd.DataFrame  # icustay_id, name, hours_in (vaso already OR-ed)
    params: dict

    @property
    def cohort_ids(self) -> list[int]:
        return sorted(self.stays.loc[self.stays["reason"] == "included", "icustay_id"].tolist())

    def exclusion_counts(self) -> dict[str, int]:
        vc = self.stays["reason"].value_counts()
        return {r: int(vc.get(r, 0)) for r in ("not_first", "age", "min_duration", "max_duration")}

    def totals(self) -> dict[str, int]:
        keys = ("n_kept", "n_clamped_low", "n_clamped_high", "n_dropped", "n_unit_errors", "n_out_of_stay")
        out = {k: sum(c[k] for c in self.counts.values()) for k in keys}
        out["n_unmapped"] = self.n_unmapped
        return out

    def presence(self) -> dict[str, float]:
        rows = int(self.stays.loc[self.stays["reason"] == "included", "n_hours"].sum())
        per = self.cells.groupby("variable").size()
        return {v: 100.0 * int(per.get(v, 0)) / rows for v in sorted(VALUE_MODELS)}

    def intervention_mean_hours(self) -> dict[str, float]:
        n = len(self.cohort_ids)
        per = self.intervention_hours.groupby("name").size()
        return {name: int(per.get(name, 0)) / n for name in INTERVENTION_NAMES}

    def write(self, directory: str | Path) -> None:
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        summary = {
            "params": self.params,
            "config": {"min_age": 15, "min_duration": 12, "max_duration": 240, "group_by_level2": True},
            "cohort_size": len(self.cohort_ids),
            "exclusions": self.exclusion_counts(),
            "outlier_counts": self.counts,
            "outlier_totals": self.totals(),
            "n_lab_unattached": self.n_lab_unattached,
            "n_not_in_cohort": self.n_not_in_cohort,
            "presence_pct": self.presence(),
            "intervention_mean_hours": self.intervention_mean_hours(),
            "files": {
                "stays": "ground_truth_stays.csv",
                "cells": "ground_truth_cells.csv",
                "interventions": "ground_truth_interventions.csv",
            },
        }
        (directory / "ground_truth.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
        self.stays.to_csv(directory / "ground_truth_stays.csv", index=False, lineterminator="\n")
        cells = self.cells.copy()
        for c in ("mean", "std"):
            cells[c] = [("" if math.isnan(x) else repr(x)) for x in cells[c].tolist()]
        cells.to_csv(directory / "ground_truth_cells.csv", index=False, lineterminator="\n")
        self.intervention_hours.to_csv(directory / "ground_truth_interventions.csv", index=False, lineterminator="\n")


def _fmt_times(seconds: np.ndarray) -> np.ndarray:
    text = np.datetime_as_string(seconds.astype("datetime64[s]"), unit="s")
    return np.char.replace(text, "T", " ")


def _years_before(t: datetime, years: int, extra_days: int) -> datetime:
    try:
        anniversary = t.replace(year=t.year - years)
    except ValueError:  # Feb 29 in a non-leap target year
        anniversary = t.replace(year=t.year - years, day=28)
    return anniversary - timedelta(days=extra_days)


def _clamp_zone(r: VariableRange | None, side: str):
    """Open interval of values that get clamped on ``side``, or None."""
    if r is None:
        return None
    if side == "high":
        if r.valid_high is None or (r.outlier_high is not None and r.outlier_high <= r.valid_high):
            return None
        hi = r.outlier_high if r.outlier_high is not None else r.valid_high + max(abs(r.valid_high), 1.0)
        return r.valid_high, hi
    if r.valid_low is None or (r.outlier_low is not None and r.outlier_low >= r.valid_low):
        return None
    lo = r.outlier_low if r.outlier_low is not None else r.valid_low - max(abs(r.valid_low), 1.0)
    return lo, r.valid_low


def _drop_zone(r: VariableRange | None):
    """(side, bound) pairs beyond which values are discarded."""
    if r is None:
        return []
    out = []
    if r.outlier_high is not None:
        out.append(("high", r.outlier_high))
    if r.outlier_low is not None:
        out.append(("low", r.outlier_low))
    return out


def generate(
    params: GenParams,
    item_map: list[ItemMapEntry] | None = None,
    ranges: list[VariableRange] | None = None,
) -> tuple[dict[str, pd.DataFrame], GroundTruth]:
    """Source tables (as string-valued DataFrames) plus their ground truth."""
    item_map = item_map if item_map is not None else load_item_map()
    ranges = ranges if ranges is not None else load_variable_ranges()
    rng = np.random.default_rng(params.seed)
    range_of = {r.variable: r for r in ranges}
    items_by_group: dict[str, list[ItemMapEntry]] = {}
    for e in item_map:
        items_by_group.setdefault(e.aggregate_group, []).append(e)
    variables = sorted(v for v in items_by_group if v in VALUE_MODELS and params.event_rates.get(v, 0) > 0)

    # subjects
    n = params.n_subjects
    subject_ids = np.arange(1, n + 1) * 7 + 10_000
    gender = rng.choice(GENDERS, size=n, p=(0.43, 0.57))
    ethnicity = rng.choice(ETHNICITIES, size=n, p=ETHNICITY_P)
    insurance = rng.choice(INSURANCES, size=n, p=INSURANCE_P)
    u_age = rng.random(n)
    age = rng.integers(15, 90, size=n)
    age = np.where(u_age < params.child_fraction, rng.integers(1, 15, size=n), age)
    age = np.where(
        (u_age >= params.child_fraction) & (u_age < params.child_fraction + params.masked_age_fraction), 300, age
    )
    age_extra_days = rng.integers(1, 361, size=n)
    n_stays = 1 + (rng.random(n) < params.repeat_stay_fraction)
    same_adm = rng.random(n) < params.same_admission_repeat_fraction
    base = np.datetime64("2100-01-01T00:00:00", "s").astype("int64")
    first_in = base + rng.integers(0, 80 * 365 * 86400, size=n)

    def draw_los(k: int) -> np.ndarray:
        u = rng.random(k)
        normal = np.exp(np.log(params.los_median_hours) + params.los_sigma * rng.standard_normal(k))
        normal = np.clip(normal, 12.0, 239.9)
        short = rng.uniform(1.0, 11.9, size=k)
        long_ = rng.uniform(240.0, 400.0, size=k)
        hours = np.where(
            u < params.short_stay_fraction,
            short,
            np.where(u < params.short_stay_fraction + params.long_stay_fraction, long_, normal),
        )
        return np.round(hours * 3600).astype("int64")

    # death plan only for single-stay subjects
    u_death = rng.random(n)
    single = n_stays == 1
    icu_death = single & (u_death < params.mortality_icu_rate)
    post_death = single & ~icu_death & (u_death < params.mortality_icu_rate + params.mortality_post_icu_rate)

    stays, admissions, patients = [], [], []
    next_hadm, next_stay = 100_000, 200_000
    for i in range(n):
        sid = int(subject_ids[i])
        los = draw_los(int(n_stays[i]))
        intime = int(first_in[i])
        dob = _years_before(
            datetime(1970, 1, 1) + timedelta(seconds=intime), int(age[i]), int(age_extra_days[i])
        )
        patients.append((sid, gender[i], dob, ethnicity[i], insurance[i]))
        adm_stays = [[]]
        for k in range(int(n_stays[i])):
            if k > 0:
                prev_out = stays[-1]["outtime"]
                if same_adm[i]:
                    intime = prev_out + int(rng.integers(2 * 3600, 6 * 3600))
                else:
                    intime = prev_out + int(rng.integers(30, 700)) * 86400
                    adm_stays.append([])
            stay = {
                "icustay_id": next_stay,
                "subject_id": sid,
                "intime": intime,
                "outtime": intime + int(los[k]),
                "los_sec": int(los[k]),
                "first": k == 0,
                "age": int(age[i]) if k == 0 else None,
                "first_careunit": rng.choice(CAREUNITS, p=CAREUNIT_P),
                "mort_icu": bool(icu_death[i]),
                "mort_hosp": bool(icu_death[i] or post_death[i]),
            }
            next_stay += 1
            stays.append(stay)
            adm_stays[-1].append(stay)
        for group in adm_stays:
            hadm = next_hadm
            next_hadm += 1
            admittime = group[0]["intime"] - int(rng.integers(0, 24 * 3600))
            last_out = group[-1]["outtime"]
            deathtime = None
            if icu_death[i]:
                deathtime = max(last_out - int(rng.integers(0, 1800)), group[-1]["intime"])
                dischtime = last_out
            elif post_death[i]:
                deathtime = last_out + int(rng.integers(3600, 5 * 86400))
                dischtime = deathtime
            else:
                dischtime = last_out + int(rng.integers(3600, 5 * 86400))
            admissions.append(
                {
                    "hadm_id": hadm,
                    "subject_id": sid,
                    "admittime": admittime,
                    "dischtime": dischtime,
                    "deathtime": deathtime,
                    "admission_type": rng.choice(ADMISSION_TYPES, p=ADMISSION_P),
                    "hospital_expire_flag": int(deathtime is not None),
                }
            )
            for s in group:
                s["hadm_id"] = hadm

    st = pd.DataFrame(stays)
    st["n_hours"] = -(-st["los_sec"] // 3600)
    reason = np.where(
        ~st["first"],
        "not_first",
        np.where(
            st["age"].fillna(0) < 15,
            "age",
            np.where(st["los_sec"] < 12 * 3600, "min_duration", np.where(st["los_sec"] >= 240 * 3600, "max_duration", "included")),
        ),
    )
    st["reason"] = reason
    included = st["reason"].to_numpy() == "included"

    events, truth_cells, counts, n_unmapped, n_unattached, n_not_in_cohort = _generate_events(
        params, rng, st, included, variables, items_by_group, range_of
    )
    iv_events, iv_hours = _generate_interventions(params, rng, st, included)

    tables = {
        "patients": pd.DataFrame(
            {
                "subject_id": [p[0] for p in patients],
                "gender": [p[1] for p in patients],
                "dob": [p[2].strftime(TIME_FORMAT) for p in patients],
                "ethnicity": [p[3] for p in patients],
                "insurance": [p[4] for p in patients],
            }
        ),
        "admissions": pd.DataFrame(
            {
                "hadm_id": [a["hadm_id"] for a in admissions],
                "subject_id": [a["subject_id"] for a in admissions],
                "admittime": _fmt_times(np.array([a["admittime"] for a in admissions])),
                "dischtime": _fmt_times(np.array([a["dischtime"] for a in admissions])),
                "deathtime": [
                    "" if a["deathtime"] is None else str(_fmt_times(np.array([a["deathtime"]]))[0]) for a in admissions
                ],
                "admission_type": [a["admission_type"] for a in admissions],
                "hospital_expire_flag": [a["hospital_expire_flag"] for a in admissions],
            }
        ),
        "icustays": pd.DataFrame(
            {
                "icustay_id": st["icustay_id"],
                "hadm_id": st["hadm_id"],
                "subject_id": st["subject_id"],
                "intime": _fmt_times(st["intime"].to_numpy()),
                "outtime": _fmt_times(st["outtime"].to_numpy()),
                "first_careunit": st["first_careunit"],
            }
        ),
        "events": events,
        "intervention_events": iv_events,
    }
    truth_stays = pd.DataFrame(
        {
            "icustay_id": st["icustay_id"],
            "subject_id": st["subject_id"],
            "hadm_id": st["hadm_id"],
            "age": st["age"].astype("Int64"),
            "los_hours": st["los_sec"] / 3600.0,
            "n_hours": st["n_hours"],
            "reason": st["reason"],
            "mort_icu": st["mort_icu"].astype(int),
            "mort_hosp": st["mort_hosp"].astype(int),
        }
    )
    truth = GroundTruth(
        stays=truth_stays,
        cells=truth_cells,
        counts=counts,
        n_unmapped=n_unmapped,
        n_lab_unattached=n_unattached,
        n_not_in_cohort=n_not_in_cohort,
        intervention_hours=iv_hours,
        params=asdict(params),
    )
    return tables, truth


def _generate_events(params, rng, st, included, variables, items_by_group, range_of):
    S = len(st)
    los_h = st["los_sec"].to_numpy() / 3600.0
    rates = np.array([params.event_rates.get(v, 0.0) * params.event_rate_scale for v in variables])
    n_per = rng.poisson(np.outer(los_h, rates))  # (S, V)
    stay_idx, var_idx = np.nonzero(n_per)
    reps = n_per[stay_idx, var_idx]
    e_stay = np.repeat(stay_idx, reps)
    e_var = np.repeat(var_idx, reps)
    E = len(e_stay)

    # per (stay, variable) level, mortality shift on heart rate
    models = np.array([VALUE_MODELS[v] for v in variables])
    level = models[:, 0][None, :] + models[:, 1][None, :] * rng.standard_normal((S, len(variables)))
    if "heart_rate" in variables:
        hr = variables.index("heart_rate")
        level[:, hr] += 20.0 * params.mortality_signal * st["mort_icu"].to_numpy()
    value = level[e_stay, e_var] + models[e_var, 2] * rng.standard_normal(E)

    # keep planned normal values strictly inside the valid range
    lo_b = np.array([(range_of[v].valid_low if v in range_of and range_of[v].valid_low is not None else -np.inf) for v in variables])
    hi_b = np.array([(range_of[v].valid_high if v in range_of and range_of[v].valid_high is not None else np.inf) for v in variables])
    span = np.where(np.isfinite(hi_b - lo_b), hi_b - lo_b, 1.0)
    value = np.clip(value, (lo_b + 0.01 * span)[e_var], (hi_b - 0.01 * span)[e_var])

    # fates
    p = params
    cuts = np.cumsum([p.clamp_rate / 2, p.clamp_rate / 2, p.drop_rate, p.unit_error_rate, p.unmapped_rate, p.off_grid_rate])
    fate = np.searchsorted(cuts, rng.random(E), side="right")  # 0 clamp_low .. 5 off_grid, 6 normal
    fate_names = np.array(["clamp_low", "clamp_high", "drop", "unit_error", "unmapped", "off_grid", "normal"])[fate]

    u = rng.uniform(0.1, 0.9, size=E)
    for j, v in enumerate(variables):
        r = range_of.get(v)
        on_v = e_var == j
        for side in ("low", "high"):
            sel = on_v & (fate_names == f"clamp_{side}")
            zone = _clamp_zone(r, side)
            if zone is None:
                fate_names[sel] = "normal"
            else:
                value[sel] = zone[0] + u[sel] * (zone[1] - zone[0])
        sel = on_v & (fate_names == "drop")
        zones = _drop_zone(r)
        if not zones:
            fate_names[sel] = "normal"
        else:
            pick = rng.integers(0, len(zones), size=int(sel.sum()))
            width = max(span[j], 1.0)
            for k, (side, bound) in enumerate(zones):
                rows = np.flatnonzero(sel)[pick == k]
                value[rows] = bound + (1 if side == "high" else -1) * (0.1 + u[rows]) * width

    # itemid choice, with unit-class constraint for unit errors
    itemid = np.empty(E, dtype="int64")
    unit_class = np.empty(E, dtype=object)
    for j, v in enumerate(variables):
        entries = items_by_group[v]
        rows = np.flatnonzero(e_var == j)
        pick = rng.integers(0, len(entries), size=len(rows))
        itemid[rows] = np.array([e.itemid for e in entries])[pick]
        unit_class[rows] = np.array([e.unit_class for e in entries], dtype=object)[pick]
    fate_names[(fate_names == "unit_error") & (unit_class == "none")] = "normal"
    unm = fate_names == "unmapped"
    itemid[unm] = UNMAPPED_ITEMID_BASE + rng.integers(0, 50, size=int(unm.sum()))
    unit_class[unm] = "none"
    is_lab = (itemid >= 50_000) & (itemid < 60_000)

    # timing, in integer seconds from intime
    los_sec = st["los_sec"].to_numpy()[e_stay]
    n_hours = st["n_hours"].to_numpy()[e_stay]
    offset = np.minimum((rng.random(E) * los_sec).astype("int64"), los_sec - 1)
    off = fate_names == "off_grid"
    before = rng.random(E) < 0.5
    jitter = rng.integers(1, 3601, size=E)
    offset = np.where(off & (before | is_lab), -jitter, offset)
    offset = np.where(off & ~before & ~is_lab, n_hours * 3600 + jitter - 1, offset)
    charttime = st["intime"].to_numpy()[e_stay] + offset

    # emitted units
    uom = np.array([CANONICAL_UOM[c] for c in unit_class], dtype=object)
    emitted = value.copy()
    variant = rng.random(E) < p.unit_variant_fraction
    blank = rng.random(E) < 0.1
    alt_pick = rng.integers(0, 3, size=E)
    for cls, alts in ALT_UNITS.items():
        rows = np.flatnonzero((unit_class == cls) & variant)
        choice = alt_pick[rows] % len(alts)
        for k, (name, factor) in enumerate(alts):
            r = rows[choice == k]
            uom[r] = name
            emitted[r] = value[r] * 9.0 / 5.0 + 32.0 if factor is None else value[r] * factor
    uom[(unit_class != "none") & ~variant & blank] = ""
    uom[fate_names == "unit_error"] = BAD_UOM
    uom[unit_class == "none"] = np.where(rng.random(int((unit_class == "none").sum())) < 0.5, "", "units")

    stay_id = st["icustay_id"].to_numpy()[e_stay]
    events = pd.DataFrame(
        {
            "subject_id": st["subject_id"].to_numpy()[e_stay],
            "hadm_id": st["hadm_id"].to_numpy()[e_stay],
            "icustay_id": np.where(is_lab, "", stay_id.astype(str)),
            "itemid": itemid,
            "charttime": _fmt_times(charttime),
            "valuenum": [repr(x) for x in emitted.tolist()],
            "valueuom": uom,
            "_t": charttime,
        }
    )
    events = events.sort_values(["subject_id", "_t", "itemid"], kind="stable").drop(columns="_t").reset_index(drop=True)

    # ground truth, from the plan only
    cohort_event = included[e_stay]
    unattached = off & is_lab
    n_unattached = int(unattached.sum())
    n_not_in_cohort = int((~cohort_event & ~unattached).sum())
    counted = cohort_event & ~unattached
    counts = {}
    label = {
        "normal": "n_kept",
        "clamp_low": "n_clamped_low",
        "clamp_high": "n_clamped_high",
        "drop": "n_dropped",
        "unit_error": "n_unit_errors",
        "off_grid": "n_out_of_stay",
    }
    for j, v in enumerate(variables):
        sel = counted & (e_var == j)
        counts[v] = {name: int((sel & (fate_names == f)).sum()) for f, name in label.items()}
    n_unmapped = int((counted & unm).sum())

    final = value.copy()
    for j, v in enumerate(variables):
        r = range_of.get(v)
        if r is None:
            continue
        lo_sel = (e_var == j) & (fate_names == "clamp_low")
        hi_sel = (e_var == j) & (fate_names == "clamp_high")
        final[lo_sel] = r.valid_low
        final[hi_sel] = r.valid_high
    surv = counted & np.isin(fate_names, ["normal", "clamp_low", "clamp_high"])
    cells = _truth_cells(stay_id[surv], offset[surv] // 3600, np.asarray(variables, dtype=object)[e_var[surv]], final[surv])
    return events, cells, counts, n_unmapped, n_unattached, n_not_in_cohort


def _truth_cells(stay, hour, variable, value) -> pd.DataFrame:
    """Per-cell mean, count and two-pass sample std via sort + reduceat."""
    if len(stay) == 0:
        return pd.DataFrame(columns=["icustay_id", "hours_in", "variable", "mean", "count", "std"])
    order = np.lexsort((variable, hour, stay))
    stay, hour, variable, value = stay[order], hour[order], variable[order], value[order]
    change = np.ones(len(stay), dtype=bool)
    change[1:] = (stay[1:] != stay[:-1]) | (hour[1:] != hour[:-1]) | (variable[1:] != variable[:-1])
    starts = np.flatnonzero(change)
    count = np.diff(np.append(starts, len(stay)))
    mean = np.add.reduceat(value, starts) / count
    dev = value - np.repeat(mean, count)
    ss = np.add.reduceat(dev * dev, starts)
    with np.errstate(invalid="ignore", divide="ignore"):
        std = np.where(count > 1, np.sqrt(ss / np.maximum(count - 1, 1)), np.nan)
    return pd.DataFrame(
        {
            "icustay_id": stay[starts].astype("int64"),
            "hours_in": hour[starts].astype("int64"),
            "variable": variable[starts],
            "mean": mean,
            "count": count.astype("int64"),
            "std": std,
        }
    )


def _generate_interventions(params, rng, st, included):
    in_cohort = dict(zip(st["icustay_id"].tolist(), included.tolist()))
    rows = []
    hours = []
    for s in st.itertuples(index=False):
        n_hours = int(s.n_hours)
        for name, (rate, mean_dur) in params.interventions.items():
            k = int(rng.poisson(rate))
            for _ in range(k):
                if name in ("colloid_bolus", "crystalloid_bolus"):
                    start = int(rng.integers(-3600, s.los_sec + 3600))
                    end = start
                    hit = [start // 3600] if 0 <= start < n_hours * 3600 else []
                else:
                    start = int(rng.integers(-2 * 3600, s.los_sec))
                    dur = 0 if rng.random() < params.zero_length_fraction else int(rng.exponential(mean_dur) * 3600)
                    end = start + dur
                    if dur == 0:
                        hit = [start // 3600] if 0 <= start < n_hours * 3600 else []
                    else:
                        hit = [h for h in range(n_hours) if h * 3600 < end and (h + 1) * 3600 > start]
                rows.append((s.icustay_id, name, s.intime + start, s.intime + end))
                if in_cohort[s.icustay_id]:
                    hours.extend((s.icustay_id, name, h) for h in hit)
    ev = pd.DataFrame(rows, columns=["icustay_id", "name", "start", "end"])
    iv_events = pd.DataFrame(
        {
            "icustay_id": ev["icustay_id"],
            "name": ev["name"],
            "starttime": _fmt_times(ev["start"].to_numpy()),
            "endtime": _fmt_times(ev["end"].to_numpy()),
        }
    )
    hrs = pd.DataFrame(hours, columns=["icustay_id", "name", "hours_in"]).drop_duplicates()
    drugs = {"adenosine", "dobutamine", "dopamine", "epinephrine", "isuprel", "milrinone", "norepinephrine", "phenylephrine", "vasopressin"}
    vaso = hrs.loc[hrs["name"].isin(drugs)].assign(name="vaso")
    hrs = pd.concat([hrs, vaso]).drop_duplicates()
    hrs = hrs.sort_values(["icustay_id", "name", "hours_in"]).reset_index(drop=True)
    return iv_events, hrs


def write_tables(tables: dict[str, pd.DataFrame], directory: str | Path) -> None:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    for name, df in tables.items():
        df.to_csv(directory / f"{name}.csv", index=False, lineterminator="\n")


def generate_to(directory: str | Path, params: GenParams, truth_dir: str | Path | None = None) -> GroundTruth:
    tables, truth = generate(params)
    write_tables(tables, directory)
    truth.write(truth_dir if truth_dir is not None else directory)
    return truth
