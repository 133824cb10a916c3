import csv
from pathlib import Path

import pytest

from icuextract.ingest import SCHEMAS


def write_csv(path: Path, columns, rows) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(columns)
        for row in rows:
            w.writerow(["" if row.get(c) is None else row.get(c) for c in columns])


class SourceBuilder:
    """Builds a tiny, hand-written source directory one stay at a time."""

    def __init__(self):
        self.rows = {t: [] for t in SCHEMAS}

    def patient(self, subject_id, dob="2050-01-01 00:00:00", gender="F", ethnicity="WHITE", insurance="Medicare"):
        self.rows["patients"].append(
            dict(subject_id=subject_id, gender=gender, dob=dob, ethnicity=ethnicity, insurance=insurance)
        )

    def admission(self, hadm_id, subject_id, admittime, dischtime, deathtime=None, flag=0, admission_type="EMERGENCY"):
        self.rows["admissions"].append(
            dict(
                hadm_id=hadm_id,
                subject_id=subject_id,
                admittime=admittime,
                dischtime=dischtime,
                deathtime=deathtime,
                admission_type=admission_type,
                hospital_expire_flag=flag,
            )
        )

    def stay(self, icustay_id, hadm_id, subject_id, intime, outtime, careunit="MICU"):
        self.rows["icustays"].append(
            dict(
                icustay_id=icustay_id,
                hadm_id=hadm_id,
                subject_id=subject_id,
                intime=intime,
                outtime=outtime,
                first_careunit=careunit,
            )
        )

    def event(self, subject_id, hadm_id, icustay_id, itemid, charttime, valuenum, valueuom=""):
        self.rows["events"].append(
            dict(
                subject_id=subject_id,
                hadm_id=hadm_id,
                icustay_id=icustay_id,
                itemid=itemid,
                charttime=charttime,
                valuenum=valuenum,
                valueuom=valueuom,
            )
        )

    def intervention(self, icustay_id, name, starttime, endtime):
        self.rows["intervention_events"].append(
            dict(icustay_id=icustay_id, name=name, starttime=starttime, endtime=endtime)
        )

    def write(self, directory: Path) -> Path:
        directory.mkdir(parents=True, exist_ok=True)
        for table, cols in SCHEMAS.items():
            write_csv(directory / f"{table}.csv", list(cols), self.rows[table])
        return directory


def basic_source() -> SourceBuilder:
    """Two subjects: one 30h stay with a few vitals, one with a lab-only admission."""
    b = SourceBuilder()
    b.patient(1, dob="2050-03-01 00:00:00", gender="F")
    b.patient(2, dob="2060-07-15 00:00:00", gender="M", ethnicity="ASIAN", insurance="Private")
    b.admission(10, 1, "2100-01-01 00:00:00", "2100-01-10 00:00:00")
    b.admission(20, 2, "2100-02-01 00:00:00", "2100-02-05 00:00:00", deathtime="2100-02-02 12:00:00", flag=1)
    b.stay(100, 10, 1, "2100-01-01 06:00:00", "2100-01-02 12:00:00")
    b.stay(200, 20, 2, "2100-02-01 02:00:00", "2100-02-02 20:00:00", careunit="CCU")
    b.event(1, 10, 100, 211, "2100-01-01 06:10:00", 80)
    b.event(1, 10, 100, 220045, "2100-01-01 06:50:00", 90)
    b.event(1, 10, 100, 678, "2100-01-01 08:00:00", 98.6, "F")
    b.event(1, 10, None, 50931, "2100-01-01 09:30:00", 120, "mg/dL")
    b.event(2, 20, 200, 211, "2100-02-01 03:00:00", 400)
    b.intervention(100, "vent", "2100-01-01 08:30:00", "2100-01-01 10:12:00")
    b.intervention(200, "dopamine", "2100-02-01 04:00:00", "2100-02-01 06:00:00")
    return b


def edge_fixture() -> SourceBuilder:
    """Stays sitting exactly on each inclusion boundary."""
    b = SourceBuilder()
    intime = "2100-06-01 00:00:00"
    cases = [
        # subject, dob, outtime, expected reason
        (1, "2085-06-02 00:00:00", "2100-06-02 00:00:00", "age"),  # 14 at intime
        (2, "2085-06-01 00:00:00", "2100-06-02 00:00:00", "included"),  # exactly 15
        (3, "2050-01-01 00:00:00", "2100-06-01 11:59:24", "min_duration"),  # 11.99h
        (4, "2050-01-01 00:00:00", "2100-06-01 12:00:00", "included"),  # 12.0h
        (5, "2050-01-01 00:00:00", "2100-06-11 00:00:00", "max_duration"),  # 240.0h
        (6, "2050-01-01 00:00:00", "2100-06-10 23:59:59", "included"),  # just under 240h
        (7, "1800-01-01 00:00:00", "2100-06-02 00:00:00", "included"),  # masked age 300
    ]
    for sid, dob, outtime, _ in cases:
        b.patient(sid, dob=dob)
        b.admission(sid * 10, sid, "2100-05-31 00:00:00", "2100-06-20 00:00:00")
        b.stay(sid * 100, sid * 10, sid, intime, outtime)
    # repeat stays: subject 8 has 2101 and 2103 stays; the later one is excluded
    b.patient(8, dob="2050-01-01 00:00:00")
    b.admission(80, 8, "2103-01-01 00:00:00", "2103-02-01 00:00:00")
    b.admission(81, 8, "2101-01-01 00:00:00", "2101-02-01 00:00:00")
    b.stay(800, 80, 8, "2103-01-02 00:00:00", "2103-01-04 00:00:00")
    b.stay(801, 81, 8, "2101-01-02 00:00:00", "2101-01-04 00:00:00")
    # same intime tie: smaller icustay_id wins
    b.patient(9, dob="2050-01-01 00:00:00")
    b.admission(90, 9, "2101-01-01 00:00:00", "2101-02-01 00:00:00")
    b.stay(901, 90, 9, "2101-01-02 00:00:00", "2101-01-04 00:00:00")
    b.stay(900, 90, 9, "2101-01-02 00:00:00", "2101-01-05 00:00:00")
    expected = {sid * 100: r for sid, _, _, r in cases}
    expected.update({800: "not_first", 801: "included", 900: "included", 901: "not_first"})
    return b, expected


@pytest.fixture
def source_builder():
    return SourceBuilder


@pytest.fixture
def basic_dir(tmp_path):
    return basic_source().write(tmp_path / "src")


@pytest.fixture(scope="session")
def small_pipeline(tmp_path_factory):
    """A 300-subject synthetic set run through extraction, shared by the prep tests."""
    from icuextract import synthgen
    from icuextract.cohort import select_cohort
    from icuextract.ingest import attach_stay_to_lab_events, load_source_dataset
    from icuextract.interventions import build_intervention_grid
    from icuextract.resources import load_item_map, load_variable_ranges
    from icuextract.timeseries import aggregate_hourly

    d = tmp_path_factory.mktemp("small")
    truth = synthgen.generate_to(d, synthgen.GenParams(n_subjects=300, seed=21))
    ds = load_source_dataset(d)
    cohort = select_cohort(ds)
    events, _ = attach_stay_to_lab_events(ds.events, ds.icustays)
    grid, report = aggregate_hourly(events, cohort, load_item_map(), load_variable_ranges())
    igrid = build_intervention_grid(ds.intervention_events, cohort)
    return dict(dir=d, truth=truth, ds=ds, cohort=cohort, grid=grid, report=report, igrid=igrid)


# criterion number -> (passed, one-line detail), filled by test_acceptance.py
ACCEPTANCE: dict[int, tuple[bool, str]] = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        ok, detail = ACCEPTANCE[n]
        terminalreporter.write_line(f"criterion {n:>2}: {'PASS' if ok else 'FAIL'}  {detail}")
