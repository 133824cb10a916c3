"""Resource files (ItemID taxonomy, variable ranges) and extraction keywords."""

from __future__ import annotations

import csv
import math
from dataclasses import asdict, dataclass, fields
from importlib import resources as importlib_resources
from pathlib import Path

UNIT_CLASSES = ("none", "weight", "height", "temperature")

ITEM_MAP_COLUMNS = ("itemid", "raw_label", "aggregate_group", "unit_class")
RANGE_COLUMNS = ("variable", "outlier_low", "valid_low", "valid_high", "outlier_high")


class ResourceError(Exception):
    pass


class DuplicateItemId(ResourceError):
    pass


class UnknownUnitClass(ResourceError):
    pass


class RangeOrderViolation(ResourceError):
    pass


class ConfigError(ResourceError):
    pass


@dataclass(frozen=True)
class ItemMapEntry:
    itemid: int
    raw_label: str
    aggregate_group: str
    unit_class: str = "none"


@dataclass(frozen=True)
class VariableRange:
    """Two-tier bounds; ``None`` means no constraint on that side."""

    variable: str
    outlier_low: float | None = None
    valid_low: float | None = None
    valid_high: float | None = None
    outlier_high: float | None = None

    def is_ordered(self) -> bool:
        return bounds_ordered(self.outlier_low, self.valid_low, self.valid_high, self.outlier_high)


def bounds_ordered(*bounds: float | None) -> bool:
    """True when the present bounds are non-decreasing left to right."""
    present = [b for b in bounds if b is not None]
    return all(a <= b for a, b in zip(present, present[1:]))


@dataclass(frozen=True)
class ExtractConfig:
    min_age: float = 15
    min_duration: float = 12
    max_duration: float = 240
    group_by_level2: bool = True
    min_percent: float = 0

    def __post_init__(self):
        if not 0 < self.min_duration < self.max_duration:
            raise ConfigError(
                f"need 0 < min_duration < max_duration, got {self.min_duration}, {self.max_duration}"
            )
        if not 0 <= self.min_percent <= 100:
            raise ConfigError(f"min_percent must be within [0, 100], got {self.min_percent}")
        if self.min_age < 0:
            raise ConfigError(f"min_age must be nonnegative, got {self.min_age}")

    def to_dict(self) -> dict:
        return asdict(self)


def _read_rows(path: Path, columns: tuple[str, ...]) -> list[dict[str, str]]:
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None or set(reader.fieldnames) != set(columns):
            raise ResourceError(f"{path}: expected columns {list(columns)}, got {reader.fieldnames}")
        return list(reader)


def default_resource(name: str) -> Path:
    return Path(str(importlib_resources.files("icuextract") / "data" / name))


def load_item_map(path: str | Path | None = None) -> list[ItemMapEntry]:
    path = Path(path) if path is not None else default_resource("itemid_to_variable_map.csv")
    entries: list[ItemMapEntry] = []
    seen: set[int] = set()
    for lineno, row in enumerate(_read_rows(path, ITEM_MAP_COLUMNS), start=2):
        try:
            itemid = int(row["itemid"])
        except ValueError:
            raise ResourceError(f"{path}:{lineno}: bad itemid {row['itemid']!r}") from None
        if itemid in seen:
            raise DuplicateItemId(f"{path}:{lineno}: itemid {itemid} listed twice")
        seen.add(itemid)
        unit_class = (row["unit_class"] or "none").strip().lower()
        if unit_class not in UNIT_CLASSES:
            raise UnknownUnitClass(f"{path}:{lineno}: unit_class {row['unit_class']!r} not in {UNIT_CLASSES}")
        group = row["aggregate_group"].strip()
        if not group:
            raise ResourceError(f"{path}:{lineno}: empty aggregate_group for itemid {itemid}")
        entries.append(ItemMapEntry(itemid, row["raw_label"], group, unit_class))
    return entries


def _bound(text: str, where: str) -> float | None:
    text = text.strip()
    if text == "" or text.lower() == "nan":
        return None
    try:
        value = float(text)
    except ValueError:
        raise ResourceError(f"{where}: bad bound {text!r}") from None
    if not math.isfinite(value):
        raise ResourceError(f"{where}: bound must be finite, got {text!r}")
    return value


def load_variable_ranges(path: str | Path | None = None) -> list[VariableRange]:
    path = Path(path) if path is not None else default_resource("variable_ranges.csv")
    ranges = []
    seen = set()
    for lineno, row in enumerate(_read_rows(path, RANGE_COLUMNS), start=2):
        where = f"{path}:{lineno}"
        variable = row["variable"].strip()
        if variable in seen:
            raise ResourceError(f"{where}: variable {variable!r} listed twice")
        seen.add(variable)
        vr = VariableRange(variable, *(_bound(row[c], where) for c in RANGE_COLUMNS[1:]))
        if not vr.is_ordered():
            raise RangeOrderViolation(
                f"{where}: {variable} needs outlier_low <= valid_low <= valid_high <= outlier_high, got "
                f"({vr.outlier_low}, {vr.valid_low}, {vr.valid_high}, {vr.outlier_high})"
            )
        ranges.append(vr)
    return ranges


def resolve_variable(itemid: int, item_map: dict[int, ItemMapEntry], group_by_level2: bool) -> str | None:
    """Variable key for ``itemid``: its clinical aggregate, or the raw ItemID.

    Returns ``None`` for ItemIDs absent from the map.
    """
    entry = item_map.get(itemid)
    if entry is None:
        return None
    return entry.aggregate_group if group_by_level2 else str(itemid)


def index_item_map(entries: list[ItemMapEntry]) -> dict[int, ItemMapEntry]:
    return {e.itemid: e for e in entries}


def parse_bool(text: str) -> bool:
    t = str(text).strip().lower()
    if t in ("1", "true", "yes", "y", "t"):
        return True
    if t in ("0", "false", "no", "n", "f"):
        return False
    raise ConfigError(f"not a boolean: {text!r}")


def load_config(path: str | Path | None = None, **overrides) -> ExtractConfig:
    """Build an ExtractConfig from a ``key=value`` file; keyword overrides win.

    Overrides equal to ``None`` are ignored so CLI flags can be passed through
    unconditionally.
    """
    known = {f.name: f.type for f in fields(ExtractConfig)}
    values: dict[str, object] = {}
    if path is not None:
        for lineno, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), start=1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"{path}:{lineno}: expected key=value")
            key, value = (s.strip() for s in line.split("=", 1))
            if key not in known:
                raise ConfigError(f"{path}:{lineno}: unknown key {key!r}")
            values[key] = value
    values.update({k: v for k, v in overrides.items() if v is not None})
    parsed = {}
    for key, value in values.items():
        if key not in known:
            raise ConfigError(f"unknown config key {key!r}")
        try:
            parsed[key] = parse_bool(value) if key == "group_by_level2" else float(value)
        except ValueError as exc:
            raise ConfigError(f"bad value for {key}: {value!r}") from exc
    return ExtractConfig(**parsed)
