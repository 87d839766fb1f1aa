"""Country-year panel ingestion, validation and slicing."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

GROUP_FLAGS = ("poor", "rich", "hot", "agricultural", "non-agricultural")
MISSING_TOKENS = ("", "NA")


class PanelError(ValueError):
    """Base class for dataset problems."""


class PanelParseError(PanelError):
    def __init__(self, message: str, row: int | None = None):
        self.row = row
        prefix = f"row {row}: " if row is not None else ""
        super().__init__(prefix + message)


class PanelConflictError(PanelError):
    pass


class PanelValidationError(PanelError):
    pass


class EmptySubsampleError(PanelError):
    pass


@dataclass(frozen=True)
class CountryMeta:
    id: str
    region: str = "all"
    poor: bool = False
    hot: bool = False
    agricultural: bool = False

    @property
    def rich(self) -> bool:
        return not self.poor

    @property
    def non_agricultural(self) -> bool:
        return not self.agricultural

    def has_flag(self, flag: str) -> bool:
        if flag not in GROUP_FLAGS:
            raise PanelError(f"unknown group flag {flag!r}; expected one of {GROUP_FLAGS}")
        return bool(getattr(self, flag.replace("-", "_")))


@dataclass(frozen=True)
class PanelSchema:
    """Column mapping for a long-format CSV."""

    values: tuple[str, ...]
    country: str = "country"
    year: str = "year"
    units: Mapping[str, str] = field(default_factory=dict)

    def __post_init__(self):
        object.__setattr__(self, "values", tuple(self.values))
        if len(self.values) < 2:
            raise PanelError("schema needs at least two value columns")


@dataclass(frozen=True, eq=False)
class PanelDataset:
    """Balanced-grid storage of a possibly ragged country-year panel.

    ``values`` has shape (M, Y, N) with NaN at masked entries. Each country's
    fully observed years form one contiguous block ``windows[i] = (start, stop)``
    (half-open, indices into ``years``).
    """

    countries: tuple[CountryMeta, ...]
    years: tuple[int, ...]
    values: np.ndarray
    mask: np.ndarray
    variable_names: tuple[str, ...]
    units: tuple[str, ...]
    windows: tuple[tuple[int, int], ...]

    def __post_init__(self):
        values = np.array(self.values, dtype=float)
        mask = np.array(self.mask, dtype=bool)
        values.setflags(write=False)
        mask.setflags(write=False)
        object.__setattr__(self, "values", values)
        object.__setattr__(self, "mask", mask)
        object.__setattr__(self, "countries", tuple(self.countries))
        object.__setattr__(self, "years", tuple(int(y) for y in self.years))
        object.__setattr__(self, "variable_names", tuple(self.variable_names))
        object.__setattr__(self, "units", tuple(self.units))
        object.__setattr__(self, "windows", tuple((int(a), int(b)) for a, b in self.windows))
        self._validate()

    def _validate(self):
        M, Y, N = self.values.shape
        if N < 2:
            raise PanelValidationError("panel needs N >= 2 variables")
        if len(self.variable_names) != N or len(self.units) != N:
            raise PanelValidationError("variable_names/units length must equal N")
        if any(not u for u in self.units):
            raise PanelValidationError("every variable needs a unit annotation")
        if len(self.countries) != M or len(self.windows) != M:
            raise PanelValidationError("countries/windows length must equal M")
        ids = [c.id for c in self.countries]
        if len(set(ids)) != len(ids):
            raise PanelValidationError("country ids must be unique")
        if len(self.years) != Y or (Y and list(self.years) != list(range(self.years[0], self.years[0] + Y))):
            raise PanelValidationError("years must be a consecutive integer range")
        if self.mask.shape != self.values.shape:
            raise PanelValidationError("mask shape mismatch")
        observed = self.values[~self.mask]
        if not np.all(np.isfinite(observed)):
            raise PanelValidationError("non-finite values outside the missingness mask")
        for (a, b), c in zip(self.windows, self.countries):
            if not 0 <= a < b <= Y:
                raise PanelValidationError(f"country {c.id}: empty or invalid window")

    @property
    def M(self) -> int:
        return self.values.shape[0]

    @property
    def T(self) -> int:
        return self.values.shape[1]

    @property
    def N(self) -> int:
        return self.values.shape[2]

    @property
    def country_ids(self) -> tuple[str, ...]:
        return tuple(c.id for c in self.countries)

    def window_values(self, i: int) -> np.ndarray:
        a, b = self.windows[i]
        return self.values[i, a:b]

    def window_years(self, i: int) -> tuple[int, ...]:
        a, b = self.windows[i]
        return self.years[a:b]

    def sample_range(self, i: int) -> tuple[int, int]:
        """First and last year (inclusive) of country ``i``'s window."""
        a, b = self.windows[i]
        return self.years[a], self.years[b - 1]

    def region_map(self) -> dict[str, str]:
        return {c.id: c.region for c in self.countries}


def _parse_float(token: str, row: int, column: str) -> float:
    token = token.strip()
    if token in MISSING_TOKENS:
        return math.nan
    try:
        value = float(token)
    except ValueError:
        raise PanelParseError(f"column {column!r}: cannot parse {token!r} as a number", row) from None
    if not math.isfinite(value):
        raise PanelParseError(f"column {column!r}: non-finite value {token!r}", row)
    return value


def _parse_flag(token: str, row: int, column: str) -> bool:
    token = token.strip()
    if token in ("0", "1"):
        return token == "1"
    raise PanelParseError(f"column {column!r}: flag must be 0 or 1, got {token!r}", row)


def _uncommented(fh):
    # comment lines (``# key: value`` provenance headers) become blank rows so row numbers survive
    for line in fh:
        yield "\n" if line.lstrip().startswith("#") else line


def _header(reader) -> list[str]:
    for row in reader:
        if row and any(cell.strip() for cell in row):
            return [h.strip() for h in row]
    raise PanelParseError("empty file", 1)


def load_metadata(path: str | Path) -> dict[str, CountryMeta]:
    """Read the optional metadata CSV (country, region, poor, hot, agricultural)."""
    out: dict[str, CountryMeta] = {}
    with open(path, newline="", encoding="utf-8") as fh:
        raw = csv.reader(_uncommented(fh))
        fields = _header(raw)
        reader = ({k: (r[j] if j < len(r) else "") for j, k in enumerate(fields)} for r in raw if r)
        required = {"country", "region", "poor", "hot", "agricultural"}
        missing = required - set(fields)
        if missing:
            raise PanelParseError(f"metadata missing columns {sorted(missing)}", 1)
        for row_no, row in enumerate(reader, start=2):
            if not any((v or "").strip() for v in row.values() if isinstance(v, str)):
                continue
            cid = (row["country"] or "").strip()
            if not cid:
                raise PanelParseError("empty country id", row_no)
            if cid in out:
                raise PanelConflictError(f"row {row_no}: duplicate metadata for country {cid!r}")
            out[cid] = CountryMeta(
                id=cid,
                region=(row["region"] or "").strip() or "all",
                poor=_parse_flag(row["poor"], row_no, "poor"),
                hot=_parse_flag(row["hot"], row_no, "hot"),
                agricultural=_parse_flag(row["agricultural"], row_no, "agricultural"),
            )
    return out


def _windows_from_mask(mask: np.ndarray, ids: Sequence[str]) -> list[tuple[int, int]]:
    windows = []
    for i, cid in enumerate(ids):
        complete = ~mask[i].any(axis=1)
        idx = np.flatnonzero(complete)
        if idx.size == 0:
            raise PanelValidationError(f"country {cid!r} has no fully observed year")
        a, b = int(idx[0]), int(idx[-1]) + 1
        if not complete[a:b].all():
            gap = a + int(np.flatnonzero(~complete[a:b])[0])
            raise PanelValidationError(
                f"country {cid!r}: observations are not contiguous (gap at position {gap})"
            )
        windows.append((a, b))
    return windows


def from_arrays(
    values: np.ndarray,
    years: Iterable[int],
    variable_names: Sequence[str],
    units: Sequence[str],
    countries: Sequence[CountryMeta] | Sequence[str],
) -> PanelDataset:
    """Build a dataset from a dense (M, Y, N) array; NaN marks missing entries."""
    values = np.asarray(values, dtype=float)
    metas = [c if isinstance(c, CountryMeta) else CountryMeta(id=str(c)) for c in countries]
    mask = ~np.isfinite(values)
    windows = _windows_from_mask(mask, [c.id for c in metas])
    return PanelDataset(
        countries=tuple(metas),
        years=tuple(years),
        values=np.where(mask, np.nan, values),
        mask=mask,
        variable_names=tuple(variable_names),
        units=tuple(units),
        windows=tuple(windows),
    )


def load_panel(
    path: str | Path,
    schema: PanelSchema,
    metadata: Mapping[str, CountryMeta] | str | Path | None = None,
) -> PanelDataset:
    """Read a long-format country-year CSV.

    Missing values (empty field or ``NA``) are kept in the mask. Leading and
    trailing incomplete years of each country are trimmed from its window;
    interior gaps are rejected.
    """
    if isinstance(metadata, (str, Path)):
        metadata = load_metadata(metadata)
    records: dict[tuple[str, int], list[float]] = {}
    order: list[str] = []
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(_uncommented(fh))
        header = _header(reader)
        cols = {}
        for name in (schema.country, schema.year, *schema.values):
            if name not in header:
                raise PanelParseError(f"missing column {name!r}", 1)
            cols[name] = header.index(name)
        for row_no, row in enumerate(reader, start=2):
            if not row or all(not cell.strip() for cell in row):
                continue
            if len(row) != len(header):
                raise PanelParseError(f"expected {len(header)} fields, found {len(row)}", row_no)
            cid = row[cols[schema.country]].strip()
            if not cid:
                raise PanelParseError("empty country id", row_no)
            try:
                year = int(row[cols[schema.year]].strip())
            except ValueError:
                raise PanelParseError(f"bad year {row[cols[schema.year]]!r}", row_no) from None
            key = (cid, year)
            if key in records:
                raise PanelConflictError(f"row {row_no}: duplicate observation for ({cid}, {year})")
            records[key] = [_parse_float(row[cols[v]], row_no, v) for v in schema.values]
            if cid not in order:
                order.append(cid)
    if not records:
        raise PanelParseError("no data rows", 2)

    all_years = [y for _, y in records]
    y0, y1 = min(all_years), max(all_years)
    years = list(range(y0, y1 + 1))
    N = len(schema.values)
    values = np.full((len(order), len(years), N), np.nan)
    pos = {cid: i for i, cid in enumerate(order)}
    for (cid, year), vals in records.items():
        values[pos[cid], year - y0] = vals

    metas = []
    for cid in order:
        if metadata is not None:
            if cid not in metadata:
                raise PanelValidationError(f"country {cid!r} missing from metadata")
            metas.append(metadata[cid])
        else:
            metas.append(CountryMeta(id=cid))
    units = [schema.units.get(v, "") for v in schema.values]
    if metadata is None and not any(units):
        units = ["unspecified"] * N
    return from_arrays(values, years, schema.values, units, metas)


def _write_header(fh, header):
    for k, v in (header or {}).items():
        fh.write(f"# {k}: {v}\n")


def write_panel(ds: PanelDataset, path: str | Path, country_col: str = "country", year_col: str = "year",
                header: Mapping[str, object] | None = None):
    """Write the dataset back in long format; floats use the shortest round-trip repr.

    ``header`` entries are written first as ``# key: value`` comment lines.
    """
    with open(path, "w", newline="", encoding="utf-8") as fh:
        _write_header(fh, header)
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow([country_col, year_col, *ds.variable_names])
        for i, c in enumerate(ds.countries):
            for t, year in enumerate(ds.years):
                row = ds.values[i, t]
                if ds.mask[i, t].all():
                    continue
                writer.writerow(
                    [c.id, year, *("NA" if m else repr(float(v)) for v, m in zip(row, ds.mask[i, t]))]
                )


def write_metadata(ds: PanelDataset, path: str | Path, header: Mapping[str, object] | None = None):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        _write_header(fh, header)
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["country", "region", "poor", "hot", "agricultural"])
        for c in ds.countries:
            writer.writerow([c.id, c.region, int(c.poor), int(c.hot), int(c.agricultural)])


def _select(ds: PanelDataset, keep_countries: Sequence[int], year_slice: slice) -> PanelDataset:
    if not keep_countries:
        raise EmptySubsampleError("subsample contains no countries")
    years = ds.years[year_slice]
    if not years:
        raise EmptySubsampleError("subsample contains no years")
    values = ds.values[list(keep_countries)][:, year_slice]
    metas = [ds.countries[i] for i in keep_countries]
    mask = ~np.isfinite(values)
    complete = ~mask.any(axis=2)
    kept = [k for k in range(len(metas)) if complete[k].any()]
    if not kept:
        raise EmptySubsampleError("subsample contains no observations")
    return from_arrays(values[kept], years, ds.variable_names, ds.units, [metas[k] for k in kept])


def split_years(ds: PanelDataset, split_year: int) -> tuple[PanelDataset, PanelDataset]:
    """Partition into years < split_year and years >= split_year."""
    if not ds.years[0] < split_year <= ds.years[-1]:
        raise PanelError(f"split year {split_year} outside ({ds.years[0]}, {ds.years[-1]}]")
    cut = split_year - ds.years[0]
    everyone = list(range(ds.M))
    return _select(ds, everyone, slice(0, cut)), _select(ds, everyone, slice(cut, None))


def subsample(ds: PanelDataset, filter: str) -> PanelDataset:
    """Restrict to a country group flag or a year split.

    ``filter`` is a group flag (``poor``, ``rich``, ``hot``, ``agricultural``,
    ``non-agricultural``) or ``preYYYY`` / ``postYYYY``. ``pre1980`` keeps
    years before 1980, ``post1980`` keeps 1980 onwards.
    """
    key = filter.strip().lower().replace("_", "-")
    if key.startswith("pre") and key[3:].isdigit():
        return split_years(ds, int(key[3:]))[0]
    if key.startswith("post") and key[4:].isdigit():
        return split_years(ds, int(key[4:]))[1]
    if key not in GROUP_FLAGS:
        raise PanelError(f"unknown subsample filter {filter!r}")
    keep = [i for i, c in enumerate(ds.countries) if c.has_flag(key)]
    if not keep:
        raise EmptySubsampleError(f"no countries satisfy {filter!r}")
    return _select(ds, keep, slice(None))


def regional_average(
    series: Mapping[str, Sequence[float]],
    region_map: Mapping[str, str],
) -> tuple[dict[str, np.ndarray], dict[str, np.ndarray]]:
    """Unweighted mean across member countries, per region and year.

    ``series`` maps country id to a year-aligned sequence with NaN for missing
    values. Returns ``(averages, flags)``: ``flags[r][t]`` is True wherever at
    least one member was missing (NaN in ``averages`` when all were).
    """
    for cid in series:
        if cid not in region_map:
            raise PanelError(f"country {cid!r} has no region")
    regions = sorted({region_map[c] for c in series})
    averages: dict[str, np.ndarray] = {}
    flags: dict[str, np.ndarray] = {}
    for r in regions:
        # sorted members: the reduction order must not depend on input order
        members = sorted(c for c in series if region_map[c] == r)
        block = np.vstack([np.asarray(series[c], dtype=float) for c in members])
        present = np.isfinite(block)
        counts = present.sum(axis=0)
        totals = np.where(present, block, 0.0).sum(axis=0)
        with np.errstate(invalid="ignore", divide="ignore"):
            averages[r] = np.where(counts > 0, totals / np.maximum(counts, 1), np.nan)
        flags[r] = counts < len(members)
    return averages, flags


