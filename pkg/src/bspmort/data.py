"""Human Mortality Database period tables and mortality surfaces.

HMD ``1x1`` files (``Mx_1x1``, ``Deaths_1x1``, ``Exposures_1x1``) have two
header lines, a blank line, a column header and then rows of
``Year Age Female Male Total``; the open age group is written ``110+`` and
missing values as ``.``.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass

import numpy as np

from .errors import InputError, ParseError

GENDERS = ("female", "male", "total")
_GENDER_ALIASES = {"f": "female", "female": "female", "m": "male", "male": "male",
                   "t": "total", "total": "total"}
INTERCHANGE_COLUMNS = ("year", "age", "deaths", "exposure", "log_rate", "observed_flag")


def normalize_gender(g: str) -> str:
    try:
        return _GENDER_ALIASES[g.lower()]
    except (KeyError, AttributeError):
        raise InputError(f"unknown gender {g!r}") from None


@dataclass(frozen=True)
class HMDTable:
    """One parsed HMD table: ``values[gender]`` has shape ``(years, ages)``."""

    kind: str
    years: np.ndarray
    ages: np.ndarray
    values: dict


def _parse_age(tok, lineno):
    tok = tok.rstrip("+")
    try:
        return int(tok)
    except ValueError:
        raise ParseError(f"bad age field {tok!r}", lineno) from None


def _parse_value(tok, lineno):
    if tok == ".":
        return np.nan
    try:
        return float(tok)
    except ValueError:
        raise ParseError(f"bad numeric field {tok!r}", lineno) from None


def parse_hmd_table(text, kind: str = "Mx") -> HMDTable:
    """Parse an HMD ``1x1`` period table.

    Parameters
    ----------
    text : str or file-like
        File contents.
    kind : {"Mx", "Deaths", "Exposures"}
    """
    if kind not in ("Mx", "Deaths", "Exposures"):
        raise InputError(f"unknown table kind {kind!r}")
    if not isinstance(text, str):
        text = text.read()
    lines = text.splitlines()
    if len(lines) < 2:
        raise ParseError("file too short for the two header lines")

    rows = {}
    header_seen = False
    for lineno, line in enumerate(lines[2:], start=3):
        fields = line.split()
        if not fields:
            continue
        if not header_seen and fields[0] == "Year":
            header_seen = True
            if len(fields) != 5:
                raise ParseError(f"expected 5 columns in header, got {len(fields)}", lineno)
            continue
        if len(fields) != 5:
            raise ParseError(f"expected 5 columns, got {len(fields)}", lineno)
        try:
            year = int(fields[0])
        except ValueError:
            raise ParseError(f"bad year field {fields[0]!r}", lineno) from None
        age = _parse_age(fields[1], lineno)
        rows[(year, age)] = [_parse_value(t, lineno) for t in fields[2:]]

    if not rows:
        raise ParseError("no data rows")
    years = np.array(sorted({y for y, _ in rows}))
    ages = np.array(sorted({a for _, a in rows}))
    yi = {y: i for i, y in enumerate(years)}
    ai = {a: i for i, a in enumerate(ages)}
    grids = {g: np.full((years.size, ages.size), np.nan) for g in GENDERS}
    for (y, a), vals in rows.items():
        for g, v in zip(GENDERS, vals):
            grids[g][yi[y], ai[a]] = v
    return HMDTable(kind, years, ages, grids)


def read_hmd_table(path, kind=None) -> HMDTable:
    if kind is None:
        name = str(path)
        kind = "Deaths" if "Deaths" in name else "Exposures" if "Exposures" in name else "Mx"
    with open(path, encoding="utf-8") as fh:
        return parse_hmd_table(fh.read(), kind)


@dataclass(frozen=True)
class MortalitySurface:
    """Ages x years grid of counts and log-rates.

    Arrays are indexed ``[year, age]``. ``deaths``/``exposures`` are NaN when
    the surface was built from rates only.
    """

    ages: np.ndarray
    years: np.ndarray
    deaths: np.ndarray
    exposures: np.ndarray
    log_rates: np.ndarray
    observed: np.ndarray
    gender: str = "female"
    country_code: str = ""

    def __post_init__(self):
        n, k = self.years.size, self.ages.size
        for name in ("deaths", "exposures", "log_rates", "observed"):
            if getattr(self, name).shape != (n, k):
                raise InputError(f"{name} must have shape ({n}, {k})")
        if n > 1 and np.any(np.diff(self.years) <= 0):
            raise InputError("years must be strictly increasing")
        if np.any(self.observed & ~np.isfinite(self.log_rates)):
            raise InputError("observed cells must have finite log-rates")

    @property
    def n_years(self) -> int:
        return self.years.size

    def observations(self) -> np.ndarray:
        """Log-rates with NaN in missing cells, shape ``(n_years, n_ages)``."""
        return np.where(self.observed, self.log_rates, np.nan)

    def select_years(self, first=None, last=None) -> "MortalitySurface":
        keep = np.ones(self.years.size, dtype=bool)
        if first is not None:
            keep &= self.years >= first
        if last is not None:
            keep &= self.years <= last
        if not keep.any():
            raise InputError(f"no years in [{first}, {last}]")
        return MortalitySurface(self.ages, self.years[keep], self.deaths[keep],
                                self.exposures[keep], self.log_rates[keep],
                                self.observed[keep], self.gender, self.country_code)

    def equals(self, other: "MortalitySurface") -> bool:
        same = lambda a, b: np.array_equal(a, b, equal_nan=True)
        return (same(self.ages, other.ages) and same(self.years, other.years)
                and same(self.deaths, other.deaths) and same(self.exposures, other.exposures)
                and same(np.where(self.observed, self.log_rates, np.nan),
                         np.where(other.observed, other.log_rates, np.nan))
                and same(self.observed, other.observed))


def _pick(table, gender):
    return None if table is None else table.values[gender]


def build_surface(mx: HMDTable | None = None, gender: str = "female", *,
                  deaths: HMDTable | None = None, exposures: HMDTable | None = None,
                  age_cap: int = 100, year_range=None, country_code: str = "",
                  rate_rtol: float = 1e-6, rate_atol: float = 5e-7) -> MortalitySurface:
    """Assemble a surface for one gender.

    Log-rates come from ``deaths / exposures`` when both are given, otherwise
    from ``mx``. Cells with zero deaths, zero exposure or a zero rate are
    marked missing. When all three tables are supplied, ``mx`` must agree
    with ``deaths / exposures`` to ``rate_rtol`` (relative) plus ``rate_atol``
    wherever both are defined; the default ``rate_atol`` is half a unit in the
    sixth decimal, the precision of published HMD rates.
    """
    gender = normalize_gender(gender)
    tables = [t for t in (mx, deaths, exposures) if t is not None]
    if not tables:
        raise InputError("need an Mx table or Deaths and Exposures tables")
    if (deaths is None) != (exposures is None):
        raise InputError("Deaths and Exposures must be supplied together")

    years = tables[0].years
    ages = tables[0].ages
    for t in tables[1:]:
        years = np.intersect1d(years, t.years)
        ages = np.intersect1d(ages, t.ages)
    ages = ages[ages <= age_cap]
    if year_range is not None:
        lo, hi = year_range
        years = years[(years >= lo) & (years <= hi)]
    if years.size == 0 or ages.size == 0:
        raise InputError("requested years/ages do not overlap the data")

    def grid(t):
        if t is None:
            return np.full((years.size, ages.size), np.nan)
        yi = np.searchsorted(t.years, years)
        ai = np.searchsorted(t.ages, ages)
        return t.values[gender][np.ix_(yi, ai)]

    d, e, m = grid(deaths), grid(exposures), grid(mx)
    with np.errstate(divide="ignore", invalid="ignore"):
        if deaths is not None:
            rate = d / e
            ok = np.isfinite(d) & np.isfinite(e) & (d > 0) & (e > 0)
            if mx is not None:
                both = ok & np.isfinite(m) & (m > 0)
                diff = np.abs(m[both] - rate[both])
                bad = diff > rate_rtol * rate[both] + rate_atol
                if bad.any():
                    raise InputError("Mx disagrees with Deaths/Exposures "
                                     f"(max abs diff {diff.max():.3g})")
        else:
            rate = m
            ok = np.isfinite(m) & (m > 0)
        log_rates = np.where(ok, np.log(np.where(ok, rate, 1.0)), np.nan)
    return MortalitySurface(ages.astype(float), years.astype(int), d, e, log_rates, ok,
                            gender, country_code)


def _fmt(x):
    return "" if not np.isfinite(x) else repr(float(x))


def write_surface_csv(surface: MortalitySurface, fh) -> None:
    """Write the interchange CSV (empty field = missing)."""
    w = csv.writer(fh, lineterminator="\n")
    w.writerow(INTERCHANGE_COLUMNS)
    for i, year in enumerate(surface.years):
        for j, age in enumerate(surface.ages):
            obs = bool(surface.observed[i, j])
            w.writerow([int(year), _fmt(age), _fmt(surface.deaths[i, j]),
                        _fmt(surface.exposures[i, j]),
                        _fmt(surface.log_rates[i, j]) if obs else "", int(obs)])


def surface_to_csv(surface: MortalitySurface) -> str:
    buf = io.StringIO()
    write_surface_csv(surface, buf)
    return buf.getvalue()


def read_surface_csv(fh, gender: str = "female", country_code: str = "") -> MortalitySurface:
    if isinstance(fh, str):
        fh = io.StringIO(fh)
    reader = csv.reader(fh)
    header = next(reader, None)
    if header is None or tuple(h.strip() for h in header) != INTERCHANGE_COLUMNS:
        raise ParseError(f"interchange header must be {','.join(INTERCHANGE_COLUMNS)}", 1)
    records = []
    for lineno, row in enumerate(reader, start=2):
        if not row:
            continue
        if len(row) != len(INTERCHANGE_COLUMNS):
            raise ParseError(f"expected {len(INTERCHANGE_COLUMNS)} fields, got {len(row)}", lineno)
        try:
            records.append((int(row[0]), float(row[1]),
                            *(float(x) if x else np.nan for x in row[2:5]), row[5].strip() == "1"))
        except ValueError as exc:
            raise ParseError(str(exc), lineno) from None
    if not records:
        raise ParseError("no data rows")
    years = np.array(sorted({r[0] for r in records}))
    ages = np.array(sorted({r[1] for r in records}))
    yi = {y: i for i, y in enumerate(years)}
    ai = {a: i for i, a in enumerate(ages)}
    shape = (years.size, ages.size)
    d, e, lr = np.full(shape, np.nan), np.full(shape, np.nan), np.full(shape, np.nan)
    obs = np.zeros(shape, dtype=bool)
    for y, a, dd, ee, ll, ob in records:
        i, j = yi[y], ai[a]
        d[i, j], e[i, j], lr[i, j], obs[i, j] = dd, ee, ll, ob
    return MortalitySurface(ages, years, d, e, lr, obs, normalize_gender(gender), country_code)
