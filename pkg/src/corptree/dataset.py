"""Enterprise indicator panels: loading, standardization, filtering, labels.

A panel is one enterprise's years x 29 indicator matrix plus optional
per-year rating levels (1..10, smaller = better credit). The synthetic
generator produces panels from a latent quality factor so the full pipeline
can run without licensed market data.
"""

from __future__ import annotations

import bisect
import csv
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import (
    ClassMissingInTrain,
    DataError,
    DuplicateEnterpriseYear,
    EmptyAfterFilter,
    LevelOutOfRange,
    MissingColumn,
    NonNumericCell,
    ZeroVariance,
)

INDICATOR_NAMES: tuple[str, ...] = (
    "total_assets",
    "cash_and_equivalents",
    "net_assets",
    "total_liabilities",
    "interest_bearing_debt",
    "net_debt",
    "cf_operating",
    "cf_investing",
    "cf_financing",
    "main_business_revenue",
    "main_business_profit",
    "ebitda",
    "net_profit",
    "main_business_profit_margin",
    "revenue_growth_rate",
    "total_asset_return_rate",
    "return_on_net_assets",
    "ebitda_over_revenue",
    "ocf_over_ebitda",
    "current_ratio",
    "quick_ratio",
    "inventory_turnover",
    "asset_liability_ratio",
    "short_term_debt_over_total_debt",
    "ibd_over_total_capital",
    "cash_ratio",
    "cash_over_total_debt",
    "interest_coverage",
    "ebitda_over_ibd",
)

N_INDICATORS = len(INDICATOR_NAMES)

MIN_RATING_LEVEL = 1
MAX_RATING_LEVEL = 10

# Upper bin bounds for collapsing the 10 raw levels into coarse classes.
# Contiguous and monotone; class 0 always contains level 1 (best credit).
DEFAULT_CLASS_BINS: dict[int, tuple[int, ...]] = {
    3: (3, 6, 10),
    5: (2, 4, 6, 8, 10),
    8: (1, 2, 3, 4, 5, 6, 7, 10),
}


@dataclass(frozen=True)
class IndicatorSchema:
    """Ordered indicator names; order is fixed for the life of a dataset."""

    names: tuple[str, ...] = INDICATOR_NAMES

    def __post_init__(self):
        if len(self.names) != len(set(self.names)):
            raise DataError("indicator names must be unique")

    @property
    def width(self) -> int:
        return len(self.names)

    def index(self, name: str) -> int:
        return self.names.index(name)


DEFAULT_SCHEMA = IndicatorSchema()


@dataclass
class IndicatorPanel:
    """One enterprise's year-sorted indicator rows plus optional labels."""

    enterprise_id: str
    years: list[int]
    values: np.ndarray  # (n_years, width) float64
    labels: list[int | None]

    def __post_init__(self):
        if any(b <= a for a, b in zip(self.years, self.years[1:])):
            raise DataError(f"years not strictly increasing for {self.enterprise_id!r}")
        if self.values.shape[0] != len(self.years):
            raise DataError("values row count must match years")
        if len(self.labels) != len(self.years):
            raise DataError("labels length must match years")

    @property
    def n_years(self) -> int:
        return len(self.years)

    def label_for(self, year: int) -> int | None:
        return self.labels[self.years.index(year)]

    def with_values(self, values: np.ndarray) -> "IndicatorPanel":
        return IndicatorPanel(self.enterprise_id, list(self.years), values, list(self.labels))


@dataclass(frozen=True)
class LabelSpec:
    """Partition of raw levels 1..10 into contiguous coarse classes."""

    num_classes: int
    bin_upper: tuple[int, ...]
    raw_levels: int = MAX_RATING_LEVEL

    def __post_init__(self):
        if len(self.bin_upper) != self.num_classes:
            raise DataError("one upper bound per class required")
        if self.bin_upper[-1] != self.raw_levels:
            raise DataError("last bin must end at the top raw level")
        if any(b <= a for a, b in zip(self.bin_upper, self.bin_upper[1:])):
            raise DataError("bin upper bounds must be strictly increasing")

    @classmethod
    def default(cls, num_classes: int) -> "LabelSpec":
        try:
            return cls(num_classes, DEFAULT_CLASS_BINS[num_classes])
        except KeyError:
            raise DataError(
                f"num_classes must be one of {sorted(DEFAULT_CLASS_BINS)}, got {num_classes}"
            ) from None

    def to_json_dict(self) -> dict:
        return {"num_classes": self.num_classes, "bin_upper": list(self.bin_upper)}

    @classmethod
    def from_json_dict(cls, d: dict) -> "LabelSpec":
        return cls(int(d["num_classes"]), tuple(int(b) for b in d["bin_upper"]))


@dataclass(frozen=True)
class DatasetSplit:
    """Disjoint (enterprise_id, year) sample keys at enterprise granularity."""

    train: tuple[tuple[str, int], ...]
    validation: tuple[tuple[str, int], ...]
    test: tuple[tuple[str, int], ...]
    seed: int

    def part(self, name: str) -> tuple[tuple[str, int], ...]:
        try:
            return {"train": self.train, "validation": self.validation, "test": self.test}[name]
        except KeyError:
            raise DataError(f"unknown split part {name!r}") from None


def coarsen_label(level: int, spec: LabelSpec) -> int:
    """Map a raw 1..10 level to its coarse class index (0 = best credit)."""
    if not isinstance(level, (int, np.integer)) or not (
        MIN_RATING_LEVEL <= level <= spec.raw_levels
    ):
        raise LevelOutOfRange(level)
    return bisect.bisect_left(spec.bin_upper, level)


def load_dataset(path: str | Path, schema: IndicatorSchema = DEFAULT_SCHEMA) -> list[IndicatorPanel]:
    """Read the panel CSV and group rows into year-sorted per-enterprise panels.

    Expected header: ``enterprise_id,year,rating,<indicator names>``. A blank
    rating marks an unlabeled row. Missing values are an error, not imputed.
    """
    path = Path(path)
    if not path.exists():
        raise DataError(f"dataset file not found: {path}")
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        header = reader.fieldnames or []
        for required in ("enterprise_id", "year", *schema.names):
            if required not in header:
                raise MissingColumn(required)
        has_rating = "rating" in header

        rows: dict[str, list[tuple[int, np.ndarray, int | None]]] = {}
        seen: set[tuple[str, int]] = set()
        for record in reader:
            line = reader.line_num
            eid = record["enterprise_id"]
            year = _parse_int(record["year"], line, "year")
            if (eid, year) in seen:
                raise DuplicateEnterpriseYear(eid, year)
            seen.add((eid, year))

            label: int | None = None
            if has_rating and record["rating"] not in ("", None):
                label = _parse_int(record["rating"], line, "rating")
                if not (MIN_RATING_LEVEL <= label <= MAX_RATING_LEVEL):
                    raise LevelOutOfRange(label)

            values = np.empty(schema.width, dtype=np.float64)
            for j, name in enumerate(schema.names):
                cell = record[name]
                if cell is None:
                    raise NonNumericCell(line, name, "")
                try:
                    values[j] = float(cell)
                except ValueError:
                    raise NonNumericCell(line, name, cell) from None
                if not math.isfinite(values[j]):
                    raise NonNumericCell(line, name, cell)
            rows.setdefault(eid, []).append((year, values, label))

    panels = []
    for eid, entries in rows.items():
        entries.sort(key=lambda e: e[0])
        panels.append(
            IndicatorPanel(
                enterprise_id=eid,
                years=[e[0] for e in entries],
                values=np.vstack([e[1] for e in entries]),
                labels=[e[2] for e in entries],
            )
        )
    return panels


def _parse_int(cell: str, line: int, col: str) -> int:
    try:
        return int(cell)
    except (TypeError, ValueError):
        raise NonNumericCell(line, col, "" if cell is None else cell) from None


def standardize(
    panels: list[IndicatorPanel],
    fit_keys: list[tuple[str, int]],
    schema: IndicatorSchema = DEFAULT_SCHEMA,
    zero_variance: str = "keep",
) -> tuple[list[IndicatorPanel], np.ndarray, np.ndarray]:
    """Z-score every indicator column using statistics from ``fit_keys`` rows only.

    ``zero_variance`` controls constant-on-fit-set indicators: ``"keep"``
    keeps them with std := 1, ``"error"`` raises ``ZeroVariance``, ``"drop"``
    removes the columns everywhere (narrowing the schema width).
    Returns the transformed panels and the fitted per-indicator means/stds.
    """
    if not fit_keys:
        raise DataError("fit_keys must be nonempty")
    if zero_variance not in ("keep", "error", "drop"):
        raise DataError(f"unknown zero_variance mode {zero_variance!r}")

    by_id = {p.enterprise_id: p for p in panels}
    fit_rows = []
    for eid, year in fit_keys:
        panel = by_id.get(eid)
        if panel is None or year not in panel.years:
            raise DataError(f"fit key ({eid!r}, {year}) not present in panels")
        fit_rows.append(panel.values[panel.years.index(year)])
    fit = np.vstack(fit_rows)

    means = fit.mean(axis=0)
    stds = fit.std(axis=0)  # population std

    constant = stds == 0.0
    keep_cols = np.ones(fit.shape[1], dtype=bool)
    if constant.any():
        if zero_variance == "error":
            raise ZeroVariance(schema.names[int(np.flatnonzero(constant)[0])])
        if zero_variance == "drop":
            keep_cols = ~constant
            if not keep_cols.any():
                raise DataError("all indicators constant on the fit set")
        else:
            stds = np.where(constant, 1.0, stds)

    if zero_variance == "drop":
        means = means[keep_cols]
        stds = stds[keep_cols]

    out = []
    for panel in panels:
        values = panel.values[:, keep_cols] if zero_variance == "drop" else panel.values
        out.append(panel.with_values((values - means) / stds))
    return out, means, stds


def filter_sme(panels: list[IndicatorPanel], quantile: float = 0.80,
               schema: IndicatorSchema = DEFAULT_SCHEMA) -> list[IndicatorPanel]:
    """Drop enterprises whose mean raw total assets exceed the given quantile.

    The threshold is the nearest-rank quantile of per-enterprise means; ties
    at the threshold are kept, so the retained set is deterministic.
    """
    if not 0.0 < quantile < 1.0:
        raise DataError(f"quantile must be in (0, 1), got {quantile}")
    if not panels:
        raise EmptyAfterFilter()
    col = schema.index("total_assets")
    means = np.array([p.values[:, col].mean() for p in panels])
    rank = math.ceil(quantile * len(panels))  # nearest-rank, 1-indexed
    threshold = np.sort(means)[rank - 1]
    kept = [p for p, m in zip(panels, means) if m <= threshold]
    if not kept:
        raise EmptyAfterFilter()
    return kept


def labeled_keys(panels: list[IndicatorPanel]) -> list[tuple[str, int]]:
    """All (enterprise_id, year) keys carrying a rating label."""
    return [
        (p.enterprise_id, year)
        for p in panels
        for year, label in zip(p.years, p.labels)
        if label is not None
    ]


def all_keys(panels: list[IndicatorPanel]) -> list[tuple[str, int]]:
    """All (enterprise_id, year) keys, labeled or not."""
    return [(p.enterprise_id, year) for p in panels for year in p.years]


def apply_standardization(
    panels: list[IndicatorPanel], means: np.ndarray, stds: np.ndarray
) -> list[IndicatorPanel]:
    """Transform panels with previously fitted statistics (e.g. from a checkpoint)."""
    if means.shape != stds.shape:
        raise DataError("means and stds must have matching shapes")
    return [p.with_values((p.values - means) / stds) for p in panels]


def split_dataset(
    panels: list[IndicatorPanel],
    ratios: tuple[float, float, float],
    seed: int,
    label_spec: LabelSpec | None = None,
) -> DatasetSplit:
    """Split labeled samples train/validation/test at enterprise granularity.

    All of one enterprise's years land in the same split; the assignment is a
    pure function of (enterprise ids, ratios, seed). With ``label_spec`` set,
    every coarse class must appear in the train split.
    """
    if len(ratios) != 3 or any(r <= 0 for r in ratios) or abs(sum(ratios) - 1.0) > 1e-9:
        raise DataError(f"ratios must be three positive numbers summing to 1, got {ratios}")

    ids = [p.enterprise_id for p in panels]
    rng = np.random.default_rng(seed)
    order = rng.permutation(len(ids))
    n = len(ids)
    n_train = int(round(ratios[0] * n))
    n_val = int(round(ratios[1] * n))
    n_train = min(n_train, n)
    n_val = min(n_val, n - n_train)

    assignment: dict[str, str] = {}
    for pos, idx in enumerate(order):
        part = "train" if pos < n_train else "validation" if pos < n_train + n_val else "test"
        assignment[ids[idx]] = part

    keys: dict[str, list[tuple[str, int]]] = {"train": [], "validation": [], "test": []}
    for eid, year in labeled_keys(panels):
        keys[assignment[eid]].append((eid, year))
    for part in keys.values():
        part.sort()

    if label_spec is not None:
        by_id = {p.enterprise_id: p for p in panels}
        present = {
            coarsen_label(by_id[eid].label_for(year), label_spec) for eid, year in keys["train"]
        }
        for c in range(label_spec.num_classes):
            if c not in present:
                raise ClassMissingInTrain(c)

    return DatasetSplit(
        train=tuple(keys["train"]),
        validation=tuple(keys["validation"]),
        test=tuple(keys["test"]),
        seed=seed,
    )


# --- synthetic data ----------------------------------------------------------

# Latent aspect order: solvency, profitability, operations, cash, growth.
_ASPECT_GAIN = np.array([1.0, 1.2, 0.8, 1.0, 0.6])

# Fixed sparse loading of each indicator onto the five aspects. Liability-like
# indicators load negatively so that higher latent quality lowers them.
_ASPECT_MIX_TABLE: tuple[tuple[tuple[int, float], ...], ...] = (
    ((2, 0.8), (0, 0.3)),            # total_assets
    ((3, 0.9), (0, 0.3)),            # cash_and_equivalents
    ((0, 0.8), (1, 0.3)),            # net_assets
    ((0, -0.7), (2, 0.3)),           # total_liabilities
    ((0, -0.8),),                    # interest_bearing_debt
    ((0, -0.7), (3, -0.4)),          # net_debt
    ((3, 0.8), (2, 0.3)),            # cf_operating
    ((4, -0.6), (3, 0.2)),           # cf_investing
    ((4, 0.5), (0, -0.3)),           # cf_financing
    ((2, 0.8), (4, 0.3)),            # main_business_revenue
    ((1, 0.8), (2, 0.3)),            # main_business_profit
    ((1, 0.7), (3, 0.4)),            # ebitda
    ((1, 0.9),),                     # net_profit
    ((1, 0.8),),                     # main_business_profit_margin
    ((4, 0.9),),                     # revenue_growth_rate
    ((1, 0.7), (2, 0.3)),            # total_asset_return_rate
    ((1, 0.8), (4, 0.2)),            # return_on_net_assets
    ((1, 0.7), (3, 0.2)),            # ebitda_over_revenue
    ((3, 0.8),),                     # ocf_over_ebitda
    ((0, 0.8), (3, 0.2)),            # current_ratio
    ((0, 0.7), (3, 0.3)),            # quick_ratio
    ((2, 0.8),),                     # inventory_turnover
    ((0, -0.9),),                    # asset_liability_ratio
    ((0, -0.5), (3, -0.3)),          # short_term_debt_over_total_debt
    ((0, -0.8),),                    # ibd_over_total_capital
    ((3, 0.8), (0, 0.2)),            # cash_ratio
    ((3, 0.7), (0, 0.3)),            # cash_over_total_debt
    ((1, 0.6), (0, 0.4)),            # interest_coverage
    ((1, 0.5), (0, 0.5)),            # ebitda_over_ibd
)


def _aspect_mix_matrix() -> np.ndarray:
    mix = np.zeros((N_INDICATORS, 5))
    for i, loads in enumerate(_ASPECT_MIX_TABLE):
        for aspect, weight in loads:
            mix[i, aspect] = weight
    return mix


def quality_to_level(q: float) -> int:
    """Latent quality in [0, 1] to a 1..10 level; low level = high quality."""
    return int(min(max(1 + math.floor(10.0 * (1.0 - q)), MIN_RATING_LEVEL), MAX_RATING_LEVEL))


def generate_synthetic(
    n_enterprises: int,
    n_years: int,
    noise_sigma: float,
    seed: int,
    start_year: int = 2014,
) -> tuple[list[IndicatorPanel], list[tuple[str, float]]]:
    """Generate labeled panels from a per-enterprise latent quality factor.

    Each enterprise draws q ~ Uniform(0, 1); five aspect factors are affine in
    q plus Gaussian noise, and the 29 indicators are fixed sparse mixes of the
    aspects plus per-year noise of scale ``noise_sigma``. The rating level is
    a deterministic function of q, so with ``noise_sigma=0`` labels are
    perfectly recoverable from the indicators.
    """
    if n_enterprises < 10:
        raise DataError(f"n_enterprises must be >= 10, got {n_enterprises}")
    if n_years < 2:
        raise DataError(f"n_years must be >= 2, got {n_years}")
    if noise_sigma < 0:
        raise DataError(f"noise_sigma must be >= 0, got {noise_sigma}")

    rng = np.random.default_rng(seed)
    mix = _aspect_mix_matrix()
    width = len(str(n_enterprises))
    years = list(range(start_year, start_year + n_years))

    panels = []
    truth = []
    for i in range(n_enterprises):
        eid = f"E{i + 1:0{width}d}"
        q = float(rng.uniform(0.0, 1.0))
        # Aspects vary per year around their affine-in-q center.
        centers = _ASPECT_GAIN * (q - 0.5)
        aspects = centers + rng.normal(0.0, 0.5 * noise_sigma, size=(n_years, 5))
        values = aspects @ mix.T + rng.normal(0.0, noise_sigma, size=(n_years, N_INDICATORS))
        level = quality_to_level(q)
        panels.append(
            IndicatorPanel(
                enterprise_id=eid,
                years=list(years),
                values=values,
                labels=[level] * n_years,
            )
        )
        truth.append((eid, q))
    return panels, truth


def write_csv(panels: list[IndicatorPanel], path: str | Path,
              schema: IndicatorSchema = DEFAULT_SCHEMA) -> None:
    """Write panels in the canonical CSV layout (full float precision)."""
    path = Path(path)
    with path.open("w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["enterprise_id", "year", "rating", *schema.names])
        for panel in panels:
            for k, year in enumerate(panel.years):
                label = panel.labels[k]
                writer.writerow(
                    [panel.enterprise_id, year, "" if label is None else label]
                    + [repr(float(v)) for v in panel.values[k]]
                )


def write_truth(truth: list[tuple[str, float]], path: str | Path) -> None:
    path = Path(path)
    with path.open("w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["enterprise_id", "q_score"])
        for eid, q in truth:
            writer.writerow([eid, repr(float(q))])


def truth_path_for(csv_path: str | Path) -> Path:
    csv_path = Path(csv_path)
    return csv_path.with_name(csv_path.stem + ".truth.csv")
