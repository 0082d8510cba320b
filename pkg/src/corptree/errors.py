"""Exception hierarchy shared across the package.

Two broad families matter for the CLI: ``DataError`` (malformed or
inconsistent inputs, exit code 2) and ``NumericalError`` (non-finite values
or divergence, exit code 3).
"""


class CorptreeError(Exception):
    """Base class for all library errors."""


class DataError(CorptreeError):
    """Malformed or inconsistent input data."""


class NumericalError(CorptreeError):
    """A computation produced non-finite values or diverged."""


# --- dataset ---------------------------------------------------------------


class MissingColumn(DataError):
    def __init__(self, name: str):
        super().__init__(f"missing required column: {name!r}")
        self.name = name


class NonNumericCell(DataError):
    def __init__(self, row: int, col: str, value: str = ""):
        super().__init__(f"non-numeric cell at row {row}, column {col!r}: {value!r}")
        self.row = row
        self.col = col


class DuplicateEnterpriseYear(DataError):
    def __init__(self, enterprise_id: str, year: int):
        super().__init__(f"duplicate (enterprise_id, year): ({enterprise_id!r}, {year})")
        self.enterprise_id = enterprise_id
        self.year = year


class ZeroVariance(DataError):
    def __init__(self, indicator: str):
        super().__init__(f"indicator {indicator!r} is constant on the fit set")
        self.indicator = indicator


class EmptyAfterFilter(DataError):
    def __init__(self):
        super().__init__("no enterprises remain after filtering")


class LevelOutOfRange(DataError):
    def __init__(self, level):
        super().__init__(f"rating level {level!r} outside 1..10")
        self.level = level


class ClassMissingInTrain(DataError):
    def __init__(self, class_index: int):
        super().__init__(f"class {class_index} has no labeled sample in the train split")
        self.class_index = class_index


class InsufficientHistory(DataError):
    def __init__(self, enterprise_id: str, end_year: int, available: int):
        super().__init__(
            f"enterprise {enterprise_id!r} has {available} usable row(s) up to "
            f"{end_year}; at least 2 required"
        )
        self.enterprise_id = enterprise_id
        self.end_year = end_year
        self.available = available


# --- graphs ----------------------------------------------------------------


class UnknownFormat(DataError):
    def __init__(self, fmt: str):
        super().__init__(f"unknown graph export format: {fmt!r}")
        self.fmt = fmt


# --- numerics --------------------------------------------------------------


class ShapeMismatch(CorptreeError):
    def __init__(self, message: str):
        super().__init__(message)


class BadSegmentId(CorptreeError):
    def __init__(self, segment: int, n_segments: int):
        super().__init__(f"segment id {segment} outside 0..{n_segments - 1}")
        self.segment = segment


class LabelOutOfRange(CorptreeError):
    def __init__(self, label: int, num_classes: int):
        super().__init__(f"label {label} outside 0..{num_classes - 1}")
        self.label = label


class NonFiniteValue(NumericalError):
    def __init__(self, where: str):
        super().__init__(f"non-finite value produced in {where}")
        self.where = where


class ZeroProjection(NumericalError):
    def __init__(self):
        super().__init__("pooling projection vector has near-zero norm")


class NonFiniteGradient(NumericalError):
    def __init__(self, name: str):
        super().__init__(f"non-finite gradient for parameter {name!r}")
        self.name = name


class Diverged(NumericalError):
    def __init__(self, epoch: int):
        super().__init__(f"training loss became non-finite at epoch {epoch}")
        self.epoch = epoch


# --- checkpoints / metrics ---------------------------------------------------


class FormatVersionMismatch(DataError):
    def __init__(self, found, expected):
        super().__init__(f"checkpoint format_version {found!r} != expected {expected!r}")
        self.found = found
        self.expected = expected


class CorruptCheckpoint(DataError):
    def __init__(self, detail: str):
        super().__init__(f"corrupt checkpoint: {detail}")


class DegenerateClass(DataError):
    def __init__(self, class_index: int):
        super().__init__(f"class {class_index} has no positives or no negatives")
        self.class_index = class_index
