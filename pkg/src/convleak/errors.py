"""Exception hierarchy shared across the toolkit.

The CLI maps these onto process exit codes: ConfigError -> 2, data/format
errors -> 3, attack-not-applicable conditions -> 4.
"""


class ConvleakError(Exception):
    """Base class for all toolkit errors."""


class ConfigError(ConvleakError):
    """Invalid or inconsistent configuration."""


class FormatError(ConvleakError):
    """Malformed input file (bad magic, header, or structure)."""


class DataLengthError(FormatError):
    """File payload shorter than its header declares."""


class DimensionError(ConvleakError):
    """Array shapes incompatible with the requested operation."""


class AlignmentError(ConvleakError):
    """Trace alignment could not find enough cycle boundaries."""


class AttackNotApplicableError(ConvleakError):
    """The attack's applicability precondition failed on this input."""


class NoDropError(AttackNotApplicableError):
    """Cycle-power histogram has no count decrease to threshold on."""


class TemplateBuildError(AttackNotApplicableError):
    """Power template cannot be built (e.g. randomized kernel schedule)."""


class ReconstructionError(AttackNotApplicableError):
    """No usable candidates were available for image reconstruction."""
