"""Exception hierarchy.

Every error raised for bad input derives from :class:`DefectKitError`, which
the command line maps to exit status 1 with a one-line diagnostic.
"""


class DefectKitError(Exception):
    """Base class for all validation errors raised by defectkit."""


class OutOfFrame(DefectKitError):
    pass


class MalformedBox(DefectKitError):
    pass


class InvalidDetection(DefectKitError):
    pass


class InvalidGroundTruth(DefectKitError):
    pass


class UnknownModel(DefectKitError):
    pass


class UnknownImage(DefectKitError):
    pass


class UnknownClass(DefectKitError):
    pass


class NoGroundTruth(DefectKitError):
    pass


class EmptySeries(DefectKitError):
    pass


class MissingReport(DefectKitError):
    pass


class ZeroBaseline(DefectKitError):
    pass


class MixedThresholds(DefectKitError):
    pass


class DegenerateTransform(DefectKitError):
    pass


class SizeMismatch(DefectKitError):
    pass


class EmptyDataset(DefectKitError):
    pass


class ConfidenceOutOfRange(DefectKitError):
    pass


class ParseError(DefectKitError):
    """Malformed line in a label, prediction or manifest file."""

    def __init__(self, message, line=None, source=None):
        self.line = line
        self.source = source
        where = ""
        if source is not None:
            where += f"{source}:"
        if line is not None:
            where += f"{line}:"
        super().__init__(f"{where} {message}" if where else message)
