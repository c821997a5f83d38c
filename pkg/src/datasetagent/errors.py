"""Exception hierarchy shared by every stage of the pipeline."""

from __future__ import annotations


class DatasetAgentError(Exception):
    """Base class for all errors raised by this package."""


# demand intake
class IrrelevantDemand(DatasetAgentError):
    pass


class MalformedBackendReply(DatasetAgentError):
    pass


class UnrecognizedLayout(DatasetAgentError):
    pass


class EmptyDataset(DatasetAgentError):
    pass


# model gateway
class BackendUnavailable(DatasetAgentError):
    pass


class BackendTimeout(BackendUnavailable):
    pass


class DimensionMismatch(DatasetAgentError):
    pass


# acquisition
class LocatorMissing(DatasetAgentError):
    pass


class DecodeFailure(DatasetAgentError):
    pass


class UnknownClass(DatasetAgentError):
    pass


# analysis
class SchemaViolation(DatasetAgentError):
    def __init__(self, field: str, rule: str, detail: str = ""):
        self.field = field
        self.rule = rule
        self.detail = detail
        msg = f"{field}: {rule}"
        if detail:
            msg += f" ({detail})"
        super().__init__(msg)


class NotADocument(DatasetAgentError):
    pass


# tool package
class ToolError(DatasetAgentError):
    pass


class DegenerateCrop(ToolError):
    pass


class ZeroVariance(ToolError):
    pass


class UnsupportedConversion(ToolError):
    pass


class Unreadable(DatasetAgentError):
    pass


# labeling
class NoMatchingClass(DatasetAgentError):
    pass


class TooManyClasses(DatasetAgentError):
    pass


# supervision
class LogUnwritable(DatasetAgentError):
    pass


class WorkspaceCorrupt(DatasetAgentError):
    pass


class NoCheckpoint(DatasetAgentError):
    pass


class RunAborted(DatasetAgentError):
    pass


# metrics
class MetricError(DatasetAgentError, ValueError):
    pass


class ImageTooSmall(MetricError):
    pass


class DegenerateVector(MetricError):
    pass


class UnsupportedSupport(MetricError):
    pass


class EmptyEdgeSet(MetricError):
    pass


class BothEmpty(MetricError):
    pass


class SampleTooLarge(MetricError):
    pass


class IngestMismatch(MetricError):
    pass
