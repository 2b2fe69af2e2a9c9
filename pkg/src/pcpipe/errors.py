"""Exception hierarchy shared by every pcpipe module."""


class PcpipeError(Exception):
    """Base class for all pcpipe errors."""


# -- format / schema --------------------------------------------------------
class SchemaError(PcpipeError):
    pass


class EmptySchema(SchemaError):
    pass


class DuplicateField(SchemaError):
    pass


class BadShape(SchemaError):
    pass


class SchemaMismatch(SchemaError):
    pass


class SchemaConflict(SchemaError):
    pass


class BadAlignment(PcpipeError):
    pass


class ColumnOutOfRange(PcpipeError):
    pass


class ChecksumMismatch(PcpipeError):
    pass


class CorruptPage(PcpipeError):
    pass


class BadMagic(PcpipeError):
    pass


class UnsupportedVersion(PcpipeError):
    pass


class CorruptHeader(PcpipeError):
    pass


class RangeOutOfBounds(PcpipeError):
    pass


class EmptyDataset(PcpipeError):
    pass


class IoFailure(PcpipeError):
    pass


# -- index / distributed ----------------------------------------------------
class OutOfRange(PcpipeError, IndexError):
    pass


class NotPadded(PcpipeError):
    pass


class ShapeMismatch(PcpipeError):
    pass


# -- ingest -----------------------------------------------------------------
class ParseError(PcpipeError):
    pass


class MalformedHeader(ParseError):
    pass


class TruncatedPayload(ParseError):
    pass


class UnsupportedProperty(ParseError):
    pass


class NoInputFiles(PcpipeError):
    pass


class ParseFailure(PcpipeError):
    def __init__(self, path, cause):
        super().__init__(f"{path}: {cause}")
        self.path = path
        self.cause = cause


# -- pipeline ---------------------------------------------------------------
class Shutdown(PcpipeError):
    pass


class WorkerPanic(PcpipeError):
    def __init__(self, op_id, cause):
        super().__init__(f"operator {op_id!r} failed: {cause!r}")
        self.op_id = op_id
        self.cause = cause


class GraphError(PcpipeError):
    pass


class MissingField(PcpipeError):
    pass


class EmptyCloud(PcpipeError):
    pass


class UnknownOp(PcpipeError):
    pass


class OutOfBounds(PcpipeError):
    pass


# -- streaming --------------------------------------------------------------
class StoreUnreachable(PcpipeError):
    def __init__(self, message, request=None):
        super().__init__(message)
        self.request = request


class MissingMetaIndex(PcpipeError):
    pass


class ObjectNotFound(PcpipeError, KeyError):
    def __str__(self):
        return str(self.args[0]) if self.args else "object not found"


class IntegrityFailure(PcpipeError):
    pass


# -- autotune ---------------------------------------------------------------
class PipelineStopped(PcpipeError):
    pass


class InsufficientSamples(PcpipeError):
    pass


class SpaceExhausted(PcpipeError):
    pass
