"""Exception hierarchy shared by every layer.

Each exception carries a stable ``code`` string. Workers serialize errors as
``{"code", "message", "retriable"}`` so the code survives the wire.
"""


class FitFaaSError(Exception):
    code = "FitFaaSError"
    retriable = False

    def to_report(self):
        return {"code": self.code, "message": str(self), "retriable": self.retriable}


def _make(name, base=FitFaaSError, retriable=False, doc=None):
    cls = type(name, (base,), {"code": name, "retriable": retriable, "__doc__": doc})
    return cls


# workspace-model
class DocumentError(FitFaaSError):
    """A document problem located at a slash-delimited ``path``."""

    def __init__(self, message, path=""):
        self.path = path
        super().__init__(f"{path or '/'}: {message}" if path is not None else message)


MalformedDocument = _make("MalformedDocument", DocumentError, doc="Text is not valid JSON.")
SchemaViolation = _make("SchemaViolation", DocumentError, doc="Missing field or wrong shape.")
InvariantViolation = _make("InvariantViolation", DocumentError, doc="Cross-field rule broken.")
PathNotFound = _make("PathNotFound", DocumentError)
TypeMismatch = _make("TypeMismatch", DocumentError)
ResultInvalid = _make("ResultInvalid", DocumentError, doc="Patched document is not a valid workspace.")

# likelihood-engine
UnknownMeasurement = _make("UnknownMeasurement")
UnknownPOI = _make("UnknownPOI")
UnknownParameter = _make("UnknownParameter")
ConflictingModifier = _make("ConflictingModifier")
InvalidParameterConfig = _make("InvalidParameterConfig")
DimensionMismatch = _make("DimensionMismatch")
NonFiniteResult = _make("NonFiniteResult")


# inference
NonFiniteObjective = _make("NonFiniteObjective")


class DidNotConverge(FitFaaSError):
    code = "DidNotConverge"

    def __init__(self, message, result=None):
        super().__init__(message)
        self.result = result


DegenerateAsimov = _make("DegenerateAsimov")
ZeroDenominator = _make("ZeroDenominator")
SingularHessian = _make("SingularHessian")

# coordinator-service
UnknownFunction = _make("UnknownFunction")
UnknownEndpoint = _make("UnknownEndpoint")
UnknownTask = _make("UnknownTask")
PayloadTooLarge = _make("PayloadTooLarge")
StaleLease = _make("StaleLease")
BadRequest = _make("BadRequest")

# endpoint-agent / cli-bench
ProviderFailure = _make("ProviderFailure", retriable=True)
CoordinatorUnreachable = _make("CoordinatorUnreachable", retriable=True)
PalletDigestMismatch = _make("PalletDigestMismatch")
FetchFailed = _make("FetchFailed", retriable=True)
UnwritablePath = _make("UnwritablePath")
InternalError = _make("InternalError")

_REGISTRY = {
    cls.code: cls
    for cls in list(globals().values())
    if isinstance(cls, type) and issubclass(cls, FitFaaSError)
}


def from_code(code, message=""):
    """Rebuild an exception instance from a wire error code."""
    cls = _REGISTRY.get(code, FitFaaSError)
    if issubclass(cls, DocumentError):
        return cls(message, path=None)
    err = cls(message)
    if cls is FitFaaSError:
        err.code = code
    return err
