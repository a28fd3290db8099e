"""Exception hierarchy shared across the pipeline."""


class HazardGraphError(Exception):
    """Base class for all package errors."""


# ---------------------------------------------------------------------------
# ingest
# ---------------------------------------------------------------------------


class IngestError(HazardGraphError):
    pass


class MissingColumn(IngestError):
    def __init__(self, name: str):
        super().__init__(f"required column missing: {name!r}")
        self.name = name


class MalformedRow(IngestError):
    def __init__(self, line: int, reason: str):
        super().__init__(f"line {line}: {reason}")
        self.line = line
        self.reason = reason


class EncodingError(IngestError):
    pass


class InvalidRange(IngestError):
    pass


# ---------------------------------------------------------------------------
# model gateway
# ---------------------------------------------------------------------------


class GatewayError(HazardGraphError):
    """Raised by backend calls. ``retryable`` marks transient failures."""

    retryable = False


class Timeout(GatewayError):
    retryable = True


class RateLimited(GatewayError):
    retryable = True


class TransientBackendError(GatewayError):
    retryable = True


class MalformedResponse(GatewayError):
    pass


class AuthFailure(GatewayError):
    pass


class ContentRejected(GatewayError):
    pass


class DimensionMismatch(GatewayError, ValueError):
    pass


class ScoreOutOfRange(GatewayError, ValueError):
    pass


class ConfigError(HazardGraphError, ValueError):
    pass


# ---------------------------------------------------------------------------
# classify
# ---------------------------------------------------------------------------


class ClassificationParseError(HazardGraphError):
    pass


class UnparseableResponse(ClassificationParseError):
    pass


class UnknownCategory(ClassificationParseError):
    pass


class MissingRationale(ClassificationParseError):
    pass


# ---------------------------------------------------------------------------
# cluster
# ---------------------------------------------------------------------------


class ClusterError(HazardGraphError):
    pass


class TooFewPoints(ClusterError, ValueError):
    pass


class UnknownCluster(ClusterError, KeyError):
    pass


# ---------------------------------------------------------------------------
# scene graphs
# ---------------------------------------------------------------------------


class GraphError(HazardGraphError):
    pass


class UnparseableGraph(GraphError):
    pass


class EmptyGraph(GraphError):
    pass


class NoHazardNode(GraphError):
    pass


class MultipleHazardNodes(GraphError):
    pass


class InvalidGraph(GraphError):
    pass


# ---------------------------------------------------------------------------
# scoring / analysis
# ---------------------------------------------------------------------------


class ScoringError(HazardGraphError):
    pass


class MissingAssertionScore(ScoringError, KeyError):
    def __init__(self, assertion_id: str):
        super().__init__(f"no score for assertion {assertion_id!r}")
        self.assertion_id = assertion_id


class PartialScores(ScoringError):
    def __init__(self, scores: dict, failures: dict):
        super().__init__(f"{len(failures)} assertion(s) could not be scored")
        self.scores = scores
        self.failures = failures


class ZeroVector(ScoringError, ValueError):
    pass


class NotPSD(ScoringError, ValueError):
    pass


class TooFewSamples(ScoringError, ValueError):
    pass


class AnalysisError(HazardGraphError):
    pass


class ValueOutOfRange(AnalysisError, ValueError):
    pass


class EmptyInput(AnalysisError, ValueError):
    pass


class PoolEmpty(AnalysisError, ValueError):
    pass


class TooFewPairs(AnalysisError, ValueError):
    pass
