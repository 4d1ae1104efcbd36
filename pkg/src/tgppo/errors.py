"""Error types shared across the package.

Every error carries a stable ``code`` string; the CLI prints it verbatim.
"""


class TgppoError(Exception):
    code = "ERROR"

    def __init__(self, message="", code=None):
        if code is not None:
            self.code = code
        super().__init__(f"{self.code}: {message}" if message else self.code)


class MpsError(TgppoError):
    """Raised by the MPS reader. ``code`` is one of UNSUPPORTED_SECTION,
    MALFORMED_LINE or DUPLICATE_ENTRY."""


class InvalidInstanceError(TgppoError):
    code = "INVALID_INSTANCE"

    def __init__(self, errors):
        self.errors = list(errors)
        super().__init__(", ".join(f"{c}({i})" for c, i in self.errors))


class GeneratorError(TgppoError):
    code = "INFEASIBLE_PARAMS"


class LimitExceeded(TgppoError):
    code = "LIMIT_EXCEEDED"


class PolicyRangeError(TgppoError):
    code = "POLICY_RANGE"


class LpIterationLimit(TgppoError):
    code = "LP_ITERATION_LIMIT"


class FeatureError(TgppoError):
    code = "EMPTY_CANDIDATES"


class NetError(TgppoError):
    """BAD_CONFIG, SHAPE_MISMATCH, NON_FINITE, MASKED_ACTION, NON_FINITE_GRAD."""


class TrainingError(TgppoError):
    code = "NON_FINITE_LOSS"


class MetricError(TgppoError):
    """EMPTY_INPUT, NONPOSITIVE_SHIFTED, GRID_MISMATCH, DEGENERATE,
    TOO_FEW_PAIRS, INSUFFICIENT_DATA."""


class ConfigError(TgppoError):
    code = "CONFIG"
