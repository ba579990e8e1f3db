from typing import Any, Optional


class MadError(Exception):
    """Base error. `exit_code` follows the CLI contract: 1 validation, 2 backend/IO, 3 verification."""

    exit_code = 1


class ConfigurationError(MadError):
    pass


class DimensionError(MadError, ValueError):
    pass


class EmptyInputError(MadError, ValueError):
    pass


class PoolError(MadError, ValueError):
    pass


class NonFiniteGradientError(MadError, ArithmeticError):
    def __init__(self, parameter: str, index: int):
        super().__init__(f"Non-finite gradient in {parameter} at flat index {index}")
        self.parameter = parameter
        self.index = index


class CheckpointError(MadError):
    exit_code = 2


class BackendError(MadError):
    exit_code = 2

    def __init__(self, message: str, status: Optional[int] = None, body: str = ""):
        super().__init__(message)
        self.status = status
        self.body = body


class AgentTimeoutError(BackendError):
    pass


class DiscussionAbortedError(BackendError):
    def __init__(self, agent: int, round_index: int, cause: Exception, transcript: Any):
        super().__init__(
            f"Agent {agent} failed in round {round_index}: {cause}",
            status=getattr(cause, "status", None),
            body=getattr(cause, "body", ""),
        )
        self.agent = agent
        self.round_index = round_index
        self.transcript = transcript


class VerificationError(MadError):
    exit_code = 3


class NonConvergenceError(MadError):
    exit_code = 3
