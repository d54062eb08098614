"""Exception types shared across the package.

ValidationError covers bad inputs the user can fix (maps to CLI exit code 2);
everything else is a runtime failure (exit code 1).
"""


class ValidationError(ValueError):
    """Input violates a documented precondition."""


class ObjParseError(ValidationError):
    """Malformed OBJ content; carries the 1-based line number."""

    def __init__(self, line_no: int, message: str):
        self.line_no = line_no
        super().__init__(f"line {line_no}: {message}")


class DisconnectedMeshError(ValidationError):
    """Mesh graph is not connected; names the smallest unreachable component."""


class RolloutError(RuntimeError):
    """Non-finite state encountered during rollout; carries the frame index."""

    def __init__(self, frame: int, message: str):
        self.frame = frame
        super().__init__(f"frame {frame}: {message}")


class TrainAbortError(RuntimeError):
    """Training aborted (non-finite loss); carries the iteration index."""

    def __init__(self, iteration: int, message: str):
        self.iteration = iteration
        super().__init__(f"iteration {iteration}: {message}")
