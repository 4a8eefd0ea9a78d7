"""Error types shared across the package.

The CLI maps these onto process exit codes, so library code should raise
:class:`ContractViolation` (bad inputs, broken preconditions, malformed
run directories) rather than bare ``ValueError`` wherever a caller could
plausibly hit the condition from the command line.
"""


class ContractViolation(ValueError):
    """An operation's documented precondition or input contract was violated."""


class AcceptanceFailure(RuntimeError):
    """A self-check suite (e.g. the gradient-check command) did not pass."""
