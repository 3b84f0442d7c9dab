class ContractViolation(ValueError):
    """An input broke an operation's documented precondition."""


class OptimizationAborted(RuntimeError):
    def __init__(self, message, iteration):
        super().__init__(message)
        self.iteration = iteration
