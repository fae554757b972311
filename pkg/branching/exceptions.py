class BranchingError(Exception):
    """Base class for every error raised by the toolkit."""


class ContractViolation(BranchingError, ValueError):
    """A caller broke an operation's precondition (shapes, ranges, structure)."""


class CorruptionError(BranchingError):
    """A persisted dataset or model does not match its declared layout."""


class EmptyDatasetError(BranchingError):
    pass


class EmptyBatchError(BranchingError):
    pass


class DegenerateMatrixError(BranchingError):
    pass


class NoOpWideningError(BranchingError):
    pass


class AffinityError(BranchingError):
    pass


class NonFiniteError(BranchingError):
    """A loss, score or gradient went non-finite.

    ``layer``, ``round_index`` and ``iteration`` are filled in as the error
    travels up from the optimizer to the training loop.
    """

    def __init__(self, message, layer=None, round_index=None, iteration=None):
        self.message = message
        self.layer = layer
        self.round_index = round_index
        self.iteration = iteration
        super().__init__(str(self))

    def __str__(self):
        where = []
        if self.round_index is not None:
            where.append(f'round {self.round_index}')
        if self.iteration is not None:
            where.append(f'iteration {self.iteration}')
        if self.layer is not None:
            where.append(f'layer {self.layer}')
        if not where:
            return self.message
        return f"{self.message} ({', '.join(where)})"

    def located(self, round_index=None, iteration=None):
        return NonFiniteError(
            self.message,
            layer=self.layer,
            round_index=round_index if round_index is not None else self.round_index,
            iteration=iteration if iteration is not None else self.iteration,
        )
