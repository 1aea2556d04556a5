"""Exception types raised across the package.

Errors deriving from :class:`InputError` describe bad caller input or bad
files; the command-line front end maps them to exit status 1. Anything else
escaping a command is treated as an internal failure (exit status 2).
"""


class InputError(ValueError):
    """Base class for errors caused by invalid inputs."""


# core geometry
class InvalidTransform(InputError):
    pass


class InvalidCamera(InputError):
    pass


class DepthNonPositive(InputError):
    pass


class PixelOutOfBounds(InputError):
    pass


class DegenerateGeometry(InputError):
    pass


class PreconditionError(InputError):
    pass


# matching
class EmptyFeatureSet(InputError):
    pass


class EmptyDescriptorList(InputError):
    pass


class StageMismatch(InputError):
    pass


class FlowFrameMismatch(InputError):
    pass


# alignment
class UnknownFrame(InputError):
    pass


class TooFewPoints(InputError):
    pass


class DegenerateConfiguration(InputError):
    pass


class NodesDisconnected(InputError):
    pass


class UnknownReference(InputError):
    pass


# keypoint transfer and evaluation
class InsufficientViews(InputError):
    pass


class TooFewCommonKeypoints(InputError):
    pass


class NoCommonKeypoints(InputError):
    pass


class ThresholdGridMismatch(InputError):
    pass


# grounding
class EmptyPointCloud(InputError):
    pass


class MissingStrategyInput(InputError):
    pass


class LabelOutOfRange(InputError):
    pass


class EmptyTrainingSet(InputError):
    pass


class UnknownModelId(InputError):
    pass


# datasets and configuration
class InvalidConfig(InputError):
    pass


class MissingFile(InputError):
    def __init__(self, path, context=""):
        self.path = str(path)
        msg = f"missing file: {self.path}"
        if context:
            msg += f" ({context})"
        super().__init__(msg)


class ParseError(InputError):
    def __init__(self, message, path=None, line=None):
        self.path = None if path is None else str(path)
        self.line = line
        where = ""
        if self.path is not None:
            where = self.path if line is None else f"{self.path}:{line}"
            where += ": "
        super().__init__(where + message)


class InvariantViolation(ParseError):
    pass
