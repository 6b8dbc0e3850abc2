"""Exception hierarchy shared by every module."""


class LabelDenoiseError(Exception):
    """Base class for all library errors."""


class DegenerateBox(LabelDenoiseError):
    pass


class BehindCamera(LabelDenoiseError):
    pass


class NonFinite(LabelDenoiseError, ValueError):
    pass


class MalformedLine(LabelDenoiseError):
    pass


class BadNumber(LabelDenoiseError):
    pass


class UnknownCategory(LabelDenoiseError):
    pass


class MissingP2(LabelDenoiseError):
    pass


class Uninitialized(LabelDenoiseError):
    pass


class EmptyBatch(LabelDenoiseError):
    pass


class SingleClass(LabelDenoiseError):
    pass


class EmptyLabels(LabelDenoiseError):
    pass


class ShapeMismatch(LabelDenoiseError):
    pass


class EmptyScene(LabelDenoiseError):
    pass


class ConfigError(LabelDenoiseError):
    pass


class CheckpointMismatch(LabelDenoiseError):
    pass
