"""Exception hierarchy shared by every forge stage.

Each error carries the process exit code the CLI reports for it.
"""


class ForgeError(Exception):
    exit_code = 4


class ValidationError(ForgeError, ValueError):
    exit_code = 2


class ConfigError(ValidationError):
    """Invalid pipeline configuration; `key` is the dotted path to the offending entry"""

    def __init__(self, key, message):
        super().__init__(f"{key}: {message}")
        self.key = key


class DependencyError(ForgeError):
    """A stage input artifact is missing; `producer` names the stage that makes it"""

    exit_code = 3

    def __init__(self, message, producer=None):
        super().__init__(message)
        self.producer = producer


class RangeError(ValidationError):
    pass


class DuplicateIdError(ValidationError):
    pass


class ImageIdCollisionError(ValidationError):
    """Different image files that map to the same sidecar key"""

    def __init__(self, collisions):
        self.collisions = collisions
        shown = "; ".join(f"{key}: {refs}" for key, refs in sorted(collisions.items())[:5])
        super().__init__(f"image references share a sidecar key: {shown}")


class ManifestParseError(ValidationError):
    def __init__(self, lineno, message):
        super().__init__(f"line {lineno}: {message}")
        self.lineno = lineno


class TagParseError(ValidationError):
    def __init__(self, offset, message):
        super().__init__(f"offset {offset}: {message}")
        self.offset = offset


class FormatError(ValidationError):
    pass


class OutOfBoundsError(ValidationError):
    pass


class DegenerateAnnotationError(ValidationError):
    pass


class UndefinedEntropyError(ValidationError):
    pass


class OffScreenError(ValidationError):
    pass


class PlanningError(ForgeError):
    pass


class AssetError(ForgeError):
    pass


class GroupSizeError(ValidationError):
    pass


class ShapeError(ValidationError):
    pass


class UnknownPredictionError(ValidationError):
    def __init__(self, ids):
        self.ids = sorted(ids)
        shown = ", ".join(self.ids[:10])
        more = f" (+{len(self.ids) - 10} more)" if len(self.ids) > 10 else ""
        super().__init__(f"predictions for ids not in benchmark: {shown}{more}")


class IngestIOError(ForgeError, OSError):
    pass
