"""Exception hierarchy.

Every error carries the process exit code the CLI reports for it:
1 for validation / user errors, 2 for transport / gateway errors and
3 for internal invariant breaches.
"""

from __future__ import annotations


class LegendForgeError(Exception):
    exit_code = 1


class UserError(LegendForgeError):
    exit_code = 1


class ParseError(UserError):
    pass


class ValidationError(UserError):
    pass


class InvalidBox(ValidationError):
    pass


class OutOfFrame(ValidationError):
    pass


class RasterError(UserError):
    pass


class MissingRaster(RasterError):
    pass


class DecodeError(RasterError):
    pass


class DimensionMismatch(RasterError):
    pass


class NotEnoughExamples(UserError):
    pass


class NoPredictionsFound(UserError):
    pass


class MapMismatch(UserError):
    pass


class DuplicateEntry(UserError):
    pass


class EmptyRegion(UserError):
    pass


class IndexFormatError(UserError):
    pass


class GatewayError(LegendForgeError):
    exit_code = 2


class AuthError(GatewayError):
    pass


class TransportError(GatewayError):
    pass


class GatewayTimeout(GatewayError, TimeoutError):
    pass


class RateLimited(TransportError):
    pass


class CassetteMiss(GatewayError):
    def __init__(self, digest: str, cassette_dir: str = ""):
        self.digest = digest
        where = f" in {cassette_dir}" if cassette_dir else ""
        super().__init__(f"no cassette entry for digest {digest}{where}")


class InvariantBreach(LegendForgeError):
    exit_code = 3
