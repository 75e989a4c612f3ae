"""Exception hierarchy & diagnostic records"""
from dataclasses import dataclass, field
from typing import Dict, Optional


class DetectorCoreError(Exception):
    """Base class for every error raised by this package"""


class DegenerateBox(DetectorCoreError):
    """Box with (near) zero area or invalid side lengths"""


class DegenerateDirection(DetectorCoreError):
    """Zero-length centre→vertex vector"""


class ConfigError(DetectorCoreError):
    """Invalid configuration value or inconsistent plane shapes"""


class FormatError(DetectorCoreError):
    """Serialized planes or scene files that do not match their schema"""


class PlacementError(DetectorCoreError):
    """Synthetic generator could not place the requested instances"""


@dataclass(frozen=True)
class Diagnostic:
    """
    Non-fatal finding collected while parsing, encoding or decoding.

    kind is one of ParseError, UnknownClass, DegenerateBox, ClampedAnnotation,
    DroppedAnnotation, SubCellInstance, PeakCollision, CenterOutsideGrid.
    """
    kind: str
    message: str
    line: Optional[int] = None
    index: Optional[int] = None
    extra: Dict = field(default_factory=dict)

    def to_dict(self) -> Dict:
        out = {"kind": self.kind, "message": self.message}
        if self.line is not None:
            out["line"] = self.line
        if self.index is not None:
            out["index"] = self.index
        if self.extra:
            out.update(self.extra)
        return out
