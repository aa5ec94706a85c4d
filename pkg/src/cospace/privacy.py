"""Privacy-aware frame handling.

Detector output becomes a canonical textual summary for prompts; model
backends never see raw frames. When a crop is requested, the pixels can
leave the edge only through an explicit, per-request consent decision.
"""

from __future__ import annotations

import enum
import logging
import re
import struct
import subprocess
import zlib
from dataclasses import dataclass, field

from .errors import CropError, ScenarioError

logger = logging.getLogger(__name__)

DESCRIPTION_LINE = (
    "{label}, center ({cx:.2f}, {cy:.2f}), "
    "box ({left:.2f}, {top:.2f}, {right:.2f}, {bottom:.2f}), confidence {conf:.2f}"
)
_LINE_RE = re.compile(
    r"^(?P<label>.+), center \((?P<cx>[-\d.]+), (?P<cy>[-\d.]+)\), "
    r"box \((?P<l>[-\d.]+), (?P<t>[-\d.]+), (?P<r>[-\d.]+), (?P<b>[-\d.]+)\), "
    r"confidence (?P<conf>[\d.]+)$"
)

CONSENT_TIMEOUT_S = 60.0


@dataclass(frozen=True, slots=True)
class Detection:
    label: str
    center: tuple[float, float]
    bbox: tuple[float, float, float, float]  # left, top, right, bottom
    confidence: float

    def validate(self) -> "Detection":
        left, top, right, bottom = self.bbox
        if not (left < right and top < bottom):
            raise ValueError(f"degenerate bbox {self.bbox}")
        cx, cy = self.center
        if not (left - 1.0 <= cx <= right + 1.0 and top - 1.0 <= cy <= bottom + 1.0):
            raise ValueError("center lies outside bbox")
        if not 0.0 <= self.confidence <= 1.0:
            raise ValueError(f"confidence {self.confidence} outside [0, 1]")
        return self


@dataclass(frozen=True, slots=True)
class FrameDescription:
    lines: tuple[str, ...]

    def text(self) -> str:
        return "\n".join(self.lines)

    def __iter__(self):
        return iter(self.lines)

    def __len__(self) -> int:
        return len(self.lines)


def describe_frame(detections: list[Detection]) -> FrameDescription:
    """Canonical textual field-of-view summary, one line per detection.

    Ordered by descending confidence, ties broken by label then by left
    edge. Numbers are fixed two-decimal, locale-independent.
    """
    ordered = sorted(detections, key=lambda d: (-d.confidence, d.label, d.bbox[0]))
    lines = tuple(
        DESCRIPTION_LINE.format(
            label=d.label,
            cx=d.center[0],
            cy=d.center[1],
            left=d.bbox[0],
            top=d.bbox[1],
            right=d.bbox[2],
            bottom=d.bbox[3],
            conf=d.confidence,
        )
        for d in ordered
    )
    return FrameDescription(lines=lines)


def parse_description_line(line: str) -> Detection:
    """Recover a detection from a canonical line (two-decimal precision)."""
    m = _LINE_RE.match(line)
    if m is None:
        raise ValueError(f"not a canonical description line: {line!r}")
    return Detection(
        label=m.group("label"),
        center=(float(m.group("cx")), float(m.group("cy"))),
        bbox=(
            float(m.group("l")),
            float(m.group("t")),
            float(m.group("r")),
            float(m.group("b")),
        ),
        confidence=float(m.group("conf")),
    )


@dataclass(frozen=True, slots=True)
class Rect:
    x: float
    y: float
    width: float
    height: float

    def validate(self) -> "Rect":
        if self.width <= 0 or self.height <= 0:
            raise ValueError(f"rect must have positive size, got {self}")
        return self

    def as_box(self) -> tuple[float, float, float, float]:
        return (self.x, self.y, self.x + self.width, self.y + self.height)

    @classmethod
    def from_box(cls, left: float, top: float, right: float, bottom: float) -> "Rect":
        return cls(left, top, right - left, bottom - top)


def iou(a: Rect, b: Rect) -> float:
    """Intersection over union of two rectangles; 0 when disjoint."""
    al, at, ar, ab = a.as_box()
    bl, bt, br, bb = b.as_box()
    iw = min(ar, br) - max(al, bl)
    ih = min(ab, bb) - max(at, bt)
    if iw <= 0.0 or ih <= 0.0:
        return 0.0
    inter = iw * ih
    union = a.width * a.height + b.width * b.height - inter
    return inter / union


def _overlaps(bbox: tuple[float, float, float, float], rect: Rect) -> bool:
    left, top, right, bottom = bbox
    rl, rt, rr, rb = rect.as_box()
    return min(right, rr) - max(left, rl) > 0.0 and min(bottom, rb) - max(top, rt) > 0.0


class ImageBuffer:
    """Opaque pixel matrix: row-major bytes, ``channels`` bytes per pixel."""

    __slots__ = ("width", "height", "channels", "data")

    def __init__(self, width: int, height: int, channels: int, data: bytes):
        if width < 1 or height < 1 or channels < 1:
            raise ValueError("image dimensions must be positive")
        if len(data) != width * height * channels:
            raise ValueError(
                f"data length {len(data)} != {width}x{height}x{channels}"
            )
        self.width = width
        self.height = height
        self.channels = channels
        self.data = data

    def __eq__(self, other) -> bool:
        return (
            isinstance(other, ImageBuffer)
            and (self.width, self.height, self.channels) == (other.width, other.height, other.channels)
            and self.data == other.data
        )


# Portable container: magic, version, width, height, channels, raw bytes.
_IMAGE_HEADER = struct.Struct("<4sHIIH")
_IMAGE_MAGIC = b"CIMG"


def save_image(image: ImageBuffer) -> bytes:
    header = _IMAGE_HEADER.pack(_IMAGE_MAGIC, 1, image.width, image.height, image.channels)
    return header + image.data


def load_image(blob: bytes) -> ImageBuffer:
    if len(blob) < _IMAGE_HEADER.size:
        raise ValueError("image blob too short")
    magic, version, w, h, c = _IMAGE_HEADER.unpack_from(blob)
    if magic != _IMAGE_MAGIC or version != 1:
        raise ValueError("not a portable image container")
    return ImageBuffer(w, h, c, blob[_IMAGE_HEADER.size :])


def synthesize_frame(frame_id: str, width: int, height: int, channels: int = 3) -> ImageBuffer:
    """Deterministic stand-in pixels for a scenario frame (id-seeded pattern)."""
    seed = zlib.crc32(frame_id.encode("utf-8"))
    row = bytearray(width * channels)
    data = bytearray()
    for y in range(height):
        for x in range(width):
            base = (x * 7 + y * 13 + seed) & 0xFF
            for c in range(channels):
                row[x * channels + c] = (base + 31 * c) & 0xFF
        data += row
    return ImageBuffer(width, height, channels, bytes(data))


def crop_frame(frame: ImageBuffer, rect: Rect) -> ImageBuffer:
    """Copy the rect out of the frame, clamped to frame bounds, bit-exactly."""
    rect.validate()
    x0 = max(0, int(round(rect.x)))
    y0 = max(0, int(round(rect.y)))
    x1 = min(frame.width, int(round(rect.x + rect.width)))
    y1 = min(frame.height, int(round(rect.y + rect.height)))
    if x1 <= x0 or y1 <= y0:
        raise CropError(f"crop {rect} does not intersect {frame.width}x{frame.height} frame")
    c = frame.channels
    stride = frame.width * c
    out = bytearray()
    for y in range(y0, y1):
        start = y * stride + x0 * c
        out += frame.data[start : start + (x1 - x0) * c]
    return ImageBuffer(x1 - x0, y1 - y0, c, bytes(out))


class PrivacyLevel(enum.Enum):
    INSENSITIVE = "insensitive"
    MAYBE_SENSITIVE = "maybeSensitive"
    HIGHLY_SENSITIVE = "highlySensitive"


# The twelve object categories used by the bundled audit corpus. Level
# assignments are a deployment policy, not ground truth; override in config.
DEFAULT_POLICY_TABLE = {
    "cup": PrivacyLevel.INSENSITIVE,
    "desk": PrivacyLevel.INSENSITIVE,
    "chair": PrivacyLevel.INSENSITIVE,
    "book": PrivacyLevel.INSENSITIVE,
    "bag": PrivacyLevel.INSENSITIVE,
    "laptop": PrivacyLevel.MAYBE_SENSITIVE,
    "phone": PrivacyLevel.MAYBE_SENSITIVE,
    "monitor": PrivacyLevel.MAYBE_SENSITIVE,
    "lab_equipment": PrivacyLevel.MAYBE_SENSITIVE,
    "face": PrivacyLevel.HIGHLY_SENSITIVE,
    "medicine": PrivacyLevel.HIGHLY_SENSITIVE,
    "id_card": PrivacyLevel.HIGHLY_SENSITIVE,
    "mail": PrivacyLevel.HIGHLY_SENSITIVE,
}


@dataclass(frozen=True)
class PrivacyPolicy:
    levels: dict[str, PrivacyLevel] = field(default_factory=lambda: dict(DEFAULT_POLICY_TABLE))
    default: PrivacyLevel = PrivacyLevel.INSENSITIVE

    def level_for(self, label: str) -> PrivacyLevel:
        return self.levels.get(label.lower(), self.default)

    @classmethod
    def from_mapping(cls, mapping: dict[str, str], default: str = "insensitive") -> "PrivacyPolicy":
        return cls(
            levels={k.lower(): PrivacyLevel(v) for k, v in mapping.items()},
            default=PrivacyLevel(default),
        )


@dataclass(frozen=True, slots=True)
class AuditResult:
    insensitive_present: bool
    maybe_present: bool
    highly_present: bool

    def for_level(self, level: PrivacyLevel) -> bool:
        return {
            PrivacyLevel.INSENSITIVE: self.insensitive_present,
            PrivacyLevel.MAYBE_SENSITIVE: self.maybe_present,
            PrivacyLevel.HIGHLY_SENSITIVE: self.highly_present,
        }[level]


def privacy_audit(
    detections: list[Detection], crop_rect: Rect | None, policy: PrivacyPolicy
) -> AuditResult:
    """Per-level presence flags, before (no crop) or after a crop.

    After a crop, a detection still counts as present on any overlap with
    the crop rectangle: a partially visible sensitive object is present.
    """
    present = {level: False for level in PrivacyLevel}
    for d in detections:
        if crop_rect is not None and not _overlaps(d.bbox, crop_rect):
            continue
        present[policy.level_for(d.label)] = True
    return AuditResult(
        insensitive_present=present[PrivacyLevel.INSENSITIVE],
        maybe_present=present[PrivacyLevel.MAYBE_SENSITIVE],
        highly_present=present[PrivacyLevel.HIGHLY_SENSITIVE],
    )


@dataclass(frozen=True, slots=True)
class CropTrial:
    expected: Rect | None
    returned: Rect | None


@dataclass(frozen=True, slots=True)
class CropMetrics:
    crop_recall: float
    crop_fallout: float
    crop_trials: int
    none_trials: int


def crop_metrics(trials: list[CropTrial], iou_threshold: float = 0.5) -> CropMetrics:
    """Recall over crop-expected trials, fallout over none-expected trials.

    The two denominators are disjoint by construction. A denominator of
    zero yields 0.0 for that metric.
    """
    if not trials:
        raise ValueError("trials must be nonempty")
    crop_total = hits = none_total = false_crops = 0
    for t in trials:
        if t.expected is not None:
            crop_total += 1
            if t.returned is not None and iou(t.expected, t.returned) > iou_threshold:
                hits += 1
        else:
            none_total += 1
            if t.returned is not None:
                false_crops += 1
    return CropMetrics(
        crop_recall=hits / crop_total if crop_total else 0.0,
        crop_fallout=false_crops / none_total if none_total else 0.0,
        crop_trials=crop_total,
        none_trials=none_total,
    )


@dataclass(slots=True)
class ConsentDecision:
    request_id: str
    approved: bool
    decided_at: float
    shown_detections: list[str]


class ConsentRegistry:
    """Pending crop prompts and their single, binding decisions."""

    def __init__(self):
        self._pending: dict[str, list[str]] = {}
        self._decided: dict[str, ConsentDecision] = {}

    def open_prompt(self, request_id: str, shown_labels: list[str]) -> None:
        if request_id in self._pending or request_id in self._decided:
            raise ValueError(f"consent already requested for {request_id}")
        self._pending[request_id] = list(shown_labels)

    def is_pending(self, request_id: str) -> bool:
        return request_id in self._pending

    def decide(self, request_id: str, approved: bool, now: float) -> ConsentDecision:
        """Record the decision; late or duplicate replies keep the first one."""
        if request_id in self._decided:
            logger.warning("duplicate consent decision for %s ignored", request_id)
            return self._decided[request_id]
        labels = self._pending.pop(request_id, None)
        if labels is None:
            raise KeyError(f"no pending consent for {request_id}")
        decision = ConsentDecision(
            request_id=request_id,
            approved=approved,
            decided_at=now,
            shown_detections=labels,
        )
        self._decided[request_id] = decision
        return decision

    def decision_for(self, request_id: str) -> ConsentDecision | None:
        return self._decided.get(request_id)

    def approved_for(self, request_id: str) -> bool:
        d = self._decided.get(request_id)
        return d is not None and d.approved


@dataclass(frozen=True, slots=True)
class ScenarioFrame:
    frame_id: str
    width: int
    height: int
    detections: tuple[Detection, ...]


def parse_frame_corpus(text: str) -> dict[str, ScenarioFrame]:
    """Parse the detector scenario format.

    One frame per block: a ``frame <id> <width> <height>`` header followed
    by ``label cx cy l t r b conf`` detection lines. ``#`` starts a comment.
    """
    frames: dict[str, ScenarioFrame] = {}
    current: tuple[str, int, int] | None = None
    detections: list[Detection] = []

    def flush():
        nonlocal current, detections
        if current is not None:
            fid, w, h = current
            frames[fid] = ScenarioFrame(fid, w, h, tuple(detections))
        current = None
        detections = []

    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        parts = line.split()
        if parts[0] == "frame":
            if len(parts) != 4:
                raise ScenarioError(f"line {lineno}: frame header needs id, width, height")
            flush()
            current = (parts[1], int(parts[2]), int(parts[3]))
        else:
            if current is None:
                raise ScenarioError(f"line {lineno}: detection before any frame header")
            if len(parts) != 8:
                raise ScenarioError(f"line {lineno}: expected 'label cx cy l t r b conf'")
            try:
                nums = [float(p) for p in parts[1:]]
            except ValueError as exc:
                raise ScenarioError(f"line {lineno}: {exc}") from exc
            detections.append(
                Detection(
                    label=parts[0],
                    center=(nums[0], nums[1]),
                    bbox=(nums[2], nums[3], nums[4], nums[5]),
                    confidence=nums[6],
                ).validate()
            )
    flush()
    return frames


class MockDetector:
    """Deterministic detector backed by a scenario corpus."""

    def __init__(self, frames: dict[str, ScenarioFrame]):
        self._frames = frames

    @classmethod
    def from_file(cls, path) -> "MockDetector":
        with open(path, "r", encoding="utf-8") as fh:
            return cls(parse_frame_corpus(fh.read()))

    def detect(self, frame_ref: str) -> list[Detection]:
        frame = self._frames.get(frame_ref)
        if frame is None:
            raise ScenarioError(f"unknown frame {frame_ref!r}")
        return list(frame.detections)

    def frame_size(self, frame_ref: str) -> tuple[int, int]:
        frame = self._frames.get(frame_ref)
        if frame is None:
            raise ScenarioError(f"unknown frame {frame_ref!r}")
        return (frame.width, frame.height)

    def frame_pixels(self, frame_ref: str) -> ImageBuffer:
        w, h = self.frame_size(frame_ref)
        return synthesize_frame(frame_ref, w, h)

    def frame_ids(self) -> list[str]:
        return list(self._frames)


class ExternalDetector:
    """Adapter for a real detector child process.

    Protocol over stdin/stdout: we write ``detect <frame_ref>``, the
    process answers with ``label cx cy l t r b conf`` lines and a final
    ``end`` line.
    """

    def __init__(self, command: list[str]):
        self._proc = subprocess.Popen(
            command,
            stdin=subprocess.PIPE,
            stdout=subprocess.PIPE,
            text=True,
            bufsize=1,
        )

    def detect(self, frame_ref: str) -> list[Detection]:
        assert self._proc.stdin and self._proc.stdout
        self._proc.stdin.write(f"detect {frame_ref}\n")
        self._proc.stdin.flush()
        out: list[Detection] = []
        while True:
            line = self._proc.stdout.readline()
            if not line:
                raise ScenarioError("detector process closed its stream")
            line = line.strip()
            if line == "end":
                return out
            parts = line.split()
            if len(parts) != 8:
                raise ScenarioError(f"bad detector record: {line!r}")
            nums = [float(p) for p in parts[1:]]
            out.append(
                Detection(
                    label=parts[0],
                    center=(nums[0], nums[1]),
                    bbox=(nums[2], nums[3], nums[4], nums[5]),
                    confidence=nums[6],
                )
            )

    def close(self) -> None:
        if self._proc.stdin:
            self._proc.stdin.close()
        self._proc.terminate()
        self._proc.wait(timeout=5)
