"""Paired-video manifests: JSON-lines loading, blacklist filtering, alignment."""
from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable

log = logging.getLogger(__name__)

VIEWS = ("first", "third")


class ManifestError(ValueError):
    """Raised for malformed or inconsistent manifest content."""


@dataclass(frozen=True)
class StreamRef:
    path: str
    fps: float
    duration: float

    @property
    def n_seconds(self) -> int:
        # frames are decoded at 1 fps: one frame per whole second
        return int(math.floor(self.duration))


@dataclass(frozen=True)
class ActionSegment:
    label: str
    start: float
    end: float


@dataclass(frozen=True)
class VideoPair:
    pair_id: str
    first_view: StreamRef
    third_view: StreamRef
    action_segments: tuple[ActionSegment, ...] = ()
    valid: bool = True

    def stream(self, view: str) -> StreamRef:
        if view == "first":
            return self.first_view
        if view == "third":
            return self.third_view
        raise ValueError(f"unknown view {view!r}")

    def to_json(self) -> dict:
        return {
            "pair_id": self.pair_id,
            "first_view": _stream_json(self.first_view),
            "third_view": _stream_json(self.third_view),
            "action_segments": [
                {"label": s.label, "start": s.start, "end": s.end}
                for s in self.action_segments
            ],
        }


def _stream_json(s: StreamRef) -> dict:
    return {"path": s.path, "fps": s.fps, "duration": s.duration}


@dataclass(frozen=True)
class Manifest:
    entries: tuple[VideoPair, ...] = ()
    source_tag: str = ""
    root: Path | None = field(default=None, compare=False)

    def __post_init__(self):
        seen = set()
        for p in self.entries:
            if p.pair_id in seen:
                raise ManifestError(f"duplicate pair_id {p.pair_id!r}")
            seen.add(p.pair_id)

    def __len__(self) -> int:
        return len(self.entries)

    def __iter__(self):
        return iter(self.entries)

    @property
    def ids(self) -> list[str]:
        return [p.pair_id for p in self.entries]

    def get(self, pair_id: str) -> VideoPair:
        for p in self.entries:
            if p.pair_id == pair_id:
                return p
        raise KeyError(pair_id)

    def valid_pairs(self) -> list[VideoPair]:
        return [p for p in self.entries if p.valid]

    def subset(self, ids: Iterable[str]) -> "Manifest":
        keep = set(ids)
        return replace(self, entries=tuple(p for p in self.entries if p.pair_id in keep))

    def write(self, path: str | Path) -> None:
        path = Path(path)
        with path.open("w", encoding="utf-8") as fh:
            for p in self.entries:
                fh.write(json.dumps(p.to_json(), sort_keys=True) + "\n")


def _parse_stream(obj, key: str, lineno: int) -> StreamRef:
    if key not in obj:
        raise ManifestError(f"line {lineno}: missing {key!r}")
    s = obj[key]
    try:
        ref = StreamRef(path=str(s["path"]), fps=float(s["fps"]), duration=float(s["duration"]))
    except (KeyError, TypeError, ValueError) as exc:
        raise ManifestError(f"line {lineno}: bad {key!r}: {exc}") from None
    if not ref.duration > 0:
        raise ManifestError(f"line {lineno}: {key} duration must be positive")
    return ref


def parse_pair(obj: dict, lineno: int = 0) -> VideoPair:
    if not isinstance(obj, dict):
        raise ManifestError(f"line {lineno}: expected a JSON object")
    if "pair_id" not in obj:
        raise ManifestError(f"line {lineno}: missing 'pair_id'")
    first = _parse_stream(obj, "first_view", lineno)
    third = _parse_stream(obj, "third_view", lineno)
    segments = []
    for seg in obj.get("action_segments", []):
        try:
            s = ActionSegment(str(seg["label"]), float(seg["start"]), float(seg["end"]))
        except (KeyError, TypeError, ValueError) as exc:
            raise ManifestError(f"line {lineno}: bad action segment: {exc}") from None
        if not (0 <= s.start < s.end <= third.duration):
            raise ManifestError(
                f"line {lineno}: segment [{s.start}, {s.end}) outside third view duration {third.duration}"
            )
        segments.append(s)
    return VideoPair(str(obj["pair_id"]), first, third, tuple(segments))


def load_manifest(path: str | Path, source_tag: str | None = None) -> Manifest:
    """Parse a JSON-lines manifest. Blank lines are skipped.

    Errors name the offending 1-based line number.
    """
    path = Path(path)
    pairs: list[VideoPair] = []
    seen: set[str] = set()
    with path.open(encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ManifestError(f"line {lineno}: invalid JSON: {exc.msg}") from None
            pair = parse_pair(obj, lineno)
            if pair.pair_id in seen:
                raise ManifestError(f"line {lineno}: duplicate pair_id {pair.pair_id!r}")
            seen.add(pair.pair_id)
            pairs.append(pair)
    return Manifest(tuple(pairs), source_tag or path.name, root=path.parent)


def load_blacklist(path: str | Path) -> list[str]:
    lines = Path(path).read_text(encoding="utf-8").splitlines()
    return [ln.strip() for ln in lines if ln.strip() and not ln.lstrip().startswith("#")]


def filter_invalid_pairs(m: Manifest, blacklist: Iterable[str]) -> Manifest:
    blacklist = set(blacklist)
    ids = set(m.ids)
    missing = sorted(blacklist - ids)
    if missing:
        log.warning("%d blacklisted ids not in manifest (e.g. %s)", len(missing), missing[0])
    kept = tuple(p for p in m.entries if p.pair_id not in blacklist)
    log.info("filtered %d -> %d pairs (%d removed)", len(m), len(kept), len(m) - len(kept))
    return replace(m, entries=kept)


def align_timestamp(t_third: float, dur_third: float, dur_first: float) -> float:
    """Map a third-person time onto the first-person timeline by duration scaling."""
    if not (dur_third > 0 and dur_first > 0):
        raise ValueError("durations must be positive")
    t = t_third * dur_first / dur_third
    return min(max(t, 0.0), dur_first)
