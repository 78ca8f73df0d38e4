"""ABR-lite: JSON manifests and deterministic segment bodies carved from a content blob."""
import math
from typing import List, Sequence

from domain_model import AbrManifest, Representation
from errors import CdnError, ErrorCode

DEFAULT_BITRATES = (400000, 800000, 1600000)
DEFAULT_SEGMENT_DURATION_S = 4.0


def rep_id_for(bitrate_bps: int) -> str:
    return f"{bitrate_bps // 1000}k"


def segment_durations(duration_s: float, segment_duration_s: float = DEFAULT_SEGMENT_DURATION_S) -> List[float]:
    """Declared duration of each segment; only the last one may be shorter."""
    count = math.ceil(duration_s / segment_duration_s)
    if count == 0:
        return []
    last = round(duration_s - (count - 1) * segment_duration_s, 9)
    return [segment_duration_s] * (count - 1) + [last]


def build_manifest(
    content_id: str,
    duration_s: float,
    segment_duration_s: float = DEFAULT_SEGMENT_DURATION_S,
    bitrates: Sequence[int] = DEFAULT_BITRATES,
) -> AbrManifest:
    if duration_s <= 0:
        raise CdnError(ErrorCode.INVALID_CONTENT, f"content '{content_id}' has no duration")
    durations = segment_durations(duration_s, segment_duration_s)
    return AbrManifest(
        content_id=content_id,
        duration_s=duration_s,
        segment_duration_s=segment_duration_s,
        representations=[
            Representation(rep_id=rep_id_for(b), bitrate_bps=b, segment_count=len(durations)) for b in bitrates
        ],
        segment_durations=durations,
    )


def segment_length(bitrate_bps: int, seconds: float) -> int:
    return int(bitrate_bps * seconds / 8)


def find_representation(manifest: AbrManifest, rep_id: str) -> Representation:
    for rep in manifest.representations:
        if rep.rep_id == rep_id:
            return rep
    raise CdnError(ErrorCode.SEGMENT_NOT_FOUND, f"no representation '{rep_id}' for '{manifest.content_id}'")


def slice_segment(blob: bytes, manifest: AbrManifest, rep_id: str, n: int) -> bytes:
    """
    Segment n of a representation: a cyclic slice of the content blob.

    The slice starts where segment n-1 ended, so consecutive segments tile the
    representation's byte stream.
    """
    rep = find_representation(manifest, rep_id)
    if not 0 <= n < rep.segment_count:
        raise CdnError(
            ErrorCode.SEGMENT_NOT_FOUND,
            f"segment {n} out of range for {manifest.content_id}/{rep_id}",
            {"segment_count": rep.segment_count},
        )
    full = segment_length(rep.bitrate_bps, manifest.segment_duration_s)
    length = segment_length(rep.bitrate_bps, manifest.segment_durations[n])
    if not blob or length == 0:
        return b""
    offset = (n * full) % len(blob)
    repeats = (offset + length) // len(blob) + 1
    return (blob * repeats)[offset:offset + length]
