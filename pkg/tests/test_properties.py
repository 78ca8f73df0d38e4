"""Seeded randomized checks of the pure decision functions against brute-force oracles."""
import math
import random
from collections import defaultdict

import pytest

import abr
from cdn_provider import FlashCrowdDetector, pod_score, select_pod
from domain_model import AccessInfo, PoDDescriptor, Region, RequestEvent
from errors import CdnError, ErrorCode

CASES = 250
REGIONS = ["bc", "ontario", "quebec"]


def _random_pods(rng):
    pods = []
    for n in range(rng.randint(1, 6)):
        total = rng.randint(0, 6)
        pods.append(PoDDescriptor(
            pod_id=f"pod-{rng.choice('abcdef')}{n}",
            region=Region(id=rng.choice(REGIONS)),
            capacity_total=total,
            capacity_free=rng.randint(0, total),
            access=AccessInfo.local("127.0.0.1", 9000 + n),
        ))
    return pods


def _oracle_pod(pods, region, required):
    eligible = [p for p in pods if p.capacity_free >= required]
    if not eligible:
        return None
    best = max(pod_score(p, region) for p in eligible)
    return sorted(p.pod_id for p in eligible if pod_score(p, region) == best)[0]


@pytest.mark.parametrize("seed", range(CASES))
def test_select_pod_matches_oracle(seed):
    rng = random.Random(seed)
    pods = _random_pods(rng)
    region = Region(id=rng.choice(REGIONS))
    required = rng.randint(1, 2)
    expected = _oracle_pod(pods, region, required)
    if expected is None:
        with pytest.raises(CdnError) as exc:
            select_pod(pods, region, required)
        assert exc.value.code == ErrorCode.NO_ELIGIBLE_POD
        return
    chosen = select_pod(pods, region, required)
    assert chosen.pod_id == expected
    assert chosen.capacity_free >= required
    if any(p.region.id == region.id and p.capacity_free >= required for p in pods):
        assert chosen.region.id == region.id


@pytest.mark.parametrize("seed", range(CASES))
def test_freeing_capacity_keeps_the_chosen_pod(seed):
    rng = random.Random(10_000 + seed)
    pods = _random_pods(rng)
    region = Region(id=rng.choice(REGIONS))
    try:
        chosen = select_pod(pods, region)
    except CdnError:
        return
    if chosen.capacity_free == chosen.capacity_total:
        return
    roomier = chosen.model_copy(update={"capacity_free": chosen.capacity_free + 1})
    others = [p for p in pods if p is not chosen]
    assert select_pod(others + [roomier], region).pod_id == chosen.pod_id


@pytest.mark.parametrize("seed", range(CASES))
def test_detector_matches_sliding_window_oracle(seed):
    rng = random.Random(20_000 + seed)
    window_s = rng.choice([0.5, 1.0, 2.0])
    threshold = rng.choice([2.0, 4.0, 8.0])
    detector = FlashCrowdDetector(window_s, threshold)
    window_ns = int(window_s * 1_000_000_000)

    t = 0
    seen = defaultdict(list)
    for _ in range(rng.randint(1, 120)):
        t += rng.randint(0, 300_000_000)
        region = Region(id=rng.choice(REGIONS[:2]))
        content_id = rng.choice(["c1", "c2", "c3"])
        seen[region.id].append((t, content_id))
        in_window = [c for ts, c in seen[region.id] if t - window_ns < ts <= t]
        expected_fire = len(in_window) / window_s >= threshold

        trigger = detector.observe(RequestEvent(region=region, content_id=content_id, t=t))
        assert (trigger is not None) == expected_fire
        if trigger is not None:
            counts = defaultdict(int)
            for c in in_window:
                counts[c] += 1
            assert trigger.top_contents == sorted(counts.items(), key=lambda kv: (-kv[1], kv[0]))
            assert trigger.window == (t - window_ns, t)


@pytest.mark.parametrize("seed", range(CASES))
def test_manifest_arithmetic(seed):
    rng = random.Random(30_000 + seed)
    duration_s = round(rng.uniform(0.1, 100.0), 3)
    segment_s = rng.choice([2.0, 4.0, 6.0])
    manifest = abr.build_manifest("c", duration_s, segment_s)

    count = math.ceil(duration_s / segment_s)
    assert all(r.segment_count == count for r in manifest.representations)
    assert len(manifest.segment_durations) == count
    assert manifest.segment_durations[:-1] == [segment_s] * (count - 1)
    assert 0 < manifest.segment_durations[-1] <= segment_s
    assert sum(manifest.segment_durations) == pytest.approx(duration_s, abs=1e-6)

    blob = bytes(range(256)) * 64
    rep = rng.choice(manifest.representations)
    n = rng.randrange(rep.segment_count)
    body = abr.slice_segment(blob, manifest, rep.rep_id, n)
    assert len(body) == abr.segment_length(rep.bitrate_bps, manifest.segment_durations[n])
    assert body == abr.slice_segment(blob, manifest, rep.rep_id, n)
