import json
from typing import List

from config import REPO_ROOT
from domain_model import ContentItem
from scenario_harness import ScenarioConfig

SCENARIO_DIR = REPO_ROOT / "scenarios"

CONTENTS: List[ContentItem] = [
    ContentItem(content_id="c1", size_bytes=65536, duration_s=12.0, blob_seed=101),
    ContentItem(content_id="c2", size_bytes=65536, duration_s=13.0, blob_seed=102),
    ContentItem(content_id="c3", size_bytes=32768, duration_s=8.0, blob_seed=103),
    ContentItem(content_id="sample-1", size_bytes=16384, duration_s=4.0, blob_seed=7),
]


def load_scenario(name: str, **overrides) -> ScenarioConfig:
    with open(SCENARIO_DIR / f"{name}.json", "r", encoding="utf-8") as f:
        raw = json.load(f)
    raw.update(overrides)
    return ScenarioConfig.model_validate(raw)
