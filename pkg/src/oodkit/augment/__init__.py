"""Stage-1 augmentation: copy-paste, weather, CutMix and policies."""
from .copypaste import (
    BankEntry, CutMixParams, ObjectBank, copy_paste_context, copy_paste_occlusion, cutmix,
)
from .pipeline import AugPipeline, Resources, Stage
from .policy import AugPolicy, PolicyKind, apply_policy
from .weather import Weather, WeatherKind, weather

__all__ = [
    "AugPipeline", "AugPolicy", "BankEntry", "CutMixParams", "ObjectBank", "PolicyKind",
    "Resources", "Stage", "Weather", "WeatherKind", "apply_policy", "copy_paste_context",
    "copy_paste_occlusion", "cutmix", "weather",
]
