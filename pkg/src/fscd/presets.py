"""Named hyperparameter presets.

``paper`` carries the published training recipe (250 epochs, batch 64,
512 px tiles).  ``desk`` is the CPU-scale recipe the acceptance suite runs.
"""
from __future__ import annotations

import copy

PRESETS = {
    "desk": {
        "epochs": 30,
        "batch": 8,
        "tile_size": 64,
        "lr": 1e-3,
        "encoder_channels": [8, 16, 32],
        "blocks_per_stage": 2,
        "dropout": 0.5,
        "survival_p": 0.8,
        "fusion": "SiamDiff",
        "shots": 5,
        "adapt_epochs": 20,
        "adapt_lr": 1e-3,
        "adapt_batch": 1,
        "mc_samples": 20,
    },
    "paper": {
        "epochs": 250,
        "batch": 64,
        "tile_size": 512,
        "lr": 1e-3,
        "encoder_channels": [16, 32, 64],
        "blocks_per_stage": 2,
        "dropout": 0.5,
        "survival_p": 0.8,
        "fusion": "SiamDiff",
        "shots": 5,
        "adapt_epochs": 20,
        "adapt_lr": 1e-4,
        "adapt_batch": 8,
        "mc_samples": 20,
    },
}


def resolve(preset: str = "desk", **overrides) -> dict:
    """Preset values with non-None ``overrides`` applied on top."""
    if preset not in PRESETS:
        raise KeyError(f"unknown preset {preset!r}; choose from {sorted(PRESETS)}")
    values = copy.deepcopy(PRESETS[preset])
    for key, value in overrides.items():
        if value is None:
            continue
        if key not in values:
            raise KeyError(f"unknown preset field {key!r}")
        values[key] = value
    return values
