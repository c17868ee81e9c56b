"""
Stores constant values used across the pipeline.
"""

from __future__ import annotations

from src.models import ContrastMode

MODE_OPTIONS = [mode.code for mode in ContrastMode]

# sRGB (IEC 61966-2-1) primaries and the D65 reference white
SRGB_PRIMARIES_XY = ((0.64, 0.33), (0.30, 0.60), (0.15, 0.06))
D65_WHITE = (0.95047, 1.0, 1.08883)

# embedding export role tags
ROLE_PRIOR = "zp"
ROLE_DISTORTED = "zd"
ROLE_WIN = "win"
ROLE_BANK = "bank"
ROLES = (ROLE_PRIOR, ROLE_DISTORTED, ROLE_WIN, ROLE_BANK)

# CLI exit codes
EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_IO = 3
EXIT_NUMERICAL = 4

# documentation only: the full-scale schedule this desk-scale pipeline mirrors
FULL_SCALE_TRAIN = {
    "views": {"crop_size": 150, "view_size": 120, "tile_size": 40},
    "encoder": {"embedding_dim": 128},
    "loss": {"tau": 0.07, "alpha": 0.5, "beta": 0.5, "k": 200},
    "train": {"batch_size": 64, "epochs": 600, "lr_max": 0.012, "lr_min": 1.2e-5},
}

# crop size of the prior view per input resolution
PRIOR_CROP_BY_INPUT = {576: 150, 336: 100, 240: 60}
