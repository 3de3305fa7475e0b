"""CT display windowing: HU raster to an 8-bit display-range image.

Vision encoders expect display-range inputs, so HU values are mapped through
a level/width window before encoding.  Default is the soft-tissue window
(level 40, width 400); both are flags on the CLI.
"""

from __future__ import annotations

import numpy as np

DEFAULT_LEVEL = 40.0
DEFAULT_WIDTH = 400.0


def window_image(hu: np.ndarray, level: float = DEFAULT_LEVEL, width: float = DEFAULT_WIDTH) -> np.ndarray:
    """Map HU to uint8 via the (level, width) display window."""
    if width <= 0:
        raise ValueError("window width must be positive")
    lo = level - width / 2.0
    scaled = (np.asarray(hu, dtype=np.float64) - lo) / width
    return np.round(np.clip(scaled, 0.0, 1.0) * 255.0).astype(np.uint8)
