"""Energy, carbon and water accounting for ML training and inference campaigns."""
from __future__ import annotations

__version__ = "0.1.0"
