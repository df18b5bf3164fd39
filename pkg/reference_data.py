"""
REFERENCE DATA LOADER
=====================
Reads the closed-form reference constants and the regression fixture
parameters from datasets/, with built-in fallbacks when a file is missing.
"""

import json
from pathlib import Path
from typing import Any, Dict, List, Optional

from runtime import get_logger

logger = get_logger("reference_data")

DATASETS_DIR = Path(__file__).resolve().parent / "datasets"


class ReferenceData:
    """Load and query the reference tables."""

    FILES = {
        "reference": "reference_values.json",
        "fixtures": "acceptance_fixtures.json",
    }

    def __init__(self, datasets_dir: Optional[str] = None):
        self.datasets_dir = Path(datasets_dir) if datasets_dir else DATASETS_DIR
        self.data: Dict[str, Optional[Dict[str, Any]]] = {}
        self._load_all()

    def _load_all(self) -> None:
        for key, filename in self.FILES.items():
            path = self.datasets_dir / filename
            if path.exists():
                with open(path, "r", encoding="utf-8") as f:
                    self.data[key] = json.load(f)
                logger.debug("Loaded %s", filename)
            else:
                logger.warning("Missing %s; using built-in fallbacks", filename)
                self.data[key] = None

    # ========== SNAKE ==========

    def a0_d6(self) -> float:
        ref = self.data["reference"]
        return float(ref["snake"]["a0_d6"]) if ref else 6.0

    def u_d6_points(self) -> List[Dict[str, float]]:
        ref = self.data["reference"]
        if not ref:
            return [{"t": 2.0, "u": 2.0 / 3.0}, {"t": 3.0, "u": 0.09375}]
        return ref["snake"]["u_d6"]

    def low_dim_points(self) -> List[Dict[str, float]]:
        ref = self.data["reference"]
        if not ref:
            return [{"d": 3, "t": 2.0, "phi": 8.0}]
        return ref["low_dim_normalizer"]

    # ========== SCALING ==========

    def scaling_constant(self, name: str) -> Optional[float]:
        ref = self.data["reference"]
        if not ref:
            return None
        value = ref["scaling"].get(name)
        return None if value is None else float(value)

    def rate_exponent(self, d: int) -> Optional[float]:
        ref = self.data["reference"]
        if not ref:
            return (d - 4) / (2.0 * (d - 1))
        value = ref["rate_exponent"].get(str(d))
        return None if value is None else float(value)

    # ========== FIXTURES ==========

    def fixture(self, name: str) -> Dict[str, Any]:
        fixtures = self.data["fixtures"]
        if not fixtures or name not in fixtures:
            raise KeyError(f"No fixture named {name}")
        return fixtures[name]
