"""Multiplicative buy-and-hold approximation of no-short-sales wealth processes."""

__version__ = "0.1.0"

from .market import (  # noqa: E402
    AssetPaths,
    ModelError,
    ModelSpec,
    TimeGrid,
    simulate,
)
from .portfolio import (  # noqa: E402
    ConstantFraction,
    Partition,
    check_no_short_sales,
    wealth_additive_units,
    wealth_continuous,
    wealth_multiplicative,
)

__all__ = [
    "AssetPaths",
    "ConstantFraction",
    "ModelError",
    "ModelSpec",
    "Partition",
    "TimeGrid",
    "check_no_short_sales",
    "simulate",
    "wealth_additive_units",
    "wealth_continuous",
    "wealth_multiplicative",
]
