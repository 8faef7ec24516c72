"""Phone-event mobility analysis: homes, km-grid presence, DiD, LISA and k-NN context."""
from .errors import (ConfigError, ContractError, DataError, DoubleCountError, EmptyInputError,
                     GenerationError, GranularityError, InvalidCoordinateError, MobiscopeError,
                     PrivacyViolationError, RowError)
from .geo import HourBucket, KmCell, PlanarPoint, euclid, to_hour_bucket, truncate_to_km

__version__ = "0.1.0"

__all__ = [
    "ConfigError", "ContractError", "DataError", "DoubleCountError", "EmptyInputError",
    "GenerationError", "GranularityError", "InvalidCoordinateError", "MobiscopeError",
    "PrivacyViolationError", "RowError", "HourBucket", "KmCell", "PlanarPoint", "euclid",
    "to_hour_bucket", "truncate_to_km",
]
