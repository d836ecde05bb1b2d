"""Exception types shared across the package."""


class ConfigError(ValueError):
    """Invalid configuration or arguments."""


class DataError(ValueError):
    """A data file or manifest failed validation."""


class DegenerateSignal(DataError):
    """A region's time series has zero variance."""

    def __init__(self, region: int, context: str = ""):
        self.region = region
        where = f" in {context}" if context else ""
        super().__init__(f"region {region} has zero variance{where}")
