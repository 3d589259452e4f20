from pydantic_settings import BaseSettings, SettingsConfigDict
from functools import lru_cache
from typing import List


class Settings(BaseSettings):
    model_config = SettingsConfigDict(env_prefix="CAPKIT_", env_file=".env", extra="ignore")

    # Solver defaults
    epsilon_schedule: List[float] = [1e-1, 1e-2, 1e-3, 1e-4]
    gradient_tolerance: float = 1e-8
    max_iterations: int = 500
    line_search_shrink: float = 0.5
    line_search_sufficient_decrease: float = 1e-4
    value_tolerance: float = 1e-6
    solver_method: str = "newton"

    # Reports
    output_dir: str = "results"
    csv_significant_digits: int = 17
    write_plots: bool = True

    # Logging
    log_level: str = "INFO"


@lru_cache()
def get_settings():
    return Settings()
