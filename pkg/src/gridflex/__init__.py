"""Grid-responsive GPU cluster simulator and curtailment planner."""

from importlib.resources import files

__version__ = "0.1.0"


def data_path(*parts):
    """Path to a shipped data file (ensembles, curves, loads, scenarios, sweep)."""
    return files(__name__).joinpath("data", *parts)
