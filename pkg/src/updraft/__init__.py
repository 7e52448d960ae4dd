"""Maximum-updraft retrieval from radar reflectivity with SHASH parametric regression."""

__version__ = "0.1.0"
