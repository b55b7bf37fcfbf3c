"""De-mediation g-estimation of controlled direct effects in longitudinal
trials, plus the simulation machinery to study the estimators."""

__version__ = "0.1.0"
