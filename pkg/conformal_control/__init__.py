"""
Conformal Control

Online conformal prediction intervals for time series under distribution
shift: a neural conformal controller with monotone quantile ladders, plus
split-conformal, NEXCP, ACI and C-PID baselines and calibration metrics.
"""

__version__ = "0.1.0"
