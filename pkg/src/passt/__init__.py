"""Predictive adaptive sampling of time-varying flow fields.

A neural ODE with a built-in Gaussian smoother forecasts a gridded velocity
field, a policy-gradient planner chooses where a robot samples, and Gaussian
process reconstruction folds the readings back into the forecast.
"""
from .errors import (ConfigError, DeadEnd, DegenerateData, DivergedError, FormatError, GapError, OutOfBounds,
                     PasstError, SchemaError, ShapeError, SingularKernel, VersionError)
from .grid import FlowSeries, FlowSnapshot, GridSpec, SmoothingKernel, read_flowpack, write_flowpack

__version__ = "0.1.0"
