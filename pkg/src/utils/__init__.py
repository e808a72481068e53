"""
Utility functions for the CRAFT harness
"""

from .mylogger import logging
from .errors import GradientError, PipelineError, RankDeficiencyError, ShapeError

__all__ = ['logging', 'GradientError', 'PipelineError', 'RankDeficiencyError', 'ShapeError']
