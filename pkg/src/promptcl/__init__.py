"""Two-level prompt continual learner on a self-contained autodiff core."""

__version__ = "0.1.0"
