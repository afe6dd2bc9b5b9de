"""Human depth estimation network at desk scale: autodiff, geometry, model, metrics."""

__version__ = "0.1.0"
