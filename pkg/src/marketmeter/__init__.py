"""marketmeter: ground-truth market simulation, censored crawl simulation,
and the statistical pipeline that estimates sales and revenue from the
censored observations."""

__version__ = "0.1.0"

from .kernels import active_backend

__all__ = ["active_backend", "__version__"]
