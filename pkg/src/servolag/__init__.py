"""Lagrangian neural networks for servo-driven mechanical systems.

The package learns a mass matrix and potential energy from trajectory data
of systems whose driven coordinates are prescribed externally (servo
outputs), and evaluates forces, energies, and power from one network pass.
Hot kernels run through a compiled tape executor when the extension built;
a numpy executor is selected as fallback at import time.
"""

from servolag.autodiff.tape import available_engines, default_engine

__version__ = "0.1.0"

__all__ = ["available_engines", "default_engine", "__version__"]
