"""Small-noise analysis of the stochastic nonlinear Schrödinger equation."""
from .spectral import *  # noqa: F401,F403
from .noise import *  # noqa: F401,F403
from .dynamics import *  # noqa: F401,F403
from .variational import *  # noqa: F401,F403
from .transmission import *  # noqa: F401,F403
from .io import *  # noqa: F401,F403

__version__ = "0.1.0"
