"""Equivariant networks on sparse sinogram measurements.

Submodules are imported lazily by callers; this file stays light so the CLI
can set thread environment variables before numpy loads.
"""

__version__ = "0.1.0"
