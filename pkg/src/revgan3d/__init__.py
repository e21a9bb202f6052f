"""Memory-efficient 3-D image-to-image translation with a reversible core."""

__version__ = "0.1.0"
