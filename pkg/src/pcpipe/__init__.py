"""pcpipe: point-cloud dataset toolkit."""

__version__ = "0.1.0"
