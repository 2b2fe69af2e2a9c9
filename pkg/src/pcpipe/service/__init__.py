"""HTTP service wrapping the core package."""
from pcpipe.service.app import create_app, serve

__all__ = ["create_app", "serve"]
