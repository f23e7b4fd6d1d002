"""HTTP service exposing the attribution pipeline and registry."""

from .app import create_app

__all__ = ["create_app"]
