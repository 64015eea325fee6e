"""HTTP admin surface for the edge and cloud nodes."""

from .api import AdminServer, create_cloud_app, create_edge_app

__all__ = ["AdminServer", "create_cloud_app", "create_edge_app"]
