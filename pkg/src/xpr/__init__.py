"""Cross-modal place retrieval: camera-style queries matched against
multi-view LiDAR map descriptors with hybrid geometric+semantic scoring."""

__version__ = "0.1.0"
