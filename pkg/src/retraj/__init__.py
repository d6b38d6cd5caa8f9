"""retraj: camera-controlled novel-trajectory video generation on synthetic splat scenes."""

__version__ = "0.1.0"
