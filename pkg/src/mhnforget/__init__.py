"""Energy landscapes of modern Hopfield networks as a lens on forgetting and replay."""

__version__ = "0.1.0"
