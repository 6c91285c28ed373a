"""gridcaps: vehicle next-location prediction on grid maps with a capsule network."""

__version__ = "0.1.0"
