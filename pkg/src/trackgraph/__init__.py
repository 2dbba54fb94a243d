"""trackgraph: a recurrent graph-network track manager for video instance
segmentation, operating on detection streams instead of raw video."""

__version__ = "0.1.0"
