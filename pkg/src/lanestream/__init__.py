"""lanestream: streaming lane-segment perception and topology reasoning.

A desk-scale, fully inspectable pipeline: synthetic lane-graph scenes are
rasterized into BEV feature grids, decoded by a query-based transformer
with temporal streaming memory and lane-segment denoising, and scored
with lane-graph detection and topology metrics.
"""
__version__ = "0.1.0"
