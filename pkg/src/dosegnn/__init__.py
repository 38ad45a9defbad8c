"""Dose prediction on mismatched CT/dose grids with a bipartite voxel GNN."""

__version__ = "0.1.0"
