"""semrefine: variational refinement and MRF relabeling of labeled meshes."""

__version__ = "0.1.0"
