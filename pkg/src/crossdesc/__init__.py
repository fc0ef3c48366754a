"""Cross-domain descriptor toolkit.

Learns a shared embedding for 2D color patches and 3D colored point-cloud
patches with a dual auto-encoder and a triplet objective, and applies it to
2D matching, rigid registration, 2D-to-3D place recognition, and
sparse-to-dense depth estimation.
"""

__version__ = "0.1.0"
