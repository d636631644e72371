"""Serialized neighborhoods, multi-scale point features and SDF surface reconstruction."""

__version__ = "0.1.0"

from .curves import CurveKind, CurveParams, decode, encode, quantize, serialize_points
from .errors import SerialSDFError
from .mesher import ExtractionConfig, Mesh, extract_mesh, sample_surface
from .metrics import ChamferReport, RecallTable, chamfer_l1, fscore, recall_benchmark
from .pyramid import FeaturePyramid, PointCloud, build_pyramid, estimate_local_geometry
from .spatial import (
    NeighborQueryConfig,
    NeighborSet,
    SerializedIndex,
    approx_neighbors,
    build_index,
    exact_knn,
    partition_segments,
)
