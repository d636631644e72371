"""End-to-end reconstruction: cloud -> features -> field -> mesh."""

from __future__ import annotations

import numpy as np

from .curves import CurveKind, CurveParams
from .field import DecoderField, DecoderParams, ImlsField
from .mesher import ExtractionConfig, Mesh, extract_mesh
from .pyramid import PointCloud, build_pyramid, estimate_local_geometry
from .spatial import NeighborQueryConfig, build_index, partition_segments


def prepare_cloud(cloud: PointCloud, k=16, reference=None):
    """Estimate normals and features for a raw cloud (input normals are replaced)."""
    return estimate_local_geometry(PointCloud(cloud.positions), k=k, reference=reference)


def padded_bounds(positions, pad):
    positions = np.asarray(positions)
    return positions.min(axis=0) - pad, positions.max(axis=0) + pad


def imls_field(cloud: PointCloud, ncfg=NeighborQueryConfig(), kind=CurveKind.HILBERT, grid_size=0.01):
    params = CurveParams.for_points(cloud.positions, grid_size=grid_size)
    index = build_index(cloud.positions, params, kind, pool_size=grid_size)
    return ImlsField(cloud, index, ncfg)


def reconstruct_imls(
    cloud: PointCloud,
    ncfg=NeighborQueryConfig(),
    cell=0.02,
    kind=CurveKind.HILBERT,
    grid_size=0.01,
    bounds=None,
    pad=None,
):
    """Mesh the IMLS field of an oriented cloud (call :func:`prepare_cloud` first)."""
    field = imls_field(cloud, ncfg, kind, grid_size)
    if bounds is None:
        bounds = padded_bounds(cloud.positions, 3 * cell if pad is None else pad)
    return extract_mesh(field, ExtractionConfig(bounds, cell))


def decoder_field(cloud: PointCloud, params: DecoderParams, ncfg=NeighborQueryConfig(), base_pool=0.02, kind=CurveKind.HILBERT, grid_size=0.01):
    curve = CurveParams.for_points(cloud.positions, grid_size=grid_size)
    pyramid = build_pyramid(cloud, params.S, base_pool, curve, kind)
    return DecoderField(pyramid, params, ncfg)


def reconstruct_decoder(
    cloud: PointCloud,
    params: DecoderParams,
    ncfg=NeighborQueryConfig(),
    cell=0.02,
    base_pool=0.02,
    kind=CurveKind.HILBERT,
    grid_size=0.01,
    bounds=None,
    pad=None,
    mask_gate=True,
):
    field = decoder_field(cloud, params, ncfg, base_pool, kind, grid_size)
    if bounds is None:
        bounds = padded_bounds(cloud.positions, 3 * cell if pad is None else pad)
    return extract_mesh(field, ExtractionConfig(bounds, cell, mask_gate=mask_gate))


def merge_meshes(meshes):
    verts, tris, offset = [], [], 0
    for m in meshes:
        verts.append(m.vertices)
        tris.append(m.triangles + offset)
        offset += len(m.vertices)
    if not verts:
        return Mesh(np.zeros((0, 3)), np.zeros((0, 3), np.int64))
    return Mesh(np.concatenate(verts), np.concatenate(tris))


def segment_cloud(cloud: PointCloud, n_segments, kind=CurveKind.HILBERT, grid_size=0.01):
    """Point-index lists of ``n_segments`` contiguous curve-order runs."""
    params = CurveParams.for_points(cloud.positions, grid_size=grid_size)
    return partition_segments(build_index(cloud.positions, params, kind), n_segments)


def reconstruct_segmented(
    cloud: PointCloud,
    n_segments,
    ncfg=NeighborQueryConfig(),
    cell=0.02,
    k_features=16,
    kind=CurveKind.HILBERT,
    grid_size=0.01,
    params: DecoderParams | None = None,
    base_pool=0.02,
    mask_gate=True,
):
    """Reconstruct each curve-order segment on its own and merge the meshes.

    Features, normals, indices and fields are all built per segment, so no
    information crosses segment boundaries. Normals are oriented against the
    centroid of the whole cloud. Each segment is meshed over its own padded
    bounding box.
    """
    reference = cloud.positions.mean(axis=0)
    meshes = []
    for seg in segment_cloud(cloud, n_segments, kind, grid_size):
        if len(seg) <= k_features:
            continue
        sub = estimate_local_geometry(PointCloud(cloud.positions[seg]), k=k_features, reference=reference)
        bounds = padded_bounds(sub.positions, 2 * cell)
        if params is None:
            meshes.append(reconstruct_imls(sub, ncfg, cell, kind, grid_size, bounds=bounds))
        else:
            meshes.append(reconstruct_decoder(sub, params, ncfg, cell, base_pool, kind, grid_size, bounds=bounds, mask_gate=mask_gate))
    return merge_meshes(meshes)
