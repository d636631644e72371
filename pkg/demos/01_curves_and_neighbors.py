"""Space-filling curves as a neighbor index.

Points are quantized to a grid, mapped to Hilbert (or Morton) codes and
sorted. Nearest neighbors are then looked up in a window of the sorted order
instead of a tree.
"""

# %%
import numpy as np

from serialsdf.curves import CurveKind, CurveParams, hilbert_decode, serialize_points
from serialsdf.spatial import build_index
from serialsdf.metrics import recall_benchmark
from serialsdf.pyramid import PointCloud, build_pyramid
from serialsdf.spatial import NeighborQueryConfig, approx_neighbors, exact_knn

# %% The 2-bit Hilbert curve visits all 64 cells, each step moving to a face neighbor
cells = np.asarray(hilbert_decode(np.arange(64, dtype=np.uint64), bits=2))
print(cells[:8].tolist())
print("steps of length 1:", bool(np.all(np.abs(np.diff(cells.astype(int), axis=0)).sum(axis=1) == 1)))

# %% Serialize a random cloud on a 1 cm grid
rng = np.random.default_rng(0)
pts = rng.uniform(0, 1, size=(20_000, 3))
params = CurveParams.for_points(pts, grid_size=0.01)
codes = serialize_points(pts, params)
print("distinct codes:", len(np.unique(codes)), "of", len(pts))

# %% Window lookup vs exact KNN for one query
index = build_index(pts, params, pool_size=0.01)
q = np.array([0.5, 0.5, 0.5])
approx = approx_neighbors(index, q, NeighborQueryConfig(k=8))
exact = exact_knn(pts, q, 8)
print("approx:", approx.indices.tolist())
print("exact: ", exact.indices.tolist())
print("shared:", len(approx.index_set() & exact.index_set()), "of 8")

# %% Pooling the cloud into coarser levels adds neighbors the fine window misses
pyramid = build_pyramid(PointCloud(pts), S=4, base_pool=0.02, curve_params=params)
queries = rng.uniform(0, 1, size=(1000, 3))
table = recall_benchmark(pyramid, queries)
print("scales  hilbert  morton")
for m in range(pyramid.S):
    print(f"{m:>6}  {table.column(CurveKind.HILBERT)[m]:.3f}    {table.column(CurveKind.MORTON)[m]:.3f}")
