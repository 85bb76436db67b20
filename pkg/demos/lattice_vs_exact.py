"""
Global attention through the permutohedral lattice
==================================================

Each node attends to every other node with weight exp(-lam * distance).
Done exactly that costs O(N^2); the lattice filter gets close in O(N).
"""

import time

import numpy as np

from phgcn.attention import exact_global_numpy, lattice_global_numpy
from phgcn.calibration import clustered_instance, cosine_rows
from phgcn.permutohedral import elevate, find_simplex, lattice_constants, splat

rng = np.random.default_rng(0)

# five tight clusters in a 4-d embedding space, 8 feature channels per node
positions, features = clustered_instance(rng, n=200, d=4, channels=8)

# lift into the lattice: every point lands in a simplex of D+1 vertices
c, kappa = lattice_constants(4)
emb = find_simplex(elevate(positions - positions.min(axis=0), 10.0 * c))
print("barycentric weights of the first point:", np.round(emb.weights[0], 3))
print("vertices touched by all 200 points:", len(splat(emb, features).keys))

# the two global aggregations side by side
exact = exact_global_numpy(positions, features, 10.0)
approx = lattice_global_numpy(positions, features, 10.0)
cos = cosine_rows(exact, approx)
print(f"cosine(lattice, exact): median {np.median(cos):.3f}, min {cos.min():.3f}")

# cost: doubling N roughly doubles the lattice time and quadruples the exact one
for n in (1000, 2000, 4000, 8000):
    p, f = rng.normal(size=(n, 4)), rng.normal(size=(n, 8))
    t = time.perf_counter()
    lattice_global_numpy(p, f, 10.0)
    t_lat = time.perf_counter() - t
    t = time.perf_counter()
    exact_global_numpy(p, f, 10.0)
    t_ex = time.perf_counter() - t
    print(f"N={n:5d}  lattice {1e3 * t_lat:7.1f} ms   exact {1e3 * t_ex:7.1f} ms")
