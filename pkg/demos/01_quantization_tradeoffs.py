"""Product quantization: how subspace width trades memory for fidelity.

Trains codebooks at several subspace widths on one synthetic token corpus,
then reports bytes per vector and mean reconstruction error side by side.
Narrower subspaces mean more codebooks, more bytes, and less distortion.
"""

import numpy as np

from tokenrank import encode, reconstruct, train_codebooks
from tokenrank.core import TokenGrid, dense_grid_positions
from tokenrank.pq import mean_reconstruction_error

rng = np.random.default_rng(0)
D = 64
vectors = rng.standard_normal((2000, D)).astype(np.float32)

print(f"training corpus: {vectors.shape[0]} vectors, D={D}, K=256 centroids per subspace")
print(f"{'d':>4} {'subspaces':>10} {'bytes/vec':>10} {'mean sq err':>12}")
for d in (2, 4, 8, 16, 32, 64):
    cb = train_codebooks(vectors, d=d, k=256, seed=0)
    err = mean_reconstruction_error(vectors[:500], cb)
    print(f"{d:>4} {cb.num_subspaces:>10} {D // d:>10} {err:>12.4f}")

print()
print("fp16 storage of the same vector:", 2 * D, "bytes (the no-quantization payload)")

# A vector that coincides with centroids reconstructs exactly.
cb = train_codebooks(vectors, d=8, k=16, seed=1)
token = np.concatenate([cb.centroids[s][3] for s in range(cb.num_subspaces)])
grid = TokenGrid(token[None, :], dense_grid_positions(1, 1), 1, 1)
roundtrip = reconstruct(encode(grid, cb), cb)
print("centroid-aligned vector reconstructs exactly:", bool(np.array_equal(roundtrip[0], token)))
