"""3-D Prewitt edge extractor on the source grid."""

import numpy as np
from scipy import ndimage, sparse

_OFFSETS = np.array([(a, b, c) for a in (-1, 0, 1) for b in (-1, 0, 1) for c in (-1, 0, 1)])


def prewitt_kernels():
    """x, y, z Prewitt kernels for correlation: ``k[a, b, c] = offset along the axis``."""
    base = np.broadcast_to(np.array([-1.0, 0.0, 1.0])[:, None, None], (3, 3, 3)).copy()
    return base, np.moveaxis(base, 0, 1).copy(), np.moveaxis(base, 0, 2).copy()


class EdgeOperator:
    """Directional Prewitt responses of a source-space field.

    The field is scattered onto the voxel volume (absent voxels are zero),
    correlated with each kernel under zero padding and gathered back at the
    source voxels.  ``matrix`` is the equivalent sparse ``3N x N`` operator
    with the x, y and z blocks stacked.
    """

    def __init__(self, grid_index, grid_dims):
        self.grid_index = np.asarray(grid_index, dtype=np.int64)
        self.grid_dims = tuple(int(d) for d in grid_dims)
        self.kernels = prewitt_kernels()
        self.n_sources = self.grid_index.shape[0]
        self._matrix = None

    @classmethod
    def from_space(cls, space):
        return cls(space.grid_index, space.grid_dims)

    def scatter(self, field):
        vol = np.zeros(self.grid_dims)
        gi = self.grid_index
        vol[gi[:, 0], gi[:, 1], gi[:, 2]] = field
        return vol

    def apply(self, field):
        """Responses for one field (N,) -> (3N,)."""
        vol = self.scatter(np.asarray(field, dtype=float))
        gi = self.grid_index
        out = [
            ndimage.correlate(vol, k, mode="constant", cval=0.0)[gi[:, 0], gi[:, 1], gi[:, 2]]
            for k in self.kernels
        ]
        return np.concatenate(out)

    @property
    def matrix(self):
        if self._matrix is None:
            self._matrix = self._build_matrix()
        return self._matrix

    def _build_matrix(self):
        n = self.n_sources
        lookup = -np.ones(self.grid_dims, dtype=np.int64)
        gi = self.grid_index
        lookup[gi[:, 0], gi[:, 1], gi[:, 2]] = np.arange(n)
        dims = np.array(self.grid_dims)
        rows, cols, vals = [], [], []
        for off in _OFFSETS:
            nb = gi + off
            ok = np.all((nb >= 0) & (nb < dims), axis=1)
            src = np.flatnonzero(ok)
            nbr = lookup[nb[ok, 0], nb[ok, 1], nb[ok, 2]]
            present = nbr >= 0
            src, nbr = src[present], nbr[present]
            for axis in range(3):
                if off[axis] == 0:
                    continue
                rows.append(axis * n + src)
                cols.append(nbr)
                vals.append(np.full(src.shape, float(off[axis])))
        return sparse.csr_matrix(
            (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))), shape=(3 * n, n)
        )


def prewitt_edges(edge_op, field):
    return edge_op.apply(field)
