"""Reference implementations written position by position, independent of the library."""
import numpy as np


def heteagg_oracle(g, clients, masks, include_global=True, zero_out=False):
    """Plain-python mean over {global if included} + {clients whose mask is set} at each position."""
    shape = np.shape(g)
    flat_g = [float(v) for v in np.ravel(g)]
    flat_c = [[float(v) for v in np.ravel(c)] for c in clients]
    flat_m = [[bool(v) for v in np.ravel(m)] for m in masks]
    new_g, new_c = [], [list(c) for c in flat_c]
    for p in range(len(flat_g)):
        vals = [flat_g[p]] if include_global else []
        vals += [flat_c[i][p] for i in range(len(clients)) if flat_m[i][p]]
        if vals:
            avg = sum(vals) / len(vals)
            new_g.append(avg)
        else:
            avg = None
            new_g.append(0.0 if zero_out else flat_g[p])
        for i in range(len(clients)):
            if flat_m[i][p]:
                new_c[i][p] = avg
    return np.array(new_g).reshape(shape), [np.array(c).reshape(shape) for c in new_c]


def mean_oracle(arrays):
    out = np.zeros(np.shape(arrays[0]), np.float64)
    for idx in np.ndindex(out.shape):
        out[idx] = sum(float(a[idx]) for a in arrays) / len(arrays)
    return out
