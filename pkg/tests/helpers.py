"""Shared test oracles, kept independent of the code paths they check."""

import numpy as np

FD_STEP = 1e-3
FD_RTOL = 1e-3


def finite_difference_gradients(make_output, leaf, projection, h=FD_STEP):
    """Central-difference gradient of sum(projection * make_output()) w.r.t. leaf.data.

    `make_output` must rebuild the graph from scratch on every call so that
    perturbed leaf values propagate (and stateful ops see fresh state).
    """
    fd = np.zeros_like(leaf.data)
    flat = leaf.data.reshape(-1)
    fd_flat = fd.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        f_plus = float((make_output().data * projection).sum())
        flat[i] = orig - h
        f_minus = float((make_output().data * projection).sum())
        flat[i] = orig
        fd_flat[i] = (f_plus - f_minus) / (2.0 * h)
    return fd


def assert_gradients_match(make_output, leaves, rng, h=FD_STEP, rtol=FD_RTOL):
    """Check analytic gradients of every leaf against central differences.

    The output is projected onto a random unit-scale vector so the compared
    scalar stays O(1); the pass rule |a - fd| <= rtol * max(1, |a|, |fd|) is
    the stated relative tolerance with a unit floor that absorbs float32
    rounding noise in the finite differences.
    """
    out = make_output()
    projection = (rng.standard_normal(out.data.shape) / np.sqrt(out.data.size)).astype(np.float32)
    for leaf in leaves:
        leaf.grad = None
    out = make_output()
    out.backward(seed=projection)
    for leaf in leaves:
        analytic = leaf.grad
        assert analytic is not None, "leaf received no gradient"
        fd = finite_difference_gradients(make_output, leaf, projection, h=h)
        denom = np.maximum(1.0, np.maximum(np.abs(analytic), np.abs(fd)))
        rel = np.abs(analytic - fd) / denom
        assert rel.max() < rtol, f"gradient mismatch: worst relative error {rel.max():.2e}"


def separated_values(rng, shape, gap=0.13):
    """Random tensor whose entries are pairwise separated by at least `gap`,
    so argmax decisions cannot flip under the finite-difference step."""
    n = int(np.prod(shape))
    vals = (rng.permutation(n).astype(np.float32) - n / 2.0) * gap
    return vals.reshape(shape)


def brute_force_iou(pred, truth):
    """Pixel-counting IoU via explicit loops (oracle for the vectorized path)."""
    inter = 0
    union = 0
    for a, b in zip(np.asarray(pred, bool).reshape(-1), np.asarray(truth, bool).reshape(-1)):
        if a and b:
            inter += 1
        if a or b:
            union += 1
    return 1.0 if union == 0 else inter / union


def brute_force_closed_path(cost, lam):
    """Exhaustive enumeration of all closed paths through an (angles, radii)
    lattice; returns (best path, best score)."""
    import itertools

    n_angles, n_radii = cost.shape
    best_path, best_score = None, -np.inf
    for path in itertools.product(range(n_radii), repeat=n_angles):
        score = sum(cost[a, j] for a, j in enumerate(path))
        for a in range(n_angles):
            score -= lam * abs(path[a] - path[(a + 1) % n_angles])
        if score > best_score:
            best_score = score
            best_path = path
    return np.asarray(best_path), best_score
