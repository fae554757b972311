"""Dense linear-algebra kernels shared by SOMP, spectral clustering and the network engine.

A ``Matrix`` is a two-dimensional ``float64`` ndarray with finite entries.
Every function here is pure: inputs are never modified.
"""
import numpy as np
import numpy.typing as npt
from scipy import linalg as sla
from scipy.spatial.distance import cdist

from .exceptions import ContractViolation

Matrix = npt.NDArray[np.float64]

RANK_TOLERANCE = 1e-10
SYMMETRY_TOLERANCE = 1e-9
KMEANS_MAX_ITER = 100
KMEANS_RESTARTS = 25


def as_matrix(value, name='matrix'):
    array = np.asarray(value, dtype=np.float64)
    if array.ndim != 2:
        raise ContractViolation(f'{name} must be two-dimensional, got shape {array.shape}')
    if not np.all(np.isfinite(array)):
        raise ContractViolation(f'{name} has non-finite entries')
    return array


def matmul(a, b):
    a = as_matrix(a, 'a')
    b = as_matrix(b, 'b')
    if a.shape[1] != b.shape[0]:
        raise ContractViolation(f'cannot multiply {a.shape} by {b.shape}')
    return a @ b


def least_squares_fit(targets, basis):
    """Fit every row of ``targets`` as a combination of the rows of ``basis``.

    Returns ``(coefficients, residual)`` where ``coefficients`` has one row per
    target and one column per basis row, and ``residual`` is the Frobenius
    norm of ``targets - coefficients @ basis``. Rows of ``basis`` that are
    linearly dependent (pivoted-QR diagonal below ``RANK_TOLERANCE`` relative
    to the leading one) receive zero coefficients.
    """
    targets = as_matrix(targets, 'targets')
    basis = np.asarray(basis, dtype=np.float64)
    if basis.size == 0:
        basis = basis.reshape(0, targets.shape[1])
    basis = as_matrix(basis, 'basis')
    if basis.shape[1] != targets.shape[1]:
        raise ContractViolation(
            f'basis has {basis.shape[1]} columns, targets have {targets.shape[1]}'
        )

    coefficients = np.zeros((targets.shape[0], basis.shape[0]))
    if basis.shape[0] == 0:
        return coefficients, float(np.linalg.norm(targets))

    # basis.T[:, perm] = q @ r, so the leading ``rank`` pivots span the rows.
    q, r, perm = sla.qr(basis.T, mode='economic', pivoting=True)
    diag = np.abs(np.diag(r))
    if diag.size == 0 or diag[0] == 0.0:
        return coefficients, float(np.linalg.norm(targets))
    rank = int(np.count_nonzero(diag > RANK_TOLERANCE * diag[0]))

    solution = sla.solve_triangular(r[:rank, :rank], q[:, :rank].T @ targets.T)
    coefficients[:, perm[:rank]] = solution.T
    residual = np.linalg.norm(targets - coefficients @ basis)
    return coefficients, float(residual)


def sym_eig(s):
    """Eigen-decomposition of a symmetric matrix, eigenvalues ascending."""
    s = as_matrix(s, 's')
    if s.shape[0] != s.shape[1]:
        raise ContractViolation(f'sym_eig needs a square matrix, got {s.shape}')
    scale = max(1.0, float(np.max(np.abs(s), initial=0.0)))
    if np.max(np.abs(s - s.T), initial=0.0) > SYMMETRY_TOLERANCE * scale:
        raise ContractViolation('sym_eig needs a symmetric matrix')
    eigenvalues, eigenvectors = sla.eigh(0.5 * (s + s.T))
    return eigenvalues, eigenvectors


def kmeans(points, k, seed):
    """Lloyd's k-means, best of ``KMEANS_RESTARTS`` k-means++ seedings.

    Deterministic for a given ``seed``. Each restart iterates until the
    assignment stops changing or ``KMEANS_MAX_ITER`` rounds have run; the
    labelling with the lowest inertia is kept, the earliest on ties. An
    emptied cluster is reseeded with the point farthest from its own centre,
    so every cluster in the returned labelling is non-empty.
    """
    points = as_matrix(points, 'points')
    n = points.shape[0]
    if k < 1 or k > n:
        raise ContractViolation(f'k must lie in [1, {n}], got {k}')

    rng = np.random.default_rng(seed)
    best, best_inertia = None, np.inf
    for _ in range(KMEANS_RESTARTS):
        labels = _lloyd(points, k, rng)
        inertia = kmeans_inertia(points, labels)
        if inertia < best_inertia:
            best, best_inertia = labels, inertia
    return best


def _lloyd(points, k, rng):
    centers = _plus_plus_seeds(points, k, rng)
    labels = _fill_empty(points, centers, _assign(points, centers), k)
    for _ in range(KMEANS_MAX_ITER):
        centers = np.stack([points[labels == j].mean(axis=0) for j in range(k)])
        updated = _fill_empty(points, centers, _assign(points, centers), k)
        if np.array_equal(updated, labels):
            break
        labels = updated
    return labels


def kmeans_inertia(points, labels):
    """Within-cluster sum of squared distances to the cluster means."""
    points = as_matrix(points, 'points')
    labels = np.asarray(labels)
    total = 0.0
    for j in np.unique(labels):
        members = points[labels == j]
        total += float(((members - members.mean(axis=0)) ** 2).sum())
    return total


def _plus_plus_seeds(points, k, rng):
    n = points.shape[0]
    centers = np.empty((k, points.shape[1]))
    centers[0] = points[rng.integers(n)]
    closest = cdist(points, centers[:1], 'sqeuclidean')[:, 0]
    for c in range(1, k):
        total = closest.sum()
        if total > 0.0:
            index = rng.choice(n, p=closest / total)
        else:
            index = rng.integers(n)
        centers[c] = points[index]
        closest = np.minimum(closest, cdist(points, centers[c:c + 1], 'sqeuclidean')[:, 0])
    return centers


def _assign(points, centers):
    return np.argmin(cdist(points, centers, 'sqeuclidean'), axis=1)


def _fill_empty(points, centers, labels, k):
    labels = labels.copy()
    for j in range(k):
        if np.any(labels == j):
            continue
        counts = np.bincount(labels, minlength=k)
        distance = ((points - centers[labels]) ** 2).sum(axis=1)
        # never strip the last member of another cluster
        distance[counts[labels] <= 1] = -1.0
        farthest = int(np.argmax(distance))
        labels[farthest] = j
        centers[j] = points[farthest]
    return labels
