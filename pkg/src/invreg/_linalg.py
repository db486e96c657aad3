"""Small symmetric-matrix helpers shared across modules."""
import numpy as np

PSD_RTOL = 1e-10


def symmetrize(A):
    A = np.asarray(A, dtype=float)
    return 0.5 * (A + A.T)


def psd_scale(A) -> float:
    """Reference magnitude for PSD tolerances: largest |eigenvalue|, floor 1."""
    if A.size == 0:
        return 1.0
    return max(1.0, float(np.max(np.abs(np.linalg.eigvalsh(symmetrize(A))))))


def project_psd(A, name="matrix", rtol=PSD_RTOL):
    """Symmetrize and clip tiny negative eigenvalues to zero.

    Raises ValueError if an eigenvalue is below ``-rtol * scale``. The input is
    returned unchanged (after symmetrization) when it is already PSD, so exact
    values survive.
    """
    S = symmetrize(A)
    if S.size == 0:
        return S
    w, V = np.linalg.eigh(S)
    scale = max(1.0, float(np.max(np.abs(w))))
    if w[0] < -rtol * scale:
        raise ValueError(f"{name} is not positive semi-definite (min eigenvalue {w[0]:.3e})")
    if w[0] >= 0:
        return S
    return symmetrize((V * np.clip(w, 0.0, None)) @ V.T)


def sqrt_psd(A):
    """Symmetric square root with negative eigenvalues clipped at zero."""
    w, V = np.linalg.eigh(symmetrize(A))
    return symmetrize((V * np.sqrt(np.clip(w, 0.0, None))) @ V.T)


def check_orthogonal(Q, tol=1e-10, name="Q"):
    Q = np.asarray(Q, dtype=float)
    if Q.ndim != 2 or Q.shape[0] != Q.shape[1]:
        raise ValueError(f"{name} must be square, got shape {Q.shape}")
    err = np.max(np.abs(Q.T @ Q - np.eye(Q.shape[0])))
    if err > tol:
        raise ValueError(f"{name} is not orthogonal (max |Q'Q - I| = {err:.3e})")
    return Q


def rng_from(seed):
    """PCG64 generator from an int seed, a SeedSequence, or a Generator (passed through)."""
    if isinstance(seed, np.random.Generator):
        return seed
    return np.random.default_rng(seed)


def spawn_rngs(seed, n: int) -> list:
    """``n`` independent child generators of ``seed`` (int, SeedSequence or Generator)."""
    if isinstance(seed, np.random.Generator):
        return seed.spawn(n)
    ss = seed if isinstance(seed, np.random.SeedSequence) else np.random.SeedSequence(seed)
    return [np.random.default_rng(s) for s in ss.spawn(n)]
