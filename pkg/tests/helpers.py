"""Shared builders and dense-matrix oracles for the test suite.

The oracles here deliberately take the slow, explicit route: the REML
log-likelihood is evaluated with `np.kron`, dense inverses, and
`slogdet`, so they share no assembly code with the package internals
they are checking.
"""

from __future__ import annotations

import numpy as np

from gxe_reml import (
    Dataset,
    EnvDistanceMatrix,
    EnvFeatureMatrix,
    PhenotypeRecord,
    RelationshipMatrix,
    build_design,
    build_structure,
    env_distance,
)


def standardized_features(q: int, p: int, seed: int) -> EnvFeatureMatrix:
    """Random q x p feature matrix with rows at mean 0, population sd 1."""
    rng = np.random.default_rng(seed)
    raw = rng.normal(size=(q, p))
    raw -= raw.mean(axis=1, keepdims=True)
    raw /= raw.std(axis=1, keepdims=True)
    return EnvFeatureMatrix(
        raw, [f"v{i}" for i in range(q)], [f"E{j}" for j in range(p)]
    )


def random_distance(p: int, seed: int, mean_off: float | None = None) -> EnvDistanceMatrix:
    """Squared-Euclidean distances between random standardized columns.

    When ``mean_off`` is given the matrix is rescaled so its mean
    off-diagonal entry equals it exactly (rescaling squared Euclidean
    distances by a positive constant keeps them squared Euclidean).
    """
    dist = env_distance(standardized_features(max(2 * p, 6), p, seed))
    if mean_off is not None:
        off = dist.values[~np.eye(p, dtype=bool)].mean()
        dist = EnvDistanceMatrix(dist.values * (mean_off / off), list(dist.labels))
    return dist


def random_kinship(n: int, seed: int) -> RelationshipMatrix:
    """Well-conditioned PSD kinship with unit diagonal."""
    rng = np.random.default_rng(seed)
    a = rng.normal(size=(n, max(2 * n, 8)))
    k = a @ a.T / a.shape[1]
    d = np.sqrt(np.diag(k))
    k = k / np.outer(d, d)
    k = 0.5 * (k + k.T)
    np.fill_diagonal(k, 1.0)
    return RelationshipMatrix(k, [f"g{i:03d}" for i in range(n)])


def make_dataset(
    n: int,
    p: int,
    seed: int,
    missing: set[tuple[int, int]] | None = None,
    y: np.ndarray | None = None,
    kinship: RelationshipMatrix | None = None,
    env_labels: list[str] | None = None,
) -> Dataset:
    """Complete n x p dataset in environment-major order, minus ``missing``.

    ``missing`` holds (genotype index, environment index) pairs; ``y``
    supplies record values in the surviving order, otherwise values are
    drawn standard normal.
    """
    rng = np.random.default_rng(seed)
    kin = kinship if kinship is not None else random_kinship(n, seed + 1)
    envs = env_labels if env_labels is not None else [f"E{j}" for j in range(p)]
    gens = list(kin.labels)
    miss = missing or set()
    records = []
    k = 0
    for e in range(p):
        for g in range(n):
            if (g, e) in miss:
                continue
            value = float(y[k]) if y is not None else float(rng.normal())
            records.append(PhenotypeRecord(gens[g], envs[e], value))
            k += 1
    return Dataset(records, kin, envs)


def dense_reml(dataset: Dataset, sigma: np.ndarray, resid_var: float) -> float:
    """REML log-likelihood by the explicit dense formula.

    Builds V = Z (Sigma kron K) Z^T + resid * I with a materialized
    Kronecker product, then evaluates
    -0.5 * (log|V| + log|X^T V^-1 X| + y^T P y) with dense inverses.
    """
    design = build_design(dataset)
    x, z = design.X, design.Z
    y = dataset.values
    v = z @ np.kron(sigma, dataset.kinship.values) @ z.T
    v = v + resid_var * np.eye(len(y))
    vi = np.linalg.inv(v)
    xvx = x.T @ vi @ x
    proj = vi - vi @ x @ np.linalg.inv(xvx) @ x.T @ vi
    sign_v, ld_v = np.linalg.slogdet(v)
    sign_a, ld_a = np.linalg.slogdet(xvx)
    assert sign_v > 0 and sign_a > 0, "oracle hit a non-PD matrix"
    return -0.5 * (ld_v + ld_a + float(y @ proj @ y))


def dense_cell_blups(
    dataset: Dataset, sigma: np.ndarray, resid_var: float, env_means: np.ndarray
) -> np.ndarray:
    """Conditional means of all n*p cell effects by dense partitioning.

    Returns the np-vector (environment-major) of
    Cov(u, y) V^-1 (y - mean), the joint-normal conditional expectation.
    """
    n = dataset.n
    full = np.kron(sigma, dataset.kinship.values)
    cells = np.array(
        [e * n + g for g, e in zip(dataset.gen_index_array, dataset.env_index_array)]
    )
    cov_obs = full[np.ix_(cells, cells)] + resid_var * np.eye(len(cells))
    cross = full[:, cells]
    resid = dataset.values - env_means[dataset.env_index_array]
    return cross @ np.linalg.solve(cov_obs, resid)


def fd_gradient(f, x: np.ndarray, rel_step: float = 1e-4) -> np.ndarray:
    """Central finite-difference gradient with per-coordinate steps."""
    g = np.zeros(len(x))
    for i in range(len(x)):
        h = rel_step * max(1.0, abs(x[i]))
        xp = x.copy()
        xm = x.copy()
        xp[i] += h
        xm[i] -= h
        g[i] = (f(xp) - f(xm)) / (2.0 * h)
    return g


def structure_zoo(p: int, seed: int):
    """One instance of every structure kind plus a parameter sampler.

    Returns a list of (structure, draw) pairs where ``draw(rng)`` yields
    a well-scaled strictly positive parameter vector for that kind.
    """
    corr = gaussian_reference_corr(p, seed)
    dist = random_distance(p, seed + 1, mean_off=4.0)
    grid = np.geomspace(0.05, 2.0, 4)
    zoo = []

    def var_draw(k):
        return lambda rng: rng.uniform(0.3, 3.0, size=k)

    def kern_draw(k):
        def draw(rng):
            return np.concatenate([[rng.uniform(0.05, 0.8)], rng.uniform(0.3, 3.0, k)])

        return draw

    zoo.append((build_structure("main", p=p), var_draw(1)))
    zoo.append((build_structure("diag", p=p), var_draw(p)))
    zoo.append((build_structure("cor1", corr=corr), var_draw(1)))
    zoo.append((build_structure("corP", corr=corr), var_draw(p)))
    zoo.append((build_structure("kern1", dist=dist), kern_draw(1)))
    zoo.append((build_structure("kernP", dist=dist), kern_draw(p)))
    zoo.append(
        (build_structure("ka", dist=dist, grid=grid), var_draw(len(grid)))
    )
    return zoo


def gaussian_reference_corr(p: int, seed: int):
    """A strictly PSD correlation matrix from a Gaussian kernel."""
    from gxe_reml import EnvCorrelationMatrix, gaussian_kernel

    dist = random_distance(p, seed + 17, mean_off=3.0)
    c = gaussian_kernel(dist.values, 0.25)
    return EnvCorrelationMatrix(c, list(dist.labels))
