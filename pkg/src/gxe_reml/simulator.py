"""Synthetic marker, kinship, and multi-environment phenotype generation.

Provides the ground truth for estimator-recovery and cross-validation
experiments: markers are drawn per-locus binomial(2, freq) with frequencies
uniform in [0.1, 0.9], the relationship matrix uses centered markers
(K = W W^T / c with W = markers - 2f per column and c = 2 sum f(1 - f)),
and genetic values are drawn from N(0, Sigma kron K) without materializing
the Kronecker product: with factors Sigma = L_S L_S^T and K = L_K L_K^T,
U = L_K Z L_S^T for an n x p standard normal Z has
Cov(vec(U)) = Sigma kron K (column-major vec, i.e. environment-major
cells, matching the model's cell ordering).

All randomness flows from ``numpy.random.default_rng`` (PCG64) seeded from
the config; identical configs give bit-identical output.  Statistical (not
bit-level) reproducibility is the portability goal across platforms.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .errors import InvalidInputError, NumericalError
from .reml_core import Dataset, PhenotypeRecord, RelationshipMatrix
from .variance_structures import VarianceStructure

logger = logging.getLogger(__name__)


@dataclass
class SimConfig:
    """Ground-truth description of one simulated multi-environment trial.

    ``env_means`` may be a scalar (shared by all environments) or a
    p-vector.  ``resid_var`` of exactly 0 is allowed (noise-free data).
    When ``kinship`` is supplied it is used as-is and no markers are
    simulated, so distinct seeds redraw genetic values and noise under one
    fixed relationship matrix.
    """

    n_genotypes: int
    n_markers: int
    structure: VarianceStructure
    true_params: np.ndarray
    resid_var: float
    env_means: float | Sequence[float] = 0.0
    seed: int = 0
    kinship: RelationshipMatrix | None = None

    def __post_init__(self) -> None:
        if self.n_genotypes < 2 or self.n_markers < 2:
            raise InvalidInputError(
                f"need n_genotypes >= 2 and n_markers >= 2, got "
                f"{self.n_genotypes} and {self.n_markers}"
            )
        if self.kinship is not None:
            if self.kinship.values.shape[0] != self.n_genotypes:
                raise InvalidInputError(
                    f"kinship is {self.kinship.values.shape[0]} x "
                    f"{self.kinship.values.shape[0]} but n_genotypes is "
                    f"{self.n_genotypes}"
                )
        elif self.n_markers < self.n_genotypes:
            logger.warning(
                "n_markers (%d) < n_genotypes (%d): kinship will be singular",
                self.n_markers, self.n_genotypes,
            )
        if not np.isfinite(self.resid_var) or self.resid_var < 0.0:
            raise InvalidInputError(
                f"resid_var must be >= 0, got {self.resid_var}"
            )
        self.true_params = np.atleast_1d(np.asarray(self.true_params, dtype=float))

    @property
    def p_environments(self) -> int:
        return self.structure.p


@dataclass
class SimOutput:
    """Simulated dataset plus the generating truth."""

    dataset: Dataset
    true_genetic_matrix: np.ndarray
    true_params: np.ndarray
    resid_var: float

    @property
    def true_genetic_values(self) -> np.ndarray:
        """Genetic values as the environment-major np cell vector."""
        return self.true_genetic_matrix.flatten(order="F")

    def cell_labels(self) -> list[tuple[str, str]]:
        return self.dataset.cell_labels()


def simulate_markers(n: int, m: int, seed) -> np.ndarray:
    """n x m marker matrix with entries in {0, 1, 2}.

    Per-marker allele frequencies are uniform in [0.1, 0.9] and genotypes
    binomial(2, freq); deterministic per seed.
    """
    if n < 2 or m < 2:
        raise InvalidInputError(f"need n >= 2 and m >= 2, got {n} and {m}")
    rng = np.random.default_rng(seed)
    freqs = rng.uniform(0.1, 0.9, size=m)
    return rng.binomial(2, freqs, size=(n, m))


def kinship_from_markers(
    markers: np.ndarray, labels: Sequence[str] | None = None
) -> RelationshipMatrix:
    """Centered-marker relationship matrix K = W W^T / c.

    W subtracts twice the sample allele frequency from each column and
    c = 2 * sum f (1 - f).  Monomorphic markers carry no information and
    are dropped with a logged warning.
    """
    markers = np.asarray(markers, dtype=float)
    if markers.ndim != 2:
        raise InvalidInputError("marker matrix must be two-dimensional")
    freqs = markers.mean(axis=0) / 2.0
    poly = (freqs > 0.0) & (freqs < 1.0)
    n_dropped = int(np.sum(~poly))
    if not np.any(poly):
        raise InvalidInputError("all markers are monomorphic")
    if n_dropped:
        logger.warning("dropping %d monomorphic markers", n_dropped)
    f = freqs[poly]
    w = markers[:, poly] - 2.0 * f
    c = 2.0 * float(np.sum(f * (1.0 - f)))
    k = w @ w.T / c
    k = 0.5 * (k + k.T)
    if labels is None:
        labels = [f"G{i + 1:04d}" for i in range(markers.shape[0])]
    return RelationshipMatrix(k, list(labels))


def _psd_factor(mat: np.ndarray, what: str) -> np.ndarray:
    """A factor L with L L^T = mat, tolerating PSD-boundary matrices."""
    try:
        return np.linalg.cholesky(mat)
    except np.linalg.LinAlgError:
        pass
    eigs, vecs = np.linalg.eigh(mat)
    floor = -1e-8 * max(float(eigs[-1]), 1e-300)
    if eigs[0] < floor:
        raise NumericalError(
            f"{what} is not positive semidefinite "
            f"(min eigenvalue {eigs[0]:.3e}); cannot factor degenerate truth"
        )
    return vecs * np.sqrt(np.clip(eigs, 0.0, None))


def simulate_met(config: SimConfig) -> SimOutput:
    """Simulate one complete multi-environment trial from Sigma kron K.

    Phenotypes are y_cell = env_mean + u_cell + eps with iid normal noise of
    variance ``config.resid_var``; the output dataset observes every cell.
    """
    p = config.p_environments
    env_means = np.broadcast_to(
        np.asarray(config.env_means, dtype=float), (p,)
    ).astype(float)
    if not np.all(np.isfinite(env_means)):
        raise InvalidInputError("env_means must be finite")
    root = np.random.SeedSequence(config.seed)
    marker_seed, draw_seed = root.spawn(2)
    if config.kinship is not None:
        kinship = config.kinship
    else:
        markers = simulate_markers(config.n_genotypes, config.n_markers, marker_seed)
        kinship = kinship_from_markers(markers)
    sigma = config.structure.sigma(config.true_params)
    if np.all(sigma == 0.0):
        l_sigma = np.zeros((p, p))
    else:
        l_sigma = _psd_factor(sigma, "truth covariance")
    l_k = _psd_factor(kinship.values, "kinship")
    rng = np.random.default_rng(draw_seed)
    z = rng.standard_normal((config.n_genotypes, p))
    u = l_k @ z @ l_sigma.T
    eps = rng.standard_normal((config.n_genotypes, p)) * np.sqrt(config.resid_var)
    y = env_means[None, :] + u + eps
    env_labels = [f"E{j + 1:02d}" for j in range(p)]
    if config.structure.env_labels is not None:
        env_labels = list(config.structure.env_labels)
    records = [
        PhenotypeRecord(kinship.labels[g], env_labels[e], float(y[g, e]))
        for e in range(p)
        for g in range(config.n_genotypes)
    ]
    dataset = Dataset(records, kinship, env_labels)
    return SimOutput(
        dataset=dataset,
        true_genetic_matrix=u,
        true_params=config.true_params.copy(),
        resid_var=float(config.resid_var),
    )
