"""Training-data generation: random layouts scored by conditioning and misfit.

For each random electrode layout the domain is meshed, the smoothness prior
is rebuilt on that mesh, and every conductivity sample (drawn once on the
first layout's mesh, then linearly interpolated) is scored by the pair
(kappa, beta): the Hessian condition number at the true conductivity and
the squared misfit of the one-step Gauss-Newton estimate taken about the
sample mean.  Layout columns repeat once per sample so the stacked matrices
keep their per-layout block structure.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import cho_factor, cho_solve

from . import __version__
from .fem import (
    ContactImpedances,
    FEMError,
    StimulationProtocol,
    adjacent_protocol,
    condition_number,
    forward_with_jacobian,
    hessian,
    solve_forward,
)
from .geometry import PlacementError, PolygonDomain, place_random_electrodes
from .mesh import MeshError, TriangularMesh, generate_mesh, interpolate_field
from .sampler import SamplerError, SmoothnessPrior, build_covariance, draw_samples

__all__ = [
    "DatasetError",
    "ObjectiveVector",
    "TrainingSet",
    "one_step_gauss_newton",
    "compute_objective",
    "build_training_set",
    "matrix_to_csv",
    "matrix_from_csv",
]


class DatasetError(RuntimeError):
    """Training-set generation failed beyond the retry budget."""


@dataclass(frozen=True)
class ObjectiveVector:
    """kappa: Hessian condition number (>= 1 or inf); beta: squared GN misfit."""

    kappa: float
    beta: float

    def as_array(self) -> np.ndarray:
        return np.array([self.kappa, self.beta])


@dataclass(eq=False)
class TrainingSet:
    """Stacked layout matrix E_bar (2k x N) and objective matrix Theta_bar (2 x N).

    Columns come in blocks of n_sigma sharing one layout.  Columns whose
    kappa is the +inf sentinel stay in the matrices (preserving the block
    structure) and are skipped at training time; the manifest records how
    many there are.
    """

    E_bar: np.ndarray
    Theta_bar: np.ndarray
    manifest: dict = field(default_factory=dict)

    @property
    def n_columns(self) -> int:
        return self.E_bar.shape[1]

    @property
    def finite_mask(self) -> np.ndarray:
        return np.isfinite(self.Theta_bar).all(axis=0)


def one_step_gauss_newton(
    mesh: TriangularMesh,
    sigma_true: np.ndarray,
    prior: SmoothnessPrior,
    z: ContactImpedances,
    protocol: StimulationProtocol,
    v_true: np.ndarray | None = None,
) -> tuple[np.ndarray, float]:
    """Single Gauss-Newton step about the constant field at mean(sigma_true).

    Returns (sigma_hat, beta) with
    sigma_hat = sigma_0 + (H(sigma_0) + Gamma^{-1})^{-1} J(sigma_0)^T (V_t - U(sigma_0))
    and beta = ||sigma_true - sigma_hat||^2.  No gradient term appears: the
    linearization point equals the prior mean.
    """
    sigma_true = np.asarray(sigma_true, dtype=float)
    if v_true is None:
        v_true = solve_forward(mesh, sigma_true, z, protocol).voltages
    sigma0 = np.full(mesh.n_nodes, sigma_true.mean())
    sol0, J0 = forward_with_jacobian(mesh, sigma0, z, protocol)
    v0 = sol0.voltages
    H0 = hessian(J0)
    lhs = H0 + prior.inverse()
    try:
        delta = cho_solve(cho_factor(lhs, lower=True), J0.T @ (v_true - v0))
    except np.linalg.LinAlgError as exc:
        raise FEMError(f"one-step update solve failed: {exc}") from exc
    sigma_hat = sigma0 + delta
    beta = float(np.sum((sigma_true - sigma_hat) ** 2))
    return sigma_hat, beta


def compute_objective(
    mesh: TriangularMesh,
    sigma_true: np.ndarray,
    prior: SmoothnessPrior,
    z: ContactImpedances,
    protocol: StimulationProtocol,
) -> ObjectiveVector:
    """kappa from the Hessian at sigma_true, beta from the one-step estimate."""
    sol_t, J = forward_with_jacobian(mesh, sigma_true, z, protocol)
    v_true = sol_t.voltages
    kappa = condition_number(hessian(J))
    _, beta = one_step_gauss_newton(mesh, sigma_true, prior, z, protocol, v_true=v_true)
    return ObjectiveVector(kappa=kappa, beta=beta)


def _layout_seed(seed: int, i: int, attempt: int, tag: int) -> np.random.SeedSequence:
    return np.random.SeedSequence((0xE17, seed, i, attempt, tag))


def build_training_set(
    domain: PolygonDomain,
    per_side,
    width: float,
    n_layouts: int,
    n_sigma: int,
    h_max: float,
    h_min: float,
    prior_params: tuple[float, float, float],
    z_value: float,
    seed: int,
    min_gap: float | None = None,
    amplitude: float = 1.0,
    threads: int = 1,
    max_retries: int = 5,
) -> TrainingSet:
    """Generate the stacked training matrices, deterministically in the seed.

    Conductivity samples are drawn once on the first layout's mesh and
    interpolated onto every later mesh.  Layouts whose mesh or solves fail
    are resampled up to ``max_retries`` times, then the build errors out.
    Results do not depend on the thread count.
    """
    if n_layouts < 1 or n_sigma < 1:
        raise DatasetError("n_layouts and n_sigma must both be at least 1")
    k = int(sum(per_side))
    gap = h_max if min_gap is None else min_gap
    a, b, c = prior_params
    z = ContactImpedances.uniform(k, z_value)
    protocol = adjacent_protocol(k, amplitude)

    def make_layout(i: int):
        last_err = None
        for attempt in range(max_retries):
            try:
                layout = place_random_electrodes(
                    domain, per_side, width, gap, seed=_layout_seed(seed, i, attempt, 0)
                )
                mesh_seed = int(_layout_seed(seed, i, attempt, 1).generate_state(1)[0])
                mesh = generate_mesh(domain, layout, h_max, h_min, seed=mesh_seed)
                prior = build_covariance(mesh, a, b, c)
                return layout, mesh, prior
            except (PlacementError, MeshError, FEMError, SamplerError) as exc:
                last_err = exc
        raise DatasetError(
            f"layout {i} failed {max_retries} times; last error: {last_err}"
        )

    layout0, mesh0, prior0 = make_layout(0)
    samples = draw_samples(prior0, n_sigma, seed)
    base_fields = np.stack([s.values for s in samples])

    def process(i: int):
        if i == 0:
            layout, mesh, prior = layout0, mesh0, prior0
            fields = base_fields
        else:
            layout, mesh, prior = make_layout(i)
            fields = np.stack(
                [interpolate_field(f, mesh0, mesh) for f in base_fields]
            )
        thetas = np.empty((2, n_sigma))
        for j in range(n_sigma):
            obj = compute_objective(mesh, fields[j], prior, z, protocol)
            thetas[0, j] = obj.kappa
            thetas[1, j] = obj.beta
        return layout.midpoints, thetas

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            results = list(pool.map(process, range(n_layouts)))
    else:
        results = [process(i) for i in range(n_layouts)]

    E_bar = np.empty((2 * k, n_layouts * n_sigma))
    Theta_bar = np.empty((2, n_layouts * n_sigma))
    for i, (mid, thetas) in enumerate(results):
        sl = slice(i * n_sigma, (i + 1) * n_sigma)
        E_bar[:, sl] = mid[:, None]
        Theta_bar[:, sl] = thetas

    n_sentinel = int((~np.isfinite(Theta_bar).all(axis=0)).sum())
    manifest = {
        "version": __version__,
        "outer_vertices": np.asarray(domain.outer).tolist(),
        "holes": [h.tolist() for h in domain.holes],
        "per_side": list(map(int, per_side)),
        "width": width,
        "min_gap": gap,
        "h_max": h_max,
        "h_min": h_min,
        "prior": {"a": a, "b": b, "c": c},
        "z": z_value,
        "amplitude": amplitude,
        "n_layouts": n_layouts,
        "n_sigma": n_sigma,
        "seed": seed,
        "k": k,
        "sentinel_columns": n_sentinel,
    }
    return TrainingSet(E_bar=E_bar, Theta_bar=Theta_bar, manifest=manifest)


def matrix_to_csv(m: np.ndarray, config_hash: str = "") -> str:
    lines = []
    if config_hash:
        lines.append(f"# config_hash {config_hash}")
    for row in np.atleast_2d(m):
        lines.append(",".join(f"{v:.17g}" for v in row))
    return "\n".join(lines) + "\n"


def matrix_from_csv(text: str) -> np.ndarray:
    rows = [
        [float(v) for v in ln.split(",")]
        for ln in text.splitlines()
        if ln and not ln.startswith("#")
    ]
    return np.asarray(rows)
