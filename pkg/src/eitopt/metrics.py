"""Layout-quality metrics independent of the training objective.

All comparisons between two layouts use the same conductivity fields,
drawn once on a neutral electrode-free reference mesh and interpolated
onto each layout's meshes, the same protocol, and the same element-size
parameters, so neither layout is favored by its own discretization.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .fem import (
    ContactImpedances,
    StimulationProtocol,
    adjacent_protocol,
    assemble_system,
    condition_number,
    forward_with_jacobian,
    hessian,
    solve_forward,
)
from .geometry import ElectrodeLayout, PolygonDomain
from .mesh import TriangularMesh, generate_mesh, interpolate_field, reference_mesh
from .sampler import build_covariance, draw_samples, rescale_to_range

__all__ = [
    "LayoutQualityReport",
    "metric_fields",
    "mean_modeling_error",
    "mean_condition_numbers",
    "layout_quality_report",
    "distinguishability",
    "compare_layouts",
]


@dataclass(eq=False)
class LayoutQualityReport:
    """Per-layout metric bundle over a fixed sample set."""

    mu: np.ndarray
    mu_l1: float
    kappa_H_mean: float
    kappa_R_mean: float
    n_samples: int
    n_excluded: int
    layout_id: str
    geometry_id: str


def _layout_id(layout: ElectrodeLayout) -> str:
    import hashlib

    return hashlib.sha1(layout.midpoints.tobytes()).hexdigest()[:12]


def _geometry_id(domain: PolygonDomain) -> str:
    import hashlib

    h = hashlib.sha1(np.asarray(domain.outer).tobytes())
    for hole in domain.holes:
        h.update(np.asarray(hole).tobytes())
    return h.hexdigest()[:12]


def layout_quality_report(
    domain: PolygonDomain,
    layout: ElectrodeLayout,
    fields: np.ndarray,
    ref: TriangularMesh,
    h_max: float,
    h_min: float,
    z: ContactImpedances,
    protocol: StimulationProtocol,
    mu_samples: int,
    mesh_seed: int = 0,
) -> LayoutQualityReport:
    """All per-layout quality metrics over one shared field set."""
    mu = mean_modeling_error(
        domain, layout, fields[:mu_samples], ref, h_max, h_max / 2.0, z, protocol, mesh_seed
    )
    kh, kr, excl = mean_condition_numbers(
        domain, layout, fields, ref, h_max, h_min, z, protocol, mesh_seed
    )
    return LayoutQualityReport(
        mu=mu,
        mu_l1=float(np.abs(mu).sum()),
        kappa_H_mean=kh,
        kappa_R_mean=kr,
        n_samples=len(fields),
        n_excluded=excl,
        layout_id=_layout_id(layout),
        geometry_id=_geometry_id(domain),
    )


def metric_fields(
    domain: PolygonDomain,
    spacing: float,
    n: int,
    prior_params: tuple[float, float, float],
    seed: int,
) -> tuple[TriangularMesh, np.ndarray]:
    """Draw n fields on an electrode-free reference mesh of the domain."""
    ref = reference_mesh(domain, spacing)
    a, b, c = prior_params
    prior = build_covariance(ref, a, b, c)
    fields = np.stack([s.values for s in draw_samples(prior, n, seed)])
    return ref, fields


def _interp_all(fields: np.ndarray, src: TriangularMesh, dst: TriangularMesh) -> np.ndarray:
    return np.stack([interpolate_field(f, src, dst) for f in fields])


def mean_modeling_error(
    domain: PolygonDomain,
    layout: ElectrodeLayout,
    fields: np.ndarray,
    ref: TriangularMesh,
    h_coarse: float,
    h_fine: float,
    z: ContactImpedances,
    protocol: StimulationProtocol,
    mesh_seed: int = 0,
) -> np.ndarray:
    """Mean over samples of (fine-mesh voltages - coarse-mesh voltages).

    Both meshes carry the same layout; each field is interpolated from the
    reference mesh onto both.  With h_fine == h_coarse the meshes coincide
    and the error is exactly zero.
    """
    if h_fine > h_coarse:
        raise ValueError("h_fine must not exceed h_coarse")
    coarse = generate_mesh(domain, layout, h_coarse, h_coarse / 2.0, seed=mesh_seed)
    fine = generate_mesh(domain, layout, h_fine, h_fine / 2.0, seed=mesh_seed)
    f_coarse = _interp_all(fields, ref, coarse)
    f_fine = _interp_all(fields, ref, fine)
    mu = np.zeros(protocol.n_measurements)
    for fc, ff in zip(f_coarse, f_fine):
        v_fine = solve_forward(fine, ff, z, protocol).voltages
        v_coarse = solve_forward(coarse, fc, z, protocol).voltages
        mu += v_fine - v_coarse
    return mu / len(fields)


def mean_condition_numbers(
    domain: PolygonDomain,
    layout: ElectrodeLayout,
    fields: np.ndarray,
    ref: TriangularMesh,
    h_max: float,
    h_min: float,
    z: ContactImpedances,
    protocol: StimulationProtocol,
    mesh_seed: int = 0,
) -> tuple[float, float, int]:
    """Mean Hessian and system-matrix condition numbers over the fields.

    Returns (kappa_H_mean, kappa_R_mean, n_excluded); infinite sentinels are
    excluded from the means and counted.
    """
    mesh = generate_mesh(domain, layout, h_max, h_min, seed=mesh_seed)
    local = _interp_all(fields, ref, mesh)
    k_H, k_R = [], []
    n_excluded = 0
    for f in local:
        sys_ = assemble_system(mesh, f, z)
        _, J = forward_with_jacobian(mesh, f, z, protocol, system=sys_)
        kh = condition_number(hessian(J))
        kr = condition_number(sys_.matrix.toarray())
        if np.isfinite(kh) and np.isfinite(kr):
            k_H.append(kh)
            k_R.append(kr)
        else:
            n_excluded += 1
    if not k_H:
        raise RuntimeError("all condition numbers were singular sentinels")
    return float(np.mean(k_H)), float(np.mean(k_R)), n_excluded


def distinguishability(
    mesh: TriangularMesh,
    sigma1: np.ndarray,
    delta_sigma: np.ndarray,
    z: ContactImpedances,
    protocol: StimulationProtocol,
) -> float:
    """Squared voltage change induced by a conductivity perturbation.

    Both solves share the mesh, protocol and discretization, so the value
    reflects measurement sensitivity rather than modeling error.
    """
    v1 = solve_forward(mesh, np.asarray(sigma1), z, protocol).voltages
    v2 = solve_forward(mesh, np.asarray(sigma1) + np.asarray(delta_sigma), z, protocol).voltages
    return float(np.sum((v2 - v1) ** 2))


def compare_layouts(
    domain: PolygonDomain,
    layout_a: ElectrodeLayout,
    layout_b: ElectrodeLayout,
    h_max: float,
    h_min: float,
    prior_params: tuple[float, float, float],
    z_value: float,
    amplitude: float = 1.0,
    mu_samples: int = 50,
    kappa_samples: int = 200,
    delta_pairs: int = 50,
    delta_range: tuple[float, float] = (1.0, 2.0),
    ref_spacing: float | None = None,
    seed: int = 0,
    mesh_seed: int = 0,
) -> dict:
    """Apples-to-apples comparison of layout A (candidate) vs B (baseline).

    Reports ||mu_B||_1 / ||mu_A||_1, the relative reductions of the mean
    condition numbers going from B to A, and the fraction of random
    (sigma1, delta-sigma) pairs on which A's distinguishability beats B's,
    on both coarse and fine meshes.
    """
    k = layout_a.k
    z = ContactImpedances.uniform(k, z_value)
    protocol = adjacent_protocol(k, amplitude)
    spacing = h_min if ref_spacing is None else ref_spacing
    n_draw = max(mu_samples, kappa_samples)
    ref, fields = metric_fields(domain, spacing, n_draw, prior_params, seed)

    rep_a = layout_quality_report(
        domain, layout_a, fields[:kappa_samples], ref, h_max, h_min, z, protocol,
        mu_samples, mesh_seed,
    )
    rep_b = layout_quality_report(
        domain, layout_b, fields[:kappa_samples], ref, h_max, h_min, z, protocol,
        mu_samples, mesh_seed,
    )
    mu_a, mu_b = rep_a.mu, rep_b.mu
    kH_a, kR_a, excl_a = rep_a.kappa_H_mean, rep_a.kappa_R_mean, rep_a.n_excluded
    kH_b, kR_b, excl_b = rep_b.kappa_H_mean, rep_b.kappa_R_mean, rep_b.n_excluded

    # fresh pair fields for distinguishability, rescaled onto delta_range
    ref_d, fields_d = metric_fields(
        domain, spacing, 2 * delta_pairs, prior_params, seed + 1
    )
    lo, hi = delta_range
    sig1 = [rescale_to_range(f, lo, hi) for f in fields_d[:delta_pairs]]
    dsig = [rescale_to_range(f, lo, hi) for f in fields_d[delta_pairs:]]
    wins = {}
    deltas = {}
    for label, h in (("coarse", h_max), ("fine", h_max / 2.0)):
        mesh_a = generate_mesh(domain, layout_a, h, h / 2.0, seed=mesh_seed)
        mesh_b = generate_mesh(domain, layout_b, h, h / 2.0, seed=mesh_seed)
        d_a, d_b = [], []
        for s1, ds in zip(sig1, dsig):
            s1_a = interpolate_field(s1, ref_d, mesh_a)
            ds_a = interpolate_field(ds, ref_d, mesh_a)
            s1_b = interpolate_field(s1, ref_d, mesh_b)
            ds_b = interpolate_field(ds, ref_d, mesh_b)
            d_a.append(distinguishability(mesh_a, s1_a, ds_a, z, protocol))
            d_b.append(distinguishability(mesh_b, s1_b, ds_b, z, protocol))
        d_a, d_b = np.asarray(d_a), np.asarray(d_b)
        # ties count half so comparing a layout against itself scores 0.5
        wins[label] = float(np.mean((d_a > d_b) + 0.5 * (d_a == d_b)))
        deltas[label] = {"a": d_a.tolist(), "b": d_b.tolist()}

    return {
        "mu_a": mu_a.tolist(),
        "mu_b": mu_b.tolist(),
        "mu_l1_a": float(np.abs(mu_a).sum()),
        "mu_l1_b": float(np.abs(mu_b).sum()),
        "mu_ratio_b_over_a": float(np.abs(mu_b).sum() / np.abs(mu_a).sum()),
        "kappa_H_mean_a": kH_a,
        "kappa_H_mean_b": kH_b,
        "kappa_R_mean_a": kR_a,
        "kappa_R_mean_b": kR_b,
        "kappa_H_reduction": float((kH_b - kH_a) / kH_b),
        "kappa_R_reduction": float((kR_b - kR_a) / kR_b),
        "kappa_excluded": [excl_a, excl_b],
        "delta_win_rate": wins,
        "delta_values": deltas,
        "n_mu_samples": mu_samples,
        "n_kappa_samples": kappa_samples,
        "n_delta_pairs": delta_pairs,
    }
