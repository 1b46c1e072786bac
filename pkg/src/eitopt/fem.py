"""Complete electrode model (CEM) forward solver on nodal P1 elements.

The assembled system couples interior potentials u (one per mesh node) with
electrode potentials U (one per electrode) through contact impedances z:

    [ B  C ] [u]   [0]      B = stiffness(sigma) + boundary mass / z
    [ Cᵀ D ] [U] = [I]      C, D = electrode coupling / z

The raw block system is singular (constant potentials); it is grounded by
expressing U in a basis of zero-sum electrode potential vectors, which makes
the reduced matrix symmetric positive definite.  That reduced matrix is the
conductance-form "resistivity matrix" whose inverse action maps injected
currents to potentials.

Conductivity is parameterized per node and interpolated linearly inside
elements; the Jacobian of the measured voltages with respect to nodal
conductivity is computed with the adjoint method (measurement-field inner
products), never by finite differences.
"""

from __future__ import annotations

import io
from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp
from scipy.linalg import blas as _blas
from scipy.sparse.linalg import splu

from .mesh import TriangularMesh

__all__ = [
    "FEMError",
    "ContactImpedances",
    "StimulationProtocol",
    "adjacent_protocol",
    "ForwardSolution",
    "CEMSystem",
    "assemble_system",
    "solve_forward",
    "forward_with_jacobian",
    "jacobian",
    "hessian",
    "condition_number",
    "voltages_to_csv",
]


class FEMError(RuntimeError):
    """Assembly or solve failure (bad inputs or degenerate system)."""


@dataclass(frozen=True)
class ContactImpedances:
    """Per-electrode contact impedances, all strictly positive."""

    values: np.ndarray

    def __post_init__(self):
        v = np.asarray(self.values, dtype=float)
        if (v <= 0).any():
            raise FEMError("contact impedances must be positive")
        v.setflags(write=False)
        object.__setattr__(self, "values", v)

    @classmethod
    def uniform(cls, k: int, z: float) -> "ContactImpedances":
        return cls(np.full(k, float(z)))

    @property
    def k(self) -> int:
        return len(self.values)


@dataclass(frozen=True)
class StimulationProtocol:
    """Current injection columns plus the cyclic adjacent-pair measurement rule.

    Measurements enumerate, for every injection column, the differences
    U_i - U_{i+1} (cyclic) for i = 1..k, so a k-electrode protocol with
    k-1 injections yields k(k-1) measurements, injection-major.
    """

    injections: np.ndarray
    k: int

    def __post_init__(self):
        inj = np.asarray(self.injections, dtype=float)
        if inj.ndim != 2 or inj.shape[0] != self.k:
            raise FEMError("injections must be a (k, n_injections) matrix")
        if np.abs(inj.sum(axis=0)).max() > 1e-12:
            raise FEMError("every injection column must sum to zero")
        inj.setflags(write=False)
        object.__setattr__(self, "injections", inj)

    @property
    def n_injections(self) -> int:
        return self.injections.shape[1]

    @property
    def n_measurements(self) -> int:
        return self.k * self.n_injections

    @property
    def meas_pairs(self) -> np.ndarray:
        i = np.arange(self.k)
        return np.column_stack([i, (i + 1) % self.k])

    def measure(self, electrode_potentials: np.ndarray) -> np.ndarray:
        """Stack adjacent-pair differences, injection-major, pair ascending."""
        p = self.meas_pairs
        diffs = electrode_potentials[p[:, 0], :] - electrode_potentials[p[:, 1], :]
        return diffs.T.reshape(-1)


def adjacent_protocol(k: int, amplitude: float = 1.0) -> StimulationProtocol:
    """k-1 injections of +-amplitude (mA): column j drives electrode j+2 against electrode 1."""
    inj = np.zeros((k, k - 1))
    inj[0, :] = -amplitude
    for j in range(k - 1):
        inj[j + 1, j] = amplitude
    return StimulationProtocol(injections=inj, k=k)


@dataclass(frozen=True)
class ForwardSolution:
    """CEM solution for every injection of a protocol."""

    voltages: np.ndarray             # (k * n_injections,) measured differences
    electrode_potentials: np.ndarray  # (k, n_injections)
    interior_potentials: np.ndarray   # (n_nodes, n_injections)


def _null_basis(k: int) -> np.ndarray:
    """Basis of the zero-sum subspace for electrode potentials (k x (k-1))."""
    N = np.zeros((k, k - 1))
    N[0, :] = 1.0
    N[1:, :] = -np.eye(k - 1)
    return N


@dataclass(eq=False)
class CEMSystem:
    """Assembled CEM system for one (mesh, sigma, z) triple.

    ``full_matrix`` is the raw singular block system; ``matrix`` is the
    grounded (zero-mean electrode potential) reduction, symmetric positive
    definite -- the conductance-form resistivity matrix R(sigma).
    """

    mesh: TriangularMesh
    sigma: np.ndarray
    z: ContactImpedances
    full_matrix: sp.csr_matrix
    matrix: sp.csr_matrix
    null_basis: np.ndarray

    @property
    def n_nodes(self) -> int:
        return self.mesh.n_nodes

    @property
    def k(self) -> int:
        return self.z.k

    @property
    def resistivity_matrix(self) -> sp.csr_matrix:
        return self.matrix

    def rhs(self, injections: np.ndarray) -> np.ndarray:
        """Grounded right-hand sides for a (k, n_injections) current matrix."""
        inj = np.atleast_2d(np.asarray(injections, dtype=float))
        if inj.shape[0] != self.k:
            inj = inj.T
        b = np.zeros((self.n_nodes + self.k - 1, inj.shape[1]))
        b[self.n_nodes :, :] = self.null_basis.T @ inj
        return b

    def factor(self):
        try:
            return splu(self.matrix.tocsc())
        except RuntimeError as exc:
            raise FEMError(f"CEM system factorization failed: {exc}") from exc


def assemble_system(
    mesh: TriangularMesh, sigma: np.ndarray, z: ContactImpedances
) -> CEMSystem:
    """Assemble the CEM block system for nodal conductivity sigma (> 0)."""
    sigma = np.asarray(sigma, dtype=float)
    if sigma.shape != (mesh.n_nodes,):
        raise FEMError(
            f"sigma has shape {sigma.shape}, expected ({mesh.n_nodes},) nodal values"
        )
    if not np.isfinite(sigma).all() or (sigma <= 0).any():
        raise FEMError("sigma must be finite and positive everywhere")
    k = z.k
    if k != mesh.n_electrodes:
        raise FEMError(f"{k} impedances for {mesh.n_electrodes} electrodes")
    n = mesh.n_nodes
    tri = mesh.triangles
    G = mesh.shape_gradient_gram
    sig_e = sigma[tri].mean(axis=1)

    vals = (sig_e[:, None, None] * G).reshape(-1)
    rows = np.repeat(tri, 3, axis=1).reshape(-1)
    cols = np.tile(tri, (1, 3)).reshape(-1)
    B = sp.coo_matrix((vals, (rows, cols)), shape=(n, n))

    c_rows, c_cols, c_vals = [], [], []
    m_rows, m_cols, m_vals = [], [], []
    d_diag = np.zeros(k)
    for el in range(k):
        pairs = mesh.electrode_edges[el]
        lengths = mesh.electrode_edge_lengths(el)
        zl = z.values[el]
        d_diag[el] = lengths.sum() / zl
        for (a, b_), le in zip(pairs, lengths):
            # edge mass matrix le/6 * [[2, 1], [1, 2]], scaled by 1/z
            m_rows += [a, a, b_, b_]
            m_cols += [a, b_, a, b_]
            w = le / (6.0 * zl)
            m_vals += [2 * w, w, w, 2 * w]
            c_rows += [a, b_]
            c_cols += [el, el]
            c_vals += [-le / (2.0 * zl), -le / (2.0 * zl)]
    Bm = sp.coo_matrix((m_vals, (m_rows, m_cols)), shape=(n, n))
    C = sp.coo_matrix((c_vals, (c_rows, c_cols)), shape=(n, k)).tocsr()
    D = sp.diags(d_diag)

    B_tot = (B + Bm).tocsr()
    full = sp.bmat([[B_tot, C], [C.T, D]], format="csr")

    N = _null_basis(k)
    CN = sp.csr_matrix(C @ N)
    NDN = sp.csr_matrix(N.T @ (D @ N))
    grounded = sp.bmat([[B_tot, CN], [CN.T, NDN]], format="csr")
    return CEMSystem(
        mesh=mesh, sigma=sigma, z=z, full_matrix=full, matrix=grounded, null_basis=N
    )


def solve_forward(
    mesh: TriangularMesh,
    sigma: np.ndarray,
    z: ContactImpedances,
    protocol: StimulationProtocol,
    system: CEMSystem | None = None,
) -> ForwardSolution:
    """Solve all injections with one factorization and measure adjacent pairs."""
    sys_ = system if system is not None else assemble_system(mesh, sigma, z)
    lu = sys_.factor()
    x = lu.solve(sys_.rhs(protocol.injections))
    if not np.isfinite(x).all():
        raise FEMError("forward solve produced non-finite potentials")
    n = sys_.n_nodes
    Ue = sys_.null_basis @ x[n:, :]
    return ForwardSolution(
        voltages=protocol.measure(Ue),
        electrode_potentials=Ue,
        interior_potentials=x[:n, :],
    )


def forward_with_jacobian(
    mesh: TriangularMesh,
    sigma: np.ndarray,
    z: ContactImpedances,
    protocol: StimulationProtocol,
    system: CEMSystem | None = None,
) -> tuple[ForwardSolution, np.ndarray]:
    """Forward solution and adjoint Jacobian sharing a single factorization."""
    sys_ = system if system is not None else assemble_system(mesh, sigma, z)
    lu = sys_.factor()
    n, k = sys_.n_nodes, sys_.k
    x = lu.solve(sys_.rhs(protocol.injections))
    if not np.isfinite(x).all():
        raise FEMError("forward solve produced non-finite potentials")
    u = x[:n, :]                                   # (n, D)
    Ue = sys_.null_basis @ x[n:, :]
    solution = ForwardSolution(
        voltages=protocol.measure(Ue), electrode_potentials=Ue, interior_potentials=u
    )

    pairs = protocol.meas_pairs
    Cm = np.zeros((n + k - 1, k))
    diff = np.zeros((k, k))
    diff[pairs[:, 0], np.arange(k)] += 1.0
    diff[pairs[:, 1], np.arange(k)] -= 1.0
    Cm[n:, :] = sys_.null_basis.T @ diff
    w = lu.solve(Cm)[:n, :]                        # (n, k) adjoint fields

    G = mesh.shape_gradient_gram
    tri = mesh.triangles
    w_loc = w[tri]                                 # (E, 3, k)
    u_loc = u[tri]                                 # (E, 3, D)
    T = np.einsum("eik,eij,ejd->ekd", w_loc, G, u_loc)

    # d(stiffness)/d(sigma_node) = G_e / 3 for each of the element's nodes
    D = protocol.n_injections
    Jn = mesh.node_scatter @ T.reshape(len(tri), k * D)
    J = -Jn.reshape(n, k, D).transpose(2, 1, 0).reshape(D * k, n)
    return solution, J


def jacobian(
    mesh: TriangularMesh,
    sigma: np.ndarray,
    z: ContactImpedances,
    protocol: StimulationProtocol,
    system: CEMSystem | None = None,
) -> np.ndarray:
    """Adjoint-method derivative of measured voltages w.r.t. nodal sigma.

    Rows follow measurement order (injection-major, adjacent pair minor);
    columns follow mesh node order.
    """
    return forward_with_jacobian(mesh, sigma, z, protocol, system=system)[1]


def hessian(J: np.ndarray) -> np.ndarray:
    """Gauss-Newton Hessian JᵀJ, exactly symmetric."""
    if not np.isfinite(J).all():
        raise FEMError("Jacobian contains non-finite entries")
    # J.T is Fortran-ordered for C-ordered J, so syrk runs without a copy
    Ht = _blas.dsyrk(1.0, J.T, trans=0, lower=0)
    return np.triu(Ht) + np.triu(Ht, 1).T


def condition_number(M: np.ndarray) -> float:
    """2-norm condition number sigma_max / sigma_min via SVD.

    Returns +inf when the smallest singular value is below 1e-300 relative
    to the largest (numerically singular).
    """
    M = np.asarray(M, dtype=float)
    if M.ndim != 2 or M.shape[0] != M.shape[1]:
        raise ValueError("condition_number expects a square matrix")
    s = np.linalg.svd(M, compute_uv=False)
    if s[0] == 0.0 or s[-1] <= 1e-300 * s[0]:
        return np.inf
    return float(s[0] / s[-1])


def voltages_to_csv(voltages: np.ndarray, protocol: StimulationProtocol) -> str:
    """Measurement-order CSV: injection-major, adjacent pair (i, i+1) ascending in i."""
    pairs = protocol.meas_pairs
    buf = io.StringIO()
    buf.write("measurement,injection,pair_first,value\n")
    for m, v in enumerate(np.asarray(voltages)):
        d, p = divmod(m, protocol.k)
        buf.write(f"{m},{d},{pairs[p, 0] + 1},{v:.17g}\n")
    return buf.getvalue()
