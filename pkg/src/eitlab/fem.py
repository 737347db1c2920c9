"""EIT forward problem: complete electrode model, voltages and sensitivities.

The discrete system couples nodal potentials with one voltage unknown per
electrode.  Contact impedance enters through boundary mass/coupling terms,
so current injected at an electrode is shunted across its whole segment.
The system is grounded by eliminating the center node, which keeps it
symmetric positive definite and preserves the mesh's rotational symmetry.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .errors import ContractError, NumericalError
from .mesh import Mesh

GROUND_NODE = 0  # center node; rotation-invariant gauge choice


@dataclass(frozen=True)
class StimulationProtocol:
    """Adjacent drive / adjacent measurement protocol.

    Drive pair ``d`` injects ``drive_current`` at electrode ``d`` and
    extracts it at ``d+1``.  For each drive, voltage differences are taken
    across every adjacent pair that shares no electrode with the drive
    pair, in ascending electrode order; 16 electrodes give 16 * 13 = 208
    measurements.
    """

    n_electrodes: int = 16
    drive_current: float = 0.01

    @property
    def drive_pairs(self) -> list[tuple[int, int]]:
        e = self.n_electrodes
        return [(d, (d + 1) % e) for d in range(e)]

    def measurement_electrodes(self, drive: int) -> list[int]:
        """First electrodes of the measurement pairs used under ``drive``."""
        e = self.n_electrodes
        excluded = {(drive - 1) % e, drive, (drive + 1) % e}
        return [m for m in range(e) if m not in excluded]

    @property
    def rows(self) -> list[tuple[int, int]]:
        """Ordered (drive, measurement) pairs, one per frame entry."""
        return [
            (d, m)
            for d in range(self.n_electrodes)
            for m in self.measurement_electrodes(d)
        ]

    @property
    def n_measurements(self) -> int:
        return len(self.rows)

    def row_index(self, drive: int, meas: int) -> int:
        mlist = self.measurement_electrodes(drive)
        return drive * len(mlist) + mlist.index(meas)


KIND_ABSOLUTE = "absolute"
KIND_DIFFERENCE = "time-difference"


@dataclass
class MeasurementFrame:
    """One ordered vector of boundary voltage (differences)."""

    values: np.ndarray
    kind: str = KIND_ABSOLUTE

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.ndim != 1:
            raise ContractError("frame values must be a 1-D vector")
        if self.kind not in (KIND_ABSOLUTE, KIND_DIFFERENCE):
            raise ContractError(f"unknown frame kind {self.kind!r}")


def time_difference(v2: MeasurementFrame, v1: MeasurementFrame) -> MeasurementFrame:
    """Entrywise v2 - v1 as a time-difference frame."""
    if v2.values.shape != v1.values.shape:
        raise ContractError("frame lengths differ")
    if v2.kind != KIND_ABSOLUTE or v1.kind != KIND_ABSOLUTE:
        raise ContractError("time_difference expects two absolute frames")
    return MeasurementFrame(v2.values - v1.values, kind=KIND_DIFFERENCE)


class ForwardSolver:
    """Assembles and solves the complete electrode model for one mesh.

    Geometry factors and the conductivity-independent electrode blocks are
    precomputed; each conductivity field costs one sparse factorization,
    reused across all drive pairs.
    """

    def __init__(
        self,
        mesh: Mesh,
        protocol: StimulationProtocol | None = None,
        contact_impedance: float = 1e-2,
    ):
        if contact_impedance <= 0:
            raise ContractError("contact_impedance must be > 0")
        self.mesh = mesh
        self.protocol = protocol or StimulationProtocol(n_electrodes=mesh.n_electrodes)
        if self.protocol.n_electrodes != mesh.n_electrodes:
            raise ContractError("protocol electrode count differs from mesh")
        self.contact_impedance = float(contact_impedance)

        nodes, elems = mesh.nodes, mesh.elements
        x, y = nodes[:, 0], nodes[:, 1]
        i0, i1, i2 = elems[:, 0], elems[:, 1], elems[:, 2]
        # linear shape-function coefficients: grad(phi_a) = (b_a, c_a) / (2A)
        self._b = np.column_stack([y[i1] - y[i2], y[i2] - y[i0], y[i0] - y[i1]])
        self._c = np.column_stack([x[i2] - x[i1], x[i0] - x[i2], x[i1] - x[i0]])
        self._areas = mesh.element_areas

        # per-element unit-conductivity stiffness, flattened for fast COO
        s_local = (
            self._b[:, :, None] * self._b[:, None, :]
            + self._c[:, :, None] * self._c[:, None, :]
        ) / (4.0 * self._areas[:, None, None])
        rows = np.repeat(elems, 3, axis=1).reshape(-1)
        cols = np.tile(elems, (1, 3)).reshape(-1)
        self._stiff_rows = rows
        self._stiff_cols = cols
        self._stiff_vals_unit = s_local.reshape(mesh.n_elements, 9)

        self._n_nodes = mesh.n_nodes
        self._n_dof = mesh.n_nodes + mesh.n_electrodes
        self._electrode_block = self._assemble_electrode_block()
        self._keep = np.asarray(
            [i for i in range(self._n_dof) if i != GROUND_NODE], dtype=np.int64
        )
        self._pair_currents = self._unit_pair_currents()

    def _assemble_electrode_block(self) -> sp.csr_matrix:
        z = self.contact_impedance
        n_nodes, n_dof = self._n_nodes, self._n_dof
        r, c, v = [], [], []
        for ell, seg in enumerate(self.mesh.electrode_segments):
            edof = n_nodes + ell
            p = self.mesh.nodes[seg[:, 0]]
            q = self.mesh.nodes[seg[:, 1]]
            lengths = np.linalg.norm(q - p, axis=1)
            for (a, b), L in zip(seg.tolist(), lengths):
                m = L / (6.0 * z)
                r += [a, a, b, b]
                c += [a, b, a, b]
                v += [2 * m, m, m, 2 * m]
                w = L / (2.0 * z)
                r += [a, edof, b, edof]
                c += [edof, a, edof, b]
                v += [-w, -w, -w, -w]
                r.append(edof)
                c.append(edof)
                v.append(L / z)
        return sp.coo_matrix((v, (r, c)), shape=(n_dof, n_dof)).tocsr()

    def _unit_pair_currents(self) -> np.ndarray:
        """Columns: unit current in at electrode p, out at p+1 (reduced dofs)."""
        e = self.mesh.n_electrodes
        f = np.zeros((self._n_dof, e))
        for p, (a, b) in enumerate(self.protocol.drive_pairs):
            f[self._n_nodes + a, p] = 1.0
            f[self._n_nodes + b, p] = -1.0
        return f[self._keep]

    def _check_sigma(self, sigma: np.ndarray) -> np.ndarray:
        sigma = np.asarray(sigma, dtype=np.float64)
        if sigma.shape != (self.mesh.n_elements,):
            raise ContractError(
                f"conductivity length {sigma.shape} does not match "
                f"{self.mesh.n_elements} elements"
            )
        if not np.all(np.isfinite(sigma)) or np.any(sigma <= 0):
            raise NumericalError("conductivity must be finite and > 0")
        return sigma

    def assemble(self, sigma: np.ndarray) -> sp.csc_matrix:
        sigma = self._check_sigma(sigma)
        vals = (self._stiff_vals_unit * sigma[:, None]).reshape(-1)
        stiff = sp.coo_matrix(
            (vals, (self._stiff_rows, self._stiff_cols)),
            shape=(self._n_dof, self._n_dof),
        ).tocsr()
        k = stiff + self._electrode_block
        return k[self._keep][:, self._keep].tocsc()

    def factorize(self, sigma: np.ndarray):
        """LU factorization of the grounded system for one conductivity."""
        k = self.assemble(sigma)
        try:
            return spla.splu(k)
        except RuntimeError as err:  # pragma: no cover - singular input
            raise NumericalError(f"singular forward system: {err}") from err

    def solve_pair_potentials(self, sigma: np.ndarray) -> np.ndarray:
        """Full-dof solutions for unit current at every adjacent pair.

        Returns (n_dof, n_electrodes); column p is the potential/electrode
        vector driven by +1 A at electrode p, -1 A at p+1.  The ground node
        row is reinserted as zero.
        """
        lu = self.factorize(sigma)
        xr = lu.solve(self._pair_currents)
        if not np.all(np.isfinite(xr)):
            raise NumericalError("non-finite potentials from forward solve")
        x = np.zeros((self._n_dof, self.mesh.n_electrodes))
        x[self._keep] = xr
        return x

    def forward(self, sigma: np.ndarray) -> MeasurementFrame:
        """Absolute measurement frame for one conductivity field."""
        x = self.solve_pair_potentials(sigma)
        # transfer matrix: voltage across pair m when pair d carries 1 A
        xr = x[self._keep]
        trans = self._pair_currents.T @ xr
        amp = self.protocol.drive_current
        vals = np.array([amp * trans[m, d] for d, m in self.protocol.rows])
        return MeasurementFrame(vals, kind=KIND_ABSOLUTE)

    def jacobian(self, sigma: np.ndarray) -> np.ndarray:
        """Sensitivity of every frame entry to every element conductivity.

        Adjoint form: the derivative of measurement (d, m) with respect to
        sigma_e is ``-I * area_e * grad(u_d) . grad(u_m)`` with unit-current
        potentials, both of which are already solved for the frame.
        """
        x = self.solve_pair_potentials(sigma)
        u = x[: self._n_nodes]
        elems = self.mesh.elements
        # per-pair, per-element constant gradients, shape (pairs, m, 2)
        ue = u[elems]  # (m, 3, pairs)
        gx = np.einsum("mep,me->pm", ue, self._b) / (2.0 * self._areas)
        gy = np.einsum("mep,me->pm", ue, self._c) / (2.0 * self._areas)
        amp = self.protocol.drive_current
        rows = self.protocol.rows
        jac = np.empty((len(rows), self.mesh.n_elements))
        for r, (d, m) in enumerate(rows):
            jac[r] = -amp * self._areas * (gx[d] * gx[m] + gy[d] * gy[m])
        return jac

    def electrode_currents(self, sigma: np.ndarray, x: np.ndarray) -> np.ndarray:
        """Net current through each electrode implied by a solution column."""
        k = self.assemble(sigma)
        r = k @ x[self._keep]
        return r[self._n_nodes - 1 :]  # electrode rows after ground removal


def solve_forward(
    mesh: Mesh,
    sigma: np.ndarray,
    protocol: StimulationProtocol | None = None,
    contact_impedance: float = 1e-2,
) -> MeasurementFrame:
    """One-shot forward solve; see :class:`ForwardSolver`."""
    return ForwardSolver(mesh, protocol, contact_impedance).forward(sigma)


def jacobian(
    mesh: Mesh,
    sigma: np.ndarray,
    protocol: StimulationProtocol | None = None,
    contact_impedance: float = 1e-2,
) -> np.ndarray:
    """One-shot sensitivity matrix; see :class:`ForwardSolver.jacobian`."""
    return ForwardSolver(mesh, protocol, contact_impedance).jacobian(sigma)
