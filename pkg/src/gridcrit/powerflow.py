"""Newton-Raphson AC power flow and impedance-matrix electrical distance."""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from gridcrit.grid import GridCase

DEFAULT_TOL = 1e-8
DEFAULT_MAX_ITER = 20


class SingularJacobianError(RuntimeError):
    pass


class IslandError(RuntimeError):
    """The network (minus the slack bus) has no invertible admittance matrix."""


@dataclass(frozen=True)
class PowerFlowSolution:
    vm: np.ndarray
    va: np.ndarray
    p_from: np.ndarray
    q_from: np.ndarray
    p_to: np.ndarray
    q_to: np.ndarray
    loss: np.ndarray
    loading: np.ndarray
    p_gen: np.ndarray
    q_gen: np.ndarray
    converged: bool
    iterations: int
    max_mismatch: float
    tol: float

    @property
    def p_through(self) -> np.ndarray:
        """Active power carried from->to, averaged over both terminals."""
        return 0.5 * (self.p_from - self.p_to)

    def to_dict(self) -> dict:
        out = {}
        for k, v in asdict(self).items():
            out[k] = v.tolist() if isinstance(v, np.ndarray) else v
        return out

    @classmethod
    def from_dict(cls, d: dict) -> PowerFlowSolution:
        kw = {}
        for k, v in d.items():
            kw[k] = np.asarray(v, dtype=float) if isinstance(v, list) else v
        return cls(**kw)


def build_admittance(case: GridCase) -> np.ndarray:
    """Dense complex nodal admittance matrix from branch pi-models."""
    n = case.n_bus
    f, t = case.branch_endpoints()
    r = np.array([br.r for br in case.branches])
    x = np.array([br.x for br in case.branches])
    b = np.array([br.b_shunt for br in case.branches])
    ys = 1.0 / (r + 1j * x)
    ysh = 0.5j * b
    Y = np.zeros((n, n), dtype=complex)
    np.add.at(Y, (f, f), ys + ysh)
    np.add.at(Y, (t, t), ys + ysh)
    np.add.at(Y, (f, t), -ys)
    np.add.at(Y, (t, f), -ys)
    return Y


def _power_injections(case: GridCase) -> np.ndarray:
    return np.array([complex(b.p_gen - b.p_load, b.q_gen - b.q_load) for b in case.buses])


def branch_flows(case: GridCase, V: np.ndarray):
    """Complex terminal power (S_from, S_to) of every branch for voltage vector V."""
    f, t = case.branch_endpoints()
    r = np.array([br.r for br in case.branches])
    x = np.array([br.x for br in case.branches])
    b = np.array([br.b_shunt for br in case.branches])
    ys = 1.0 / (r + 1j * x)
    ysh = 0.5j * b
    i_f = (V[f] - V[t]) * ys + V[f] * ysh
    i_t = (V[t] - V[f]) * ys + V[t] * ysh
    return V[f] * np.conj(i_f), V[t] * np.conj(i_t)


def solve_ac(case: GridCase, tol: float = DEFAULT_TOL, max_iter: int = DEFAULT_MAX_ITER) -> PowerFlowSolution:
    """Full Newton-Raphson in polar coordinates from a flat start.

    Non-convergence is returned as ``converged=False``; only a singular
    Jacobian raises.
    """
    if not tol > 0:
        raise ValueError("tol must be positive")
    if max_iter < 1:
        raise ValueError("max_iter must be >= 1")

    Y = build_admittance(case)
    kinds = [b.kind for b in case.buses]
    pv = np.array([i for i, k in enumerate(kinds) if k == "pv"], dtype=int)
    pq = np.array([i for i, k in enumerate(kinds) if k == "pq"], dtype=int)
    pvpq = np.r_[pv, pq]
    Sspec = _power_injections(case)

    vm = np.array([b.v_setpoint if b.kind != "pq" else 1.0 for b in case.buses])
    va = np.zeros(case.n_bus)
    V = vm * np.exp(1j * va)

    def mismatch(V):
        mis = V * np.conj(Y @ V) - Sspec
        return np.r_[mis[pvpq].real, mis[pq].imag]

    F = mismatch(V)
    norm = np.max(np.abs(F)) if F.size else 0.0
    it = 0
    converged = norm <= tol
    npv, npq = len(pv), len(pq)
    while not converged and it < max_iter:
        it += 1
        Ibus = Y @ V
        Vnorm = V / np.abs(V)
        dS_dVm = np.diag(V) @ np.conj(Y @ np.diag(Vnorm)) + np.diag(np.conj(Ibus) * Vnorm)
        dS_dVa = 1j * np.diag(V) @ np.conj(np.diag(Ibus) - Y @ np.diag(V))
        J = np.block([
            [dS_dVa[np.ix_(pvpq, pvpq)].real, dS_dVm[np.ix_(pvpq, pq)].real],
            [dS_dVa[np.ix_(pq, pvpq)].imag, dS_dVm[np.ix_(pq, pq)].imag],
        ])
        try:
            dx = -np.linalg.solve(J, F)
        except np.linalg.LinAlgError as exc:
            raise SingularJacobianError(f"singular Jacobian at iteration {it}") from exc
        va[pvpq] += dx[: npv + npq]
        vm[pq] += dx[npv + npq:]
        V = vm * np.exp(1j * va)
        F = mismatch(V)
        norm = np.max(np.abs(F))
        if not np.isfinite(norm):
            break
        converged = norm <= tol

    s_bus = V * np.conj(Y @ V)
    load = np.array([complex(b.p_load, b.q_load) for b in case.buses])
    s_gen = s_bus + load
    s_from, s_to = branch_flows(case, V)
    rating = np.array([br.rating for br in case.branches])
    return PowerFlowSolution(
        vm=np.abs(V),
        va=np.angle(V),
        p_from=s_from.real,
        q_from=s_from.imag,
        p_to=s_to.real,
        q_to=s_to.imag,
        loss=s_from.real + s_to.real,
        loading=np.maximum(np.abs(s_from), np.abs(s_to)) / rating,
        p_gen=s_gen.real,
        q_gen=s_gen.imag,
        converged=bool(converged),
        iterations=it,
        max_mismatch=float(norm),
        tol=tol,
    )


def electrical_distance(case: GridCase) -> np.ndarray:
    """Impedance-matrix electrical distance ``|z_ii + z_jj - 2 z_ij|``.

    Z is the inverse of the admittance matrix with the slack bus grounded
    (its row and column removed); slack entries of Z are taken as zero.
    """
    Y = build_admittance(case)
    s = case.bus_index[case.slack_bus]
    keep = np.array([i for i in range(case.n_bus) if i != s], dtype=int)
    Yr = Y[np.ix_(keep, keep)]
    try:
        Zr = np.linalg.inv(Yr)
    except np.linalg.LinAlgError as exc:
        raise IslandError("reduced admittance matrix is singular; network is not connected") from exc
    if not np.all(np.isfinite(Zr)) or np.linalg.cond(Yr) > 1e14:
        raise IslandError("reduced admittance matrix is singular; network is not connected")
    Z = np.zeros((case.n_bus, case.n_bus), dtype=complex)
    Z[np.ix_(keep, keep)] = Zr
    d = np.diag(Z)
    L = np.abs(d[:, None] + d[None, :] - 2 * Z)
    L = 0.5 * (L + L.T)
    np.fill_diagonal(L, 0.0)
    return L
