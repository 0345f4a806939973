"""
Conservative-variable algebra and fluxes for the 2D steady Euler equations.

All functions are vectorised: a state is an array whose last axis holds
``(rho, rho*u_x, rho*u_y, E)``, and normals carry ``(n_x, n_y)`` on their
last axis.  Leading axes broadcast.
"""
from dataclasses import dataclass

import numpy as np

GAMMA = 1.4


class InadmissibleStateError(ValueError):
    """Raised when a state has nonpositive density or pressure."""


@dataclass(frozen=True)
class FlowConfig:
    """Freestream configuration (nondimensionalised so that c_inf = 1)."""

    mach: float
    alpha: float = 0.0
    gamma: float = GAMMA
    rho_inf: float = 1.0
    p_inf: float | None = None

    def __post_init__(self):
        if not self.mach > 0:
            raise ValueError(f"mach must be positive, got {self.mach}")
        if not self.gamma > 1:
            raise ValueError(f"gamma must exceed 1, got {self.gamma}")
        if self.p_inf is None:
            object.__setattr__(self, "p_inf", 1.0 / self.gamma)

    @property
    def alpha_rad(self):
        return np.deg2rad(self.alpha)


def total_energy(rho, p, velocity, gamma=GAMMA):
    rho = np.asarray(rho, dtype=float)
    p = np.asarray(p, dtype=float)
    if np.any(rho <= 0) or np.any(p <= 0):
        raise InadmissibleStateError("total_energy requires rho > 0 and p > 0")
    v = np.asarray(velocity, dtype=float)
    return p / (gamma - 1.0) + 0.5 * rho * np.sum(v * v, axis=-1)


def _pressure(u, gamma):
    rho = u[..., 0]
    return (gamma - 1.0) * (u[..., 3] - 0.5 * (u[..., 1] ** 2 + u[..., 2] ** 2) / rho)


def admissible(u, gamma=GAMMA):
    """Boolean mask of states with positive density and pressure."""
    u = np.asarray(u, dtype=float)
    rho = u[..., 0]
    with np.errstate(divide="ignore", invalid="ignore"):
        p = _pressure(u, gamma)
    return (rho > 0) & (p > 0) & np.isfinite(p)


def pressure(u, gamma=GAMMA, check=True):
    """Pressure from the equation of state; raises on inadmissible states."""
    u = np.asarray(u, dtype=float)
    if check and not np.all(admissible(u, gamma)):
        raise InadmissibleStateError("state with nonpositive density or pressure")
    return _pressure(u, gamma)


def sound_speed(u, gamma=GAMMA):
    return np.sqrt(gamma * pressure(u, gamma, check=False) / u[..., 0])


def physical_flux(u, gamma=GAMMA):
    """Flux tensor with shape ``u.shape + (2,)``; columns are x and y."""
    u = np.asarray(u, dtype=float)
    p = pressure(u, gamma)
    rho = u[..., 0]
    vx = u[..., 1] / rho
    vy = u[..., 2] / rho
    F = np.empty(u.shape + (2,))
    F[..., 0, 0] = u[..., 1]
    F[..., 1, 0] = u[..., 1] * vx + p
    F[..., 2, 0] = u[..., 2] * vx
    F[..., 3, 0] = vx * (u[..., 3] + p)
    F[..., 0, 1] = u[..., 2]
    F[..., 1, 1] = u[..., 1] * vy
    F[..., 2, 1] = u[..., 2] * vy + p
    F[..., 3, 1] = vy * (u[..., 3] + p)
    return F


def normal_flux(u, n, gamma=GAMMA, p=None):
    """F(u) . n without building the full tensor."""
    u = np.asarray(u, dtype=float)
    n = np.asarray(n, dtype=float)
    if p is None:
        p = pressure(u, gamma)
    rho = u[..., 0]
    vn = (u[..., 1] * n[..., 0] + u[..., 2] * n[..., 1]) / rho
    out = np.empty(np.broadcast_shapes(u.shape, n.shape[:-1] + (4,)))
    out[..., 0] = rho * vn
    out[..., 1] = u[..., 1] * vn + p * n[..., 0]
    out[..., 2] = u[..., 2] * vn + p * n[..., 1]
    out[..., 3] = vn * (u[..., 3] + p)
    return out


def flux_jacobian(u, n, gamma=GAMMA):
    """Exact Jacobian d(F(u).n)/du, shape ``(..., 4, 4)``."""
    u = np.asarray(u, dtype=float)
    n = np.asarray(n, dtype=float)
    rho = u[..., 0]
    vx = u[..., 1] / rho
    vy = u[..., 2] / rho
    nx = np.broadcast_to(n[..., 0], rho.shape)
    ny = np.broadcast_to(n[..., 1], rho.shape)
    p = pressure(u, gamma)
    vn = vx * nx + vy * ny
    g1 = gamma - 1.0
    phi = 0.5 * g1 * (vx * vx + vy * vy)
    H = (u[..., 3] + p) / rho
    A = np.zeros(rho.shape + (4, 4))
    A[..., 0, 1] = nx
    A[..., 0, 2] = ny
    A[..., 1, 0] = phi * nx - vx * vn
    A[..., 1, 1] = vn - (gamma - 2.0) * vx * nx
    A[..., 1, 2] = vx * ny - g1 * vy * nx
    A[..., 1, 3] = g1 * nx
    A[..., 2, 0] = phi * ny - vy * vn
    A[..., 2, 1] = vy * nx - g1 * vx * ny
    A[..., 2, 2] = vn - (gamma - 2.0) * vy * ny
    A[..., 2, 3] = g1 * ny
    A[..., 3, 0] = vn * (phi - H)
    A[..., 3, 1] = H * nx - g1 * vx * vn
    A[..., 3, 2] = H * ny - g1 * vy * vn
    A[..., 3, 3] = gamma * vn
    return A


def _check(u, gamma):
    if not np.all(admissible(u, gamma)):
        raise InadmissibleStateError("numerical flux called with an inadmissible state")


def _max_wave_speed(u, n, gamma):
    rho = u[..., 0]
    vn = (u[..., 1] * n[..., 0] + u[..., 2] * n[..., 1]) / rho
    c = np.sqrt(gamma * _pressure(u, gamma) / rho)
    return np.abs(vn) + c


def llf_flux(uL, uR, n, gamma=GAMMA):
    """Local Lax-Friedrichs (Rusanov) flux."""
    uL = np.asarray(uL, dtype=float)
    uR = np.asarray(uR, dtype=float)
    n = np.asarray(n, dtype=float)
    _check(uL, gamma)
    _check(uR, gamma)
    lam = np.maximum(_max_wave_speed(uL, n, gamma), _max_wave_speed(uR, n, gamma))
    return 0.5 * (normal_flux(uL, n, gamma) + normal_flux(uR, n, gamma)) - 0.5 * lam[..., None] * (uR - uL)


def hllc_flux(uL, uR, n, gamma=GAMMA):
    """HLLC flux with Davis wave-speed estimates, rotated to the normal frame."""
    uL = np.asarray(uL, dtype=float)
    uR = np.asarray(uR, dtype=float)
    n = np.asarray(n, dtype=float)
    _check(uL, gamma)
    _check(uR, gamma)
    shape = np.broadcast_shapes(uL.shape, uR.shape, n.shape[:-1] + (4,))
    uL = np.broadcast_to(uL, shape)
    uR = np.broadcast_to(uR, shape)
    nx = np.broadcast_to(n[..., 0], shape[:-1])
    ny = np.broadcast_to(n[..., 1], shape[:-1])

    rL, rR = uL[..., 0], uR[..., 0]
    vxL, vyL = uL[..., 1] / rL, uL[..., 2] / rL
    vxR, vyR = uR[..., 1] / rR, uR[..., 2] / rR
    pL, pR = _pressure(uL, gamma), _pressure(uR, gamma)
    cL, cR = np.sqrt(gamma * pL / rL), np.sqrt(gamma * pR / rR)
    qL = vxL * nx + vyL * ny
    qR = vxR * nx + vyR * ny

    sL = np.minimum(qL - cL, qR - cR)
    sR = np.maximum(qL + cL, qR + cR)
    mL = rL * (sL - qL)
    mR = rR * (sR - qR)
    sM = (pR - pL + mL * qL - mR * qR) / (mL - mR)

    FL = normal_flux(uL, np.stack([nx, ny], axis=-1), gamma, p=pL)
    FR = normal_flux(uR, np.stack([nx, ny], axis=-1), gamma, p=pR)

    def star(u, r, vx, vy, p, q, s, m):
        fac = m / (s - sM)
        d = sM - q
        out = np.empty(shape)
        out[..., 0] = fac
        out[..., 1] = fac * (vx + d * nx)
        out[..., 2] = fac * (vy + d * ny)
        out[..., 3] = fac * (u[..., 3] / r + d * (sM + p / m))
        return out

    with np.errstate(divide="ignore", invalid="ignore"):
        usL = star(uL, rL, vxL, vyL, pL, qL, sL, mL)
        usR = star(uR, rR, vxR, vyR, pR, qR, sR, mR)
    FsL = FL + sL[..., None] * (usL - uL)
    FsR = FR + sR[..., None] * (usR - uR)

    out = np.where((sL >= 0)[..., None], FL,
                   np.where((sM >= 0)[..., None], FsL,
                            np.where((sR >= 0)[..., None], FsR, FR)))
    return out


SCHEMES = {"llf": llf_flux, "hllc": hllc_flux}


def numerical_flux(uL, uR, n, gamma=GAMMA, scheme="hllc"):
    try:
        return SCHEMES[scheme.lower()](uL, uR, n, gamma)
    except KeyError:
        raise ValueError(f"unknown flux scheme {scheme!r}") from None


def _dwave_speed(u, n, gamma):
    """Wave speed |v.n| + c and its gradient with respect to u."""
    rho = u[..., 0]
    vx = u[..., 1] / rho
    vy = u[..., 2] / rho
    vn = vx * n[..., 0] + vy * n[..., 1]
    p = _pressure(u, gamma)
    c = np.sqrt(gamma * p / rho)
    dvn = np.stack([-vn / rho, n[..., 0] / rho + 0 * rho, n[..., 1] / rho + 0 * rho, 0 * rho], axis=-1)
    g1 = gamma - 1.0
    dp = np.stack([0.5 * g1 * (vx * vx + vy * vy), -g1 * vx, -g1 * vy, g1 + 0 * rho], axis=-1)
    drho = np.zeros_like(dp)
    drho[..., 0] = 1.0
    dc = (gamma / (2.0 * c * rho))[..., None] * (dp - (c * c / gamma)[..., None] * drho)
    lam = np.abs(vn) + c
    dlam = np.sign(vn)[..., None] * dvn + dc
    return lam, dlam


def llf_jacobians(uL, uR, n, gamma=GAMMA):
    """Analytic Jacobians of the LLF flux with respect to both traces."""
    uL = np.asarray(uL, dtype=float)
    uR = np.asarray(uR, dtype=float)
    n = np.asarray(n, dtype=float)
    _check(uL, gamma)
    _check(uR, gamma)
    shape = np.broadcast_shapes(uL.shape, uR.shape, n.shape[:-1] + (4,))
    uL = np.broadcast_to(uL, shape)
    uR = np.broadcast_to(uR, shape)
    n = np.broadcast_to(n, shape[:-1] + (2,))
    lamL, dlamL = _dwave_speed(uL, n, gamma)
    lamR, dlamR = _dwave_speed(uR, n, gamma)
    useL = lamL >= lamR
    lam = np.where(useL, lamL, lamR)
    jump = uR - uL
    eye = np.eye(4)
    dL = 0.5 * flux_jacobian(uL, n, gamma) + 0.5 * lam[..., None, None] * eye
    dR = 0.5 * flux_jacobian(uR, n, gamma) - 0.5 * lam[..., None, None] * eye
    outer_L = -0.5 * jump[..., :, None] * dlamL[..., None, :]
    outer_R = -0.5 * jump[..., :, None] * dlamR[..., None, :]
    dL = dL + np.where(useL[..., None, None], outer_L, 0.0)
    dR = dR + np.where(useL[..., None, None], 0.0, outer_R)
    return dL, dR


def fd_jacobians(flux, uL, uR, n, rel_step=1e-6):
    """Central finite-difference Jacobians of ``flux(uL, uR, n)``.

    The step for component k is ``rel_step * (1 + |u_k|)``.  A step that
    produces an inadmissible perturbed state is shrunk by 100x once.
    """
    uL = np.asarray(uL, dtype=float)
    uR = np.asarray(uR, dtype=float)
    n = np.asarray(n, dtype=float)
    shape = np.broadcast_shapes(uL.shape, uR.shape, n.shape[:-1] + (4,))
    uL = np.broadcast_to(uL, shape)
    uR = np.broadcast_to(uR, shape)
    jacs = []
    for side in (0, 1):
        J = np.empty(shape + (4,))
        base = uL if side == 0 else uR
        for k in range(4):
            h = rel_step * (1.0 + np.abs(base[..., k]))
            for attempt in range(2):
                up = base.copy()
                um = base.copy()
                up[..., k] += h
                um[..., k] -= h
                try:
                    if side == 0:
                        fp = flux(up, uR, n)
                        fm = flux(um, uR, n)
                    else:
                        fp = flux(uL, up, n)
                        fm = flux(uL, um, n)
                    break
                except InadmissibleStateError:
                    if attempt:
                        raise
                    h = h * 1e-2
            J[..., :, k] = (fp - fm) / (2.0 * h[..., None])
        jacs.append(J)
    return jacs[0], jacs[1]


def flux_jacobians(uL, uR, n, gamma=GAMMA, scheme="hllc"):
    """(dH/duL, dH/duR): analytic for LLF, finite differences for HLLC."""
    scheme = scheme.lower()
    if scheme == "llf":
        return llf_jacobians(uL, uR, n, gamma)
    if scheme == "hllc":
        return fd_jacobians(lambda a, b, nn: hllc_flux(a, b, nn, gamma), uL, uR, n)
    raise ValueError(f"unknown flux scheme {scheme!r}")


def mirror_state(u, n):
    """Reflect the velocity of ``u`` across the plane with normal ``n``."""
    u = np.array(u, dtype=float)
    n = np.asarray(n, dtype=float)
    mn = u[..., 1] * n[..., 0] + u[..., 2] * n[..., 1]
    u[..., 1] -= 2.0 * mn * n[..., 0]
    u[..., 2] -= 2.0 * mn * n[..., 1]
    return u


def wall_flux(u, n, gamma=GAMMA):
    """Slip-wall flux (0, p n_x, p n_y, 0) from the interior trace pressure."""
    u = np.asarray(u, dtype=float)
    n = np.asarray(n, dtype=float)
    p = pressure(u, gamma)
    shape = np.broadcast_shapes(u.shape, n.shape[:-1] + (4,))
    out = np.zeros(shape)
    out[..., 1] = p * n[..., 0]
    out[..., 2] = p * n[..., 1]
    return out


def wall_flux_jacobian(u, n, gamma=GAMMA):
    u = np.asarray(u, dtype=float)
    n = np.asarray(n, dtype=float)
    pressure(u, gamma)
    rho = u[..., 0]
    vx = u[..., 1] / rho
    vy = u[..., 2] / rho
    g1 = gamma - 1.0
    dp = np.stack([0.5 * g1 * (vx * vx + vy * vy), -g1 * vx, -g1 * vy, g1 + 0 * rho], axis=-1)
    shape = np.broadcast_shapes(u.shape, n.shape[:-1] + (4,))
    J = np.zeros(shape + (4,))
    J[..., 1, :] = n[..., 0, None] * dp
    J[..., 2, :] = n[..., 1, None] * dp
    return J


def pressure_gradient(u, gamma=GAMMA):
    """dp/du, shape ``(..., 4)``."""
    u = np.asarray(u, dtype=float)
    rho = u[..., 0]
    vx = u[..., 1] / rho
    vy = u[..., 2] / rho
    g1 = gamma - 1.0
    return np.stack([0.5 * g1 * (vx * vx + vy * vy), -g1 * vx, -g1 * vy, g1 + 0 * rho], axis=-1)


def freestream_state(cfg):
    c_inf = np.sqrt(cfg.gamma * cfg.p_inf / cfg.rho_inf)
    speed = cfg.mach * c_inf
    a = cfg.alpha_rad
    v = np.array([speed * np.cos(a), speed * np.sin(a)])
    E = total_energy(cfg.rho_inf, cfg.p_inf, v, cfg.gamma)
    return np.array([cfg.rho_inf, cfg.rho_inf * v[0], cfg.rho_inf * v[1], float(E)])


def farfield_flux(u, cfg, n, scheme="hllc"):
    """Ghost-state far field: numerical flux against the freestream state."""
    return numerical_flux(u, freestream_state(cfg), n, cfg.gamma, scheme)


def farfield_jacobian(u, cfg, n, scheme="hllc"):
    dL, _ = flux_jacobians(u, freestream_state(cfg), n, cfg.gamma, scheme)
    return dL
