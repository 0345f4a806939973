"""NACA 4-digit profiles parameterised by an angle around the section."""
import numpy as np

THICKNESS_COEFFS = (0.2969, -0.1260, -0.3516, 0.2843, -0.1015)


def thickness(x, t):
    """Half thickness y_t(x) of a symmetric 4-digit section of relative thickness t."""
    x = np.clip(np.asarray(x, dtype=float), 0.0, 1.0)
    a0, a1, a2, a3, a4 = THICKNESS_COEFFS
    return 5.0 * t * (a0 * np.sqrt(x) + a1 * x + a2 * x**2 + a3 * x**3 + a4 * x**4)


class NacaProfile:
    """A NACA 4-digit section with chord 1 and leading edge at the origin.

    Points are addressed by ``theta`` in [0, 2*pi): ``x = (1 + cos theta)/2``,
    upper surface for theta in (0, pi), lower surface for (pi, 2*pi).  The
    trailing edge (theta = 0) is closed onto the mean line.
    """

    def __init__(self, code):
        code = str(code).strip()
        if len(code) != 4 or not code.isdigit():
            raise ValueError(f"expected a 4-digit NACA code, got {code!r}")
        self.code = code
        self.m = int(code[0]) / 100.0
        self.p = int(code[1]) / 10.0
        self.t = int(code[2:]) / 100.0

    def camber(self, x):
        x = np.asarray(x, dtype=float)
        m, p = self.m, self.p
        if m == 0 or p == 0:
            return np.zeros_like(x), np.zeros_like(x)
        front = x < p
        yc = np.where(front, m / p**2 * (2 * p * x - x**2), m / (1 - p) ** 2 * ((1 - 2 * p) + 2 * p * x - x**2))
        dyc = np.where(front, 2 * m / p**2 * (p - x), 2 * m / (1 - p) ** 2 * (p - x))
        return yc, dyc

    def point(self, theta):
        theta = np.mod(np.asarray(theta, dtype=float), 2 * np.pi)
        x = 0.5 * (1.0 + np.cos(theta))
        sign = np.where(theta <= np.pi, 1.0, -1.0)
        yt = thickness(x, self.t)
        yt = np.where(np.isclose(theta, 0.0, atol=1e-14), 0.0, yt)
        yc, dyc = self.camber(x)
        phi = np.arctan(dyc)
        px = x - sign * yt * np.sin(phi)
        py = yc + sign * yt * np.cos(phi)
        return np.stack([px, py], axis=-1)

    def distance(self, pts, samples=20001):
        """Approximate distance from each point to the profile curve."""
        pts = np.atleast_2d(pts)
        th = np.linspace(0.0, 2 * np.pi, samples)
        curve = self.point(th)
        d = np.empty(len(pts))
        for i, q in enumerate(pts):
            d[i] = np.sqrt(np.min(np.sum((curve - q) ** 2, axis=1)))
        return d

    def perimeter(self, samples=4001):
        c = self.point(np.linspace(0.0, 2 * np.pi, samples))
        return float(np.sum(np.linalg.norm(np.diff(c, axis=0), axis=1)))
