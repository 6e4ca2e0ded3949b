"""How the polarimetric model turns surface orientation into Stokes parameters.

Sweeps the viewing angle on a dielectric and prints the Fresnel terms and the
resulting diffuse/specular degree and angle of polarization, then checks the
engine's closed-form composition against the Mueller-matrix oracle.

    python demos/stokes_walkthrough.py
"""
import numpy as np

from polgs.oracle import point_stokes
from polgs.stokes import ETA, aop, compose_stokes, dop, fresnel


def main():
    eta = ETA
    brewster = np.degrees(np.arctan(eta))
    print(f"eta = {eta}, Brewster angle = {brewster:.2f} deg")
    print(" theta   R+      R-      T+      T-     DoP_spec DoP_diff")
    for deg in (0, 15, 30, 45, brewster, 70, 85):
        th = np.radians(deg)
        f = fresnel(th, eta)
        n = np.array([np.sin(th), 0.0, np.cos(th)])
        v = np.array([0.0, 0.0, 1.0])
        spec = compose_stokes(np.zeros(3), np.ones(3), n, v, eta)[0]
        diff = compose_stokes(np.ones(3), np.zeros(3), n, v, eta)[0]
        print(f"{deg:6.2f}  {f.r_plus:.4f}  {f.r_minus:.4f}  {f.t_plus:.4f}  {f.t_minus:+.4f}  "
              f"{dop(spec):.4f}   {dop(diff):.4f}")

    # the two lobes polarize perpendicular to each other
    n = np.array([0.5, 0.5, 0.7071])
    n /= np.linalg.norm(n)
    v = np.array([0.0, 0.0, 1.0])
    a_s = np.degrees(aop(compose_stokes(np.zeros(3), np.ones(3), n, v, eta)[0]))
    a_d = np.degrees(aop(compose_stokes(np.ones(3), np.zeros(3), n, v, eta)[0]))
    print(f"\nnormal azimuth {np.degrees(np.arctan2(n[1], n[0])):.1f} deg: specular AoP {a_s:.1f}, diffuse AoP {a_d:.1f}")

    rng = np.random.default_rng(0)
    N = rng.normal(size=(1000, 3))
    N /= np.linalg.norm(N, axis=-1, keepdims=True)
    N[N[:, 2] < 0] *= -1
    Ld, Ls = rng.uniform(0, 1, (1000, 3)), rng.uniform(0, 1, (1000, 3))
    err = np.abs(point_stokes(Ld, Ls, N, v, eta) - compose_stokes(Ld, Ls, N, v, eta)).max()
    print(f"closed form vs Mueller oracle on 1000 random normals: max diff {err:.1e}")


if __name__ == "__main__":
    main()
