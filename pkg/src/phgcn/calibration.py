"""Fit the lattice elevation scale against the exact O(N^2) aggregation.

The blur taps decay as ``exp(-|k| * kappa)`` per lattice step and points are
lifted with scale ``lam * c_D``. For a fixed ``kappa`` this module finds the
``c_D`` minimizing the squared error between lattice and exact normalized
global aggregation on synthetic clustered point sets, and records it in
``phgcn/data/lattice_calibration.json``.

Run ``python -m phgcn.calibration`` to regenerate the file.
"""

from __future__ import annotations

import argparse
import json
from importlib import resources
from pathlib import Path

import numpy as np
from scipy.optimize import minimize_scalar

from .attention import exact_global_numpy, lattice_global_numpy
from .permutohedral import BlurKernel

DEFAULT_KAPPA = 1.0


def clustered_instance(rng: np.random.Generator, n: int = 200, d: int = 4, channels: int = 8,
                       clusters: int = 5, std: float = 0.1, separation: float = 1.0,
                       box: float = 3.0):
    """Gaussian clusters with centers at least ``separation`` apart; i.i.d. normal features."""
    centers: list[np.ndarray] = []
    # wide enough that the spacing constraint is easy to meet in any dimension
    side = max(box, 2.0 * separation * clusters ** (1 / d))
    for _ in range(10_000):
        c = rng.uniform(0.0, side, size=d)
        if all(np.linalg.norm(c - o) >= separation for o in centers):
            centers.append(c)
            if len(centers) == clusters:
                break
    else:
        raise RuntimeError("could not place cluster centers; increase box")
    member = rng.integers(clusters, size=n)
    positions = np.asarray(centers)[member] + std * rng.normal(size=(n, d))
    features = rng.normal(size=(n, channels))
    return positions, features


def cosine_rows(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    return np.sum(a * b, axis=1) / (np.linalg.norm(a, axis=1) * np.linalg.norm(b, axis=1))


def calibrate_scale(d: int, *, kappa: float = DEFAULT_KAPPA, lam: float = 10.0,
                    instances: int = 10, seed: int = 0, bounds=(0.25, 16.0)) -> float:
    """Least-squares ``c_D`` for dimension ``d`` (bounded 1-D search over ``log c``)."""
    rng = np.random.default_rng(seed)
    data = []
    for _ in range(instances):
        p, f = clustered_instance(rng, d=d)
        data.append((p, f, exact_global_numpy(p, f, lam)))
    kernel = BlurKernel.exponential(kappa)

    def loss(log_c):
        scale = lam * np.exp(log_c)
        return np.mean([np.mean((lattice_global_numpy(p, f, lam, scale=scale, kernel=kernel) - e) ** 2)
                        for p, f, e in data])

    # coarse grid first: the objective is bumpy at very fine lattices
    grid = np.linspace(np.log(bounds[0]), np.log(bounds[1]), 25)
    best = grid[int(np.argmin([loss(g) for g in grid]))]
    step = grid[1] - grid[0]
    res = minimize_scalar(loss, bounds=(best - step, best + step), method="bounded",
                          options={"xatol": 1e-3})
    return float(np.exp(res.x))


def calibration_path() -> Path:
    return Path(str(resources.files("phgcn.data").joinpath("lattice_calibration.json")))


def write_calibration(dims, *, kappa: float = DEFAULT_KAPPA, path: Path | None = None,
                      seed: int = 0) -> dict:
    table = {str(d): round(calibrate_scale(d, kappa=kappa, seed=seed), 4) for d in dims}
    record = {
        "kappa": kappa,
        "scale_per_decay": table,
        "fit": {"lam": 10.0, "instances": 10, "n": 200, "clusters": 5, "std": 0.1,
                "separation": 1.0, "channels": 8, "seed": seed},
    }
    path = path or calibration_path()
    path.write_text(json.dumps(record, indent=2) + "\n")
    return record


def main(argv=None) -> None:
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--dims", type=int, nargs="+", default=list(range(1, 9)))
    parser.add_argument("--kappa", type=float, default=DEFAULT_KAPPA)
    parser.add_argument("--seed", type=int, default=0)
    args = parser.parse_args(argv)
    record = write_calibration(args.dims, kappa=args.kappa, seed=args.seed)
    print(json.dumps(record["scale_per_decay"], indent=2))


if __name__ == "__main__":
    main()
