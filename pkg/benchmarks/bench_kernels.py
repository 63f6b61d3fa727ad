"""Compare the compiled and numpy kernel backends.

    python benchmarks/bench_kernels.py [--repeat 5]

Times the bivariate upper-orthant probability, the per-region piece moments,
and a full E-step with each backend, and checks that both agree.
"""

from __future__ import annotations

import argparse
import os
import subprocess
import sys
import timeit

import numpy as np

from cpaem import _pykernels
from cpaem.geometry import enumerate_partition
from cpaem.network import random_network

try:
    from cpaem import _ckernels
except ImportError:
    _ckernels = None

E_STEP = """
import numpy as np
from cpaem.em import e_step
from cpaem.geometry import enumerate_partition
from cpaem.network import NoiseModel, random_network
net = random_network([{s}, 8, 8, 2], rng=1)
noise = NoiseModel(0.1 * np.eye(2), np.eye({s}))
part = enumerate_partition(net)
xs = np.random.default_rng(0).normal(size=(200, 2))
"""


def best(stmt, repeat: int, number: int = 1) -> float:
    return min(timeit.repeat(stmt, repeat=repeat, number=number)) / number


def e_step_seconds(s: int, pure: bool, repeat: int) -> float:
    env = dict(os.environ, CPAEM_PURE_PYTHON="1" if pure else "0")
    code = (
        "import timeit\n"
        f"setup = {E_STEP.format(s=s)!r}\n"
        f"print(min(timeit.repeat('e_step(xs, net, part, noise)', setup=setup, repeat={repeat}, number=1)))\n"
    )
    out = subprocess.run([sys.executable, "-c", code], env=env, capture_output=True, text=True, check=True)
    return float(out.stdout.strip())


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=5)
    args = ap.parse_args()
    if _ckernels is None:
        print("compiled extension not built; only the numpy backend is available")
        return
    g = np.random.default_rng(0)
    n = 200_000
    h, k, r = g.normal(size=n), g.normal(size=n), g.uniform(-0.99, 0.99, n)
    diff = np.max(np.abs(_ckernels.bvn_upper(h, k, r) - _pykernels.bvn_upper(h, k, r)))
    t_c = best(lambda: _ckernels.bvn_upper(h, k, r), args.repeat)
    t_p = best(lambda: _pykernels.bvn_upper(h, k, r), args.repeat)
    rows = [("bvn_upper", f"{n} points", t_c, t_p, diff)]

    for s in (1, 2):
        net = random_network([s, 8, 8, 2], rng=1)
        part = enumerate_partition(net)
        a = g.normal(size=(s, s))
        cov = a @ a.T + np.eye(s)
        mus = g.normal(size=(500, s))
        regions = list(part)

        def run(mod):
            return [mod.piece_moments(rg.facet_normals, rg.facet_offsets, mus, cov) for rg in regions]

        diff = max(float(np.max(np.abs(u - v))) for a1, b1 in zip(run(_ckernels), run(_pykernels))
                   for u, v in zip(a1, b1))
        t_c = best(lambda: run(_ckernels), args.repeat)
        t_p = best(lambda: run(_pykernels), args.repeat)
        rows.append((f"piece_moments S={s}", f"{len(regions)} regions x 500 means", t_c, t_p, diff))

    for s in (1, 2):
        t_c = e_step_seconds(s, False, args.repeat)
        t_p = e_step_seconds(s, True, args.repeat)
        rows.append((f"e_step S={s}", "200 points, 2 hidden layers of 8", t_c, t_p, float("nan")))

    print(f"{'kernel':<20} {'workload':<34} {'cython s':>10} {'numpy s':>10} {'speedup':>8} {'max diff':>9}")
    for name, load, tc, tp, d in rows:
        print(f"{name:<20} {load:<34} {tc:10.4f} {tp:10.4f} {tp / tc:8.1f} {d:9.1e}")


if __name__ == "__main__":
    main()
