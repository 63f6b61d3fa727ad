"""Command-line interface: ``cpaem <command> [options]``.

Exit codes: 0 success, 1 usage or input error, 2 numerical failure, 3 resource limit.
Every command writes its resolved configuration next to its main output as
``<output>.config.json`` (or ``cpaem-<command>.config.json`` when it only prints).
"""

from __future__ import annotations

import argparse
import csv
import logging
import math
import os
import sys
import time

import numpy as np
from scipy.special import erfc

from . import __version__
from .em import EmConfig, em_fit
from .errors import CpaemError, InputError
from .geometry import default_radius, enumerate_partition
from .inference import ExactPosterior
from .network import (
    NoiseModel,
    dumps_json,
    forward,
    load_model,
    parse_architecture,
    random_network,
    save_model,
)
from . import gaussian, oracle

log = logging.getLogger("cpaem")

COMMANDS = ("gen-net", "gen-data", "partition", "marginal", "posterior", "train-em", "oracle-check")


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        sys.stderr.write(f"{self.prog}: error: {message}\n")
        raise SystemExit(1)


# -- I/O helpers ----------------------------------------------------------------------

def _f(x) -> str:
    return format(float(x), ".17g")


def write_csv(path, rows, header=None) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        if header:
            w.writerow(header)
        for row in rows:
            w.writerow([v if isinstance(v, str) else (str(v) if isinstance(v, (int, np.integer)) else _f(v))
                        for v in row])


def read_csv(path, header: bool = False) -> np.ndarray:
    if not os.path.isfile(path):
        raise InputError(f"no such file: {path}")
    try:
        data = np.loadtxt(path, delimiter=",", ndmin=2, skiprows=1 if header else 0)
    except ValueError as exc:
        raise InputError(f"cannot parse {path}: {exc}") from exc
    if data.size == 0:
        raise InputError(f"{path} contains no rows")
    return data


def _parse_vector(text: str) -> np.ndarray:
    try:
        return np.array([float(t) for t in text.split(",")])
    except ValueError as exc:
        raise InputError(f"bad vector {text!r}") from exc


def _write_sidecar(args, out_path) -> None:
    cfg = {k: v for k, v in sorted(vars(args).items()) if k != "func"}
    cfg["version"] = __version__
    path = (out_path or f"cpaem-{args.command}") + ".config.json"
    with open(path, "w", newline="\n") as fh:
        fh.write(dumps_json(cfg, indent=1) + "\n")


def _load(args):
    if not os.path.isfile(args.model):
        raise InputError(f"no such model file: {args.model}")
    net, noise = load_model(args.model)
    if noise is None:
        noise = NoiseModel(0.1 * np.eye(net.output_dim), np.eye(net.latent_dim))
    return net, noise


def _radius(args, noise) -> float:
    return args.bounding_radius if args.bounding_radius is not None else default_radius(noise.sigma_z)


def tail_mass_bound(sigma_z, radius: float) -> float:
    """Union bound on the prior mass outside the box ``|z_i| <= radius``."""
    sd = np.sqrt(np.diag(np.atleast_2d(sigma_z)))
    return float(min(1.0, np.sum(erfc(radius / (math.sqrt(2.0) * sd)))))


def _report_tail(noise, radius) -> None:
    print(f"prior tail mass outside box (error bound on p(x)): {tail_mass_bound(noise.sigma_z, radius):.3e}")


def _threads(args) -> int:
    if args.threads is not None:
        return max(1, args.threads)
    env = os.environ.get("CPAEM_THREADS")
    if env:
        try:
            return max(1, int(env))
        except ValueError as exc:
            raise InputError(f"CPAEM_THREADS must be an integer, got {env!r}") from exc
    return os.cpu_count() or 1


# -- commands -------------------------------------------------------------------------

def cmd_gen_net(args) -> None:
    dims, act, eta = parse_architecture(args.arch)
    net = random_network(dims, act, eta, rng=args.seed)
    noise = NoiseModel(args.sigma_x * np.eye(dims[-1]), args.sigma_z * np.eye(dims[0]))
    save_model(args.out, net, noise)
    _write_sidecar(args, args.out)


def generate_data(kind: str, n: int, seed: int, noise: float = 0.05, amplitude: float = 1.0,
                  frequency: float = 1.0, x_range: float = math.pi, model=None) -> np.ndarray:
    """Toy datasets; the wave parameters are a reconstruction, not ground truth."""
    if n < 1:
        raise InputError("n must be at least 1")
    rng = np.random.Generator(np.random.Philox(seed))
    if kind == "circle":
        theta = rng.uniform(0.0, 2 * math.pi, n)
        x = np.column_stack([np.cos(theta), np.sin(theta)])
        return x + noise * rng.standard_normal((n, 2))
    if kind == "wave":
        x1 = rng.uniform(-x_range, x_range, n)
        x2 = amplitude * np.sin(frequency * x1) + noise * rng.standard_normal(n)
        return np.column_stack([x1, x2])
    if kind == "from-model":
        if model is None:
            raise InputError("from-model needs --model")
        net, nm = model
        z = rng.standard_normal((n, net.latent_dim)) @ nm.chol_z.T
        eps = rng.standard_normal((n, net.output_dim)) @ nm.chol_x.T
        return forward(net, z) + eps
    raise InputError(f"unknown dataset kind {kind!r}")


def cmd_gen_data(args) -> None:
    model = _load(args) if args.kind == "from-model" and args.model else None
    x = generate_data(args.kind, args.n, args.seed, args.noise, args.amplitude, args.frequency,
                      args.x_range, model)
    write_csv(args.out, x)
    _write_sidecar(args, args.out)


def cmd_partition(args) -> None:
    net, noise = _load(args)
    radius = _radius(args, noise)
    part = enumerate_partition(net, bounding_radius=radius, max_regions=args.max_regions)
    with open(args.out, "w", newline="\n") as fh:
        fh.write(dumps_json(part.to_json_obj(), indent=1) + "\n")
    print(f"{len(part)} regions")
    _report_tail(noise, radius)
    _write_sidecar(args, args.out)


def _posterior(args):
    net, noise = _load(args)
    radius = _radius(args, noise)
    part = enumerate_partition(net, bounding_radius=radius, max_regions=args.max_regions)
    return net, noise, radius, ExactPosterior(net, part, noise)


def cmd_marginal(args) -> None:
    net, noise, radius, post = _posterior(args)
    if args.data:
        xs = read_csv(args.data, args.header)
    elif args.grid:
        if net.output_dim > 2:
            raise InputError("--grid needs an output dimension of at most 2")
        lo, hi, m = args.grid_range[0], args.grid_range[1], args.grid
        axis = np.linspace(lo, hi, m)
        mesh = np.meshgrid(*([axis] * net.output_dim), indexing="ij")
        xs = np.column_stack([g.ravel() for g in mesh])
    else:
        raise InputError("marginal needs --data or --grid")
    logp = post.log_marginal(xs)
    header = [f"x{i + 1}" for i in range(xs.shape[1])] + ["log_p"] if args.grid else ["log_p"]
    rows = [list(x) + [v] for x, v in zip(xs, logp)] if args.grid else [[v] for v in logp]
    write_csv(args.out, rows, header)
    _report_tail(noise, radius)
    _write_sidecar(args, args.out)


def cmd_posterior(args) -> None:
    net, noise, radius, post = _posterior(args)
    x = _parse_vector(args.x)
    summ = post.posterior_moments(x)
    rows = []
    for code, w, m1 in zip(summ.codes, summ.weights, summ.e1):
        flat = "".join("+" if s > 0 else "-" for s in code.flat)
        cond_mean = m1 / w if w > 0 else np.full_like(m1, np.nan)
        rows.append([flat, w] + list(cond_mean))
    header = ["code", "weight"] + [f"mean_z{i + 1}" for i in range(net.latent_dim)]
    if args.out:
        write_csv(args.out, rows, header)
    else:
        print(",".join(header))
        for r in rows:
            print(",".join(v if isinstance(v, str) else _f(v) for v in r))
    print(f"log p(x) = {_f(summ.log_marginal)}")
    print("posterior mean = " + ",".join(_f(v) for v in summ.mean))
    if args.grid_out:
        if net.latent_dim > 2:
            raise InputError("--grid-out needs a latent dimension of at most 2")
        axis = np.linspace(-radius, radius, args.grid)
        mesh = np.meshgrid(*([axis] * net.latent_dim), indexing="ij")
        zs = np.column_stack([g.ravel() for g in mesh])
        dens = np.exp(post.posterior_logdensity(zs, x))
        write_csv(args.grid_out, [list(z) + [d] for z, d in zip(zs, dens)],
                  [f"z{i + 1}" for i in range(net.latent_dim)] + ["density"])
    _report_tail(noise, radius)
    _write_sidecar(args, args.out or args.grid_out)


def cmd_train_em(args) -> None:
    net, noise = _load(args)
    xs = read_csv(args.data, args.header)
    updates = tuple(u.strip() for u in args.update.split(",") if u.strip())
    bad = set(updates) - {"biases", "weights", "sigma_x", "sigma_z"}
    if bad:
        raise InputError(f"unknown update groups {sorted(bad)}")
    config = EmConfig(max_iters=args.iters, updates=updates, bounding_radius=args.bounding_radius,
                      sigma_x_form=args.sigma_x_form, safeguard=not args.no_safeguard,
                      max_regions=args.max_regions, nll_tolerance=args.tol)
    res = em_fit(xs, net, noise, config,
                 callback=lambda it, nll, r: log.info("iter %d nll %.12g regions %d", it, nll, r))
    save_model(args.out, res.net, res.noise)
    if args.trace:
        write_csv(args.trace, zip(range(len(res.nll_trace)), res.nll_trace, res.card_trace, res.wall_ms),
                  ["iteration", "nll", "card_omega", "wall_ms"])
    print(f"nll {_f(res.nll_trace[0])} -> {_f(res.nll_trace[-1])} in {len(res.nll_trace) - 1} iterations")
    _report_tail(res.noise, _radius(args, res.noise))
    _write_sidecar(args, args.out)


def _check_line(name, analytic, est, se) -> bool:
    analytic, est, se = (np.atleast_1d(np.asarray(v, dtype=float)).ravel() for v in (analytic, est, se))
    ok = bool(np.all(np.abs(analytic - est) <= 3 * se))
    for a, e, s in zip(analytic, est, se):
        print(f"{name}: analytic {_f(a)} oracle {_f(e)} stderr {_f(s)}")
    print(f"{name}: {'PASS' if ok else 'FAIL'} (3 sigma)")
    return ok


def cmd_oracle_check(args) -> int:
    net, noise, radius, post = _posterior(args)
    threads = _threads(args)
    ok = True
    if args.what in ("marginal", "posterior", "moments"):
        if not args.x:
            raise InputError(f"--what {args.what} needs --x")
        x = _parse_vector(args.x)
    if args.what == "marginal":
        est = oracle.mc_marginal(x, net, noise, args.n, args.seed, workers=threads)
        ok = _check_line("p(x)", math.exp(post.log_marginal(x[None, :])[0]), est.value, est.stderr)
    elif args.what in ("posterior", "moments"):
        summ = post.posterior_moments(x)
        shares, e1, e2 = oracle.is_posterior_moments(x, net, noise, args.n, args.seed,
                                                      partition=post.partition, workers=threads)
        ok = _check_line("E[z|x]", summ.mean, e1.value, e1.stderr)
        ok &= _check_line("E[zz^T|x]", summ.total_E2, e2.value, e2.stderr)
        if args.what == "posterior":
            ok &= _check_line("region weights", summ.weights, shares.value, shares.stderr)
    elif args.what == "mass":
        masses = [gaussian.region_moments_at(r, np.zeros(net.latent_dim), noise.sigma_z).e0
                  for r in post.partition.regions]
        est = oracle.mc_partition_masses(net, post.partition, noise.sigma_z, args.n, args.seed)
        ok = _check_line("region mass", masses, est.value, est.stderr)
    else:
        raise InputError(f"unknown --what {args.what!r}")
    _report_tail(noise, radius)
    _write_sidecar(args, None)
    return 0 if ok else 4


# -- parser ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="cpaem", description="Exact inference and EM for piecewise-affine generators.")
    p.add_argument("--version", action="version", version=__version__)
    common = _Parser(add_help=False)
    common.add_argument("--seed", type=int, default=0)
    common.add_argument("--threads", type=int, default=None)
    common.add_argument("--bounding-radius", type=float, default=None,
                        help="latent box half-width (default 8 prior standard deviations)")
    common.add_argument("--max-regions", type=int, default=10**6)
    common.add_argument("--verbose", "-v", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    q = sub.add_parser("gen-net", parents=[common], help="random network")
    q.add_argument("--arch", required=True, help='e.g. "1-8-2 relu" or "1-4-4-2 leaky_relu:0.2"')
    q.add_argument("--out", required=True)
    q.add_argument("--sigma-x", type=float, default=0.1, help="isotropic observation noise variance")
    q.add_argument("--sigma-z", type=float, default=1.0, help="isotropic prior variance")
    q.set_defaults(func=cmd_gen_net)

    q = sub.add_parser("gen-data", parents=[common], help="toy dataset")
    q.add_argument("kind", choices=("circle", "wave", "from-model"))
    q.add_argument("--n", type=int, default=100)
    q.add_argument("--noise", type=float, default=0.05, help="noise standard deviation")
    q.add_argument("--amplitude", type=float, default=1.0)
    q.add_argument("--frequency", type=float, default=1.0)
    q.add_argument("--x-range", type=float, default=math.pi)
    q.add_argument("--model")
    q.add_argument("--out", required=True)
    q.set_defaults(func=cmd_gen_data)

    q = sub.add_parser("partition", parents=[common], help="enumerate latent regions")
    q.add_argument("--model", required=True)
    q.add_argument("--out", required=True)
    q.set_defaults(func=cmd_partition)

    q = sub.add_parser("marginal", parents=[common], help="log p(x) per row or on a grid")
    q.add_argument("--model", required=True)
    q.add_argument("--data")
    q.add_argument("--header", action="store_true")
    q.add_argument("--grid", type=int, help="points per axis")
    q.add_argument("--grid-range", type=float, nargs=2, default=(-2.0, 2.0))
    q.add_argument("--out", required=True)
    q.set_defaults(func=cmd_marginal)

    q = sub.add_parser("posterior", parents=[common], help="posterior region weights and density")
    q.add_argument("--model", required=True)
    q.add_argument("--x", required=True, help='comma separated, e.g. "0.1,0.2"')
    q.add_argument("--out")
    q.add_argument("--grid-out")
    q.add_argument("--grid", type=int, default=201)
    q.set_defaults(func=cmd_posterior)

    q = sub.add_parser("train-em", parents=[common], help="fit by exact EM")
    q.add_argument("--model", required=True)
    q.add_argument("--data", required=True)
    q.add_argument("--header", action="store_true")
    q.add_argument("--out", required=True)
    q.add_argument("--trace")
    q.add_argument("--iters", type=int, default=50)
    q.add_argument("--tol", type=float, default=1e-6)
    q.add_argument("--update", default="biases,weights,sigma_x")
    q.add_argument("--sigma-x-form", choices=("isotropic", "diagonal", "full"), default="isotropic")
    q.add_argument("--no-safeguard", action="store_true")
    q.set_defaults(func=cmd_train_em)

    q = sub.add_parser("oracle-check", parents=[common], help="compare against brute-force oracles")
    q.add_argument("--model", required=True)
    q.add_argument("--x")
    q.add_argument("--what", choices=("marginal", "posterior", "mass", "moments"), required=True)
    q.add_argument("--n", type=int, default=10**6)
    q.set_defaults(func=cmd_oracle_check)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    t0 = time.perf_counter()
    try:
        code = args.func(args) or 0
    except CpaemError as exc:
        print(f"cpaem: error: {exc}", file=sys.stderr)
        return exc.exit_code
    except OSError as exc:
        print(f"cpaem: error: {exc}", file=sys.stderr)
        return 1
    log.info("%s finished in %.1f ms", args.command, (time.perf_counter() - t0) * 1e3)
    return code


if __name__ == "__main__":
    sys.exit(main())
