import csv
import json
import math

import numpy as np
import pytest

from cpaem.cli import generate_data, main
from cpaem.network import NoiseModel, linear_network, load_model, save_model
from cpaem.oracle import mc_marginal

from conftest import knot_net


def run(*args):
    return main([str(a) for a in args])


def test_gen_net_deterministic(tmp_path):
    a, b = tmp_path / "a.json", tmp_path / "b.json"
    assert run("gen-net", "--arch", "1-8-2 relu", "--seed", 7, "--out", a) == 0
    assert run("gen-net", "--arch", "1-8-2 relu", "--seed", 7, "--out", b) == 0
    assert a.read_bytes() == b.read_bytes()
    net, noise = load_model(a)
    assert net.hidden_widths == (8,) and noise is not None
    assert json.loads((tmp_path / "a.json.config.json").read_text())["seed"] == 7
    assert run("gen-net", "--arch", "1-4-4-2 leaky_relu:0.2", "--out", tmp_path / "c.json") == 0
    assert load_model(tmp_path / "c.json")[0].depth == 3


def test_gen_net_rejects_bad_arch(tmp_path, capsys):
    assert run("gen-net", "--arch", "1-x-2", "--out", tmp_path / "a.json") == 1
    with pytest.raises(SystemExit) as exc:
        run("gen-net", "--bogus")
    assert exc.value.code == 1


def test_gen_data(tmp_path):
    out = tmp_path / "circle.csv"
    assert run("gen-data", "circle", "--n", 100, "--seed", 3, "--out", out) == 0
    x = np.loadtxt(out, delimiter=",")
    assert x.shape == (100, 2)
    r = np.linalg.norm(x, axis=1)
    assert np.all((r > 0.8) & (r < 1.2))
    assert b"\r" not in out.read_bytes()
    assert run("gen-data", "circle", "--n", 0, "--out", out) == 1


def test_from_model_covariance():
    a = np.array([[1.0], [0.5]])
    net = linear_network(a, [0.0, 1.0])
    noise = NoiseModel(np.diag([0.2, 0.1]), np.eye(1))
    x = generate_data("from-model", 100_000, 1, model=(net, noise))
    target = noise.sigma_x + a @ a.T
    assert np.max(np.abs(np.cov(x.T) - target) / np.abs(target)) < 0.05


def test_wave_shape():
    x = generate_data("wave", 500, 2, noise=0.0, amplitude=0.7, frequency=2.0)
    assert np.allclose(x[:, 1], 0.7 * np.sin(2.0 * x[:, 0]))


def test_partition_knot(tmp_path, capsys):
    model, out = tmp_path / "m.json", tmp_path / "p.json"
    save_model(model, knot_net(), NoiseModel([[0.1]], [[1.0]]))
    assert run("partition", "--model", model, "--out", out) == 0
    doc = json.loads(out.read_text())
    assert len(doc) == 2 and all(r["clipped"] for r in doc)
    assert "tail mass" in capsys.readouterr().out
    assert run("partition", "--model", model, "--out", out, "--max-regions", 1) == 3


def test_marginal_grid_matches_oracle(tmp_path):
    model = tmp_path / "m.json"
    assert run("gen-net", "--arch", "1-6-2 relu", "--seed", 2, "--out", model) == 0
    out = tmp_path / "grid.csv"
    assert run("marginal", "--model", model, "--grid", 5, "--grid-range", -1, 1, "--out", out) == 0
    rows = list(csv.reader(out.open()))
    assert rows[0] == ["x1", "x2", "log_p"] and len(rows) == 26
    net, noise = load_model(model)
    for row in rows[1:4]:
        x = np.array([float(row[0]), float(row[1])])
        est = mc_marginal(x, net, noise, n=200_000, seed=1)
        assert abs(math.exp(float(row[2])) - est.value) < 3 * est.stderr


def test_marginal_needs_input(tmp_path):
    model = tmp_path / "m.json"
    run("gen-net", "--arch", "1-3-2", "--out", model)
    assert run("marginal", "--model", model, "--out", tmp_path / "o.csv") == 1
    assert run("marginal", "--model", model, "--data", tmp_path / "missing.csv", "--out", tmp_path / "o.csv") == 1


def test_posterior_outputs(tmp_path, capsys):
    model = tmp_path / "m.json"
    run("gen-net", "--arch", "1-4-2 relu", "--seed", 1, "--out", model)
    out, grid = tmp_path / "post.csv", tmp_path / "z.csv"
    assert run("posterior", "--model", model, "--x", "0.2,0.3", "--out", out, "--grid-out", grid,
               "--grid", 4001) == 0
    rows = list(csv.reader(out.open()))
    assert abs(sum(float(r[1]) for r in rows[1:]) - 1) < 1e-10
    z = np.loadtxt(grid, delimiter=",", skiprows=1)
    h = z[1, 0] - z[0, 0]
    assert abs(np.sum(z[:, 1]) * h - 1) < 1e-3
    assert run("posterior", "--model", model, "--x", "0.2,zz", "--out", out) == 1


def test_train_em_trace(tmp_path, capsys):
    model, data = tmp_path / "m.json", tmp_path / "d.csv"
    run("gen-net", "--arch", "1-8-2 relu", "--seed", 7, "--out", model)
    run("gen-data", "circle", "--n", 60, "--seed", 3, "--out", data)
    trace = tmp_path / "nll.csv"
    assert run("train-em", "--model", model, "--data", data, "--out", tmp_path / "t.json",
               "--trace", trace, "--iters", 5) == 0
    rows = list(csv.reader(trace.open()))
    assert rows[0] == ["iteration", "nll", "card_omega", "wall_ms"]
    nll = [float(r[1]) for r in rows[1:]]
    assert all(b <= a + 1e-8 for a, b in zip(nll, nll[1:]))
    assert run("train-em", "--model", model, "--data", data, "--out", tmp_path / "t.json",
               "--update", "nonsense") == 1


def test_oracle_check(tmp_path, capsys):
    model = tmp_path / "m.json"
    run("gen-net", "--arch", "1-4-2 relu", "--seed", 1, "--out", model)
    code = run("oracle-check", "--model", model, "--x", "0.2,0.3", "--what", "marginal", "--n", 200000,
               "--seed", 7, "--threads", 2)
    out = capsys.readouterr().out
    assert code == 0 and "PASS" in out and "analytic" in out
    assert run("oracle-check", "--model", model, "--what", "marginal") == 1
