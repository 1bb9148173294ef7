import csv
import json
import os
import subprocess
import sys
import warnings

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from mixscglr import Hyperparams, extract_components, fit_fixed_scglr, make_model_data
from mixscglr import io
from mixscglr.cli import main
from mixscglr.exceptions import DataError
from mixscglr.tuning import SimDesign, simulate


@pytest.fixture(autouse=True)
def quiet():
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        yield


def write_csv(path, header, rows):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        w.writerows(rows)
    return str(path)


def read_csv(path):
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.reader(fh))
    return rows[0], rows[1:]


# -- configuration -------------------------------------------------------------


def test_config_round_trip():
    text = """
    # a comment
    command = cv
    responses = resp.csv
    x = X.csv
    groups = site
    families = y1:gaussian, y2:binomial:n2, y3:poisson
    K_set = 1-3,5
    s_set = 0.1, 0.5
    l_set = 1,4
    standardise = false
    tau = 0.25
    plane = 2,3
    """
    cfg = io.parse_config(text)
    assert cfg.command == "cv"
    assert cfg.families == [("y1", "gaussian", None), ("y2", "binomial", "n2"), ("y3", "poisson", None)]
    assert cfg.K_set == [1, 2, 3, 5]
    assert cfg.s_set == [0.1, 0.5]
    assert cfg.standardise is False
    again = io.parse_config(io.serialise_config(cfg))
    assert again == cfg
    assert io.serialise_config(again) == io.serialise_config(cfg)


def test_config_errors():
    with pytest.raises(DataError, match="cfg:2"):
        io.parse_config("K = 2\nbogus = 1\n", "cfg")
    with pytest.raises(DataError, match="cfg:1"):
        io.parse_config("K = two\n", "cfg")
    with pytest.raises(DataError, match="cfg:1"):
        io.parse_config("just words\n", "cfg")
    with pytest.raises(DataError, match="trials column"):
        io.parse_config("families = y:binomial\n").validate()
    with pytest.raises(DataError):
        io.parse_config("families = y:weibull\n").validate()


# -- ingestion -------------------------------------------------------------------


def toy_files(tmp_path, x_rows=((0.1,), (0.5,), (0.9,)), y=("1.0", "2.5", "0.3"), groups=("a", "b", "a")):
    resp = write_csv(tmp_path / "resp.csv", ["g", "y"], list(zip(groups, y)))
    x = write_csv(tmp_path / "X.csv", [f"x{j + 1}" for j in range(len(x_rows[0]))], x_rows)
    return io.RunConfig(responses=resp, x=x, groups="g", families=[("y", "gaussian", None)])


def test_ingest_small(tmp_path):
    data = io.ingest(toy_files(tmp_path))
    assert (data.n, data.q, data.p) == (3, 1, 1)
    np.testing.assert_array_equal(data.groups.group_of, [0, 1, 0])
    assert data.groups.n_groups == 2
    assert data.group_labels == ["a", "b"]
    np.testing.assert_allclose(data.X_raw[:, 0], [0.1, 0.5, 0.9])


def test_ingest_constant_column(tmp_path):
    cfg = toy_files(tmp_path, x_rows=((0.1, 2.0), (0.5, 2.0), (0.9, 2.0)))
    with pytest.raises(DataError, match="x2"):
        io.ingest(cfg)


def test_ingest_diagnostics(tmp_path):
    cfg = toy_files(tmp_path, y=("1.0", "oops", "0.3"))
    with pytest.raises(DataError, match=r"resp\.csv:3: non-numeric"):
        io.ingest(cfg)
    cfg = toy_files(tmp_path, y=("1.0", "", "0.3"))
    with pytest.raises(DataError, match=r"resp\.csv:3: missing"):
        io.ingest(cfg)
    cfg = toy_files(tmp_path, y=("1", "2", "0"))
    cfg.families = [("y", "bernoulli", None)]
    with pytest.raises(DataError, match="line 3"):
        io.ingest(cfg)
    cfg = toy_files(tmp_path)
    write_csv(tmp_path / "X.csv", ["x1"], [(0.1,), (0.2,)])
    with pytest.raises(DataError, match="data rows"):
        io.ingest(cfg)
    with open(tmp_path / "ragged.csv", "w") as fh:
        fh.write("a,b\n1,2\n3\n")
    with pytest.raises(DataError, match="ragged.csv:3"):
        io.read_table(tmp_path / "ragged.csv")


@given(st.lists(st.floats(allow_nan=False, allow_infinity=False, width=64), min_size=1, max_size=20))
def test_csv_round_trip(tmp_path_factory, values):
    path = tmp_path_factory.mktemp("csv") / "t.csv"
    io.write_table(path, ["v", "w"], [(v, -v) for v in values])
    back = io.read_table(path).numeric()
    np.testing.assert_array_equal(back[:, 0], values)
    np.testing.assert_array_equal(back[:, 1], [-v for v in values])


# -- plot data --------------------------------------------------------------------


def test_plot_variable_identical_to_component():
    rng = np.random.default_rng(2)
    Q = np.linalg.qr(np.column_stack([np.ones(40), rng.standard_normal((40, 2))]))[0][:, 1:]
    g = np.repeat(np.arange(4), 10)
    data = make_model_data(3.0 * Q[:, 0], "gaussian", Q, g)
    model = fit_fixed_scglr(data, Hyperparams(K=2, s=0.0, psi_gain_tol=-np.inf))
    plot = io.export_plot_data(model, (1, 2), 0.7)
    name, c1, c2, kept = plot["variables"][0]
    assert name == "x1" and kept
    assert c1 == pytest.approx(1.0, abs=1e-8)
    assert c2 == pytest.approx(0.0, abs=1e-5)
    plot = io.export_plot_data(model, (1, 2), 1.1)
    assert not any(v[3] for v in plot["variables"])
    with pytest.raises(DataError):
        io.export_plot_data(model, (1, 3))


def test_plot_bundle_clusters_on_predictor_axis():
    data, _ = simulate(SimDesign("gauss_bundles", tau=0.5, seed=0))
    model = extract_components(data, Hyperparams(K=2, s=0.5, l=4.0))
    plot = io.export_plot_data(model, (1, 2), 0.7)
    _, p1, p2 = plot["predictors"][0]
    assert np.hypot(p1, p2) > 0.8
    F = model.components
    bundle_mean = data.X[:, 15:25].mean(axis=1)
    cos = [abs(np.corrcoef(bundle_mean, F[:, h])[0, 1]) for h in range(2)]
    assert np.hypot(*cos) > 0.8
    axis = np.arctan2(p2, p1)
    for name, c1, c2, _ in plot["variables"][15:25]:
        gap = np.degrees(abs(np.angle(np.exp(1j * (np.arctan2(c2, c1) - axis)))))
        assert gap < 30, name


def test_inertia_definition():
    data, _ = simulate(SimDesign("gauss_bundles", tau=0.5, seed=1))
    model = extract_components(data, Hyperparams(K=3, s=0.5, l=2.0))
    assert model.inertia_pct.sum() <= 100.0
    F = model.components
    for h in range(3):
        cos2 = [np.corrcoef(data.X[:, j], F[:, h])[0, 1] ** 2 for j in range(data.p)]
        assert model.inertia_pct[h] == pytest.approx(100 * np.mean(cos2), rel=1e-10)


# -- commands ---------------------------------------------------------------------


@pytest.fixture
def simulated(tmp_path):
    out = tmp_path / "sim"
    assert main(["simulate", "--design", "gauss_bundles", "--tau", "0.5", "--seed", "7", "--out", str(out)]) == 0
    return out


def test_simulate_is_byte_identical(tmp_path, simulated):
    other = tmp_path / "sim2"
    assert main(["simulate", "--design", "gauss_bundles", "--tau", "0.5", "--seed", "7", "--out", str(other)]) == 0
    for name in ("responses.csv", "X.csv", "truths.json"):
        assert (simulated / name).read_bytes() == (other / name).read_bytes()
    assert io.read_config(simulated / "run.cfg").families == [("y1", "gaussian", None), ("y2", "gaussian", None)]


def test_fit_then_predict_round_trip(tmp_path, simulated):
    fit_out = tmp_path / "fit"
    assert main(["fit", "--config", str(simulated / "run.cfg"), "--K", "2", "--out", str(fit_out)]) == 0
    for name in ("model.json", "coefficients.csv", "variance_components.csv", "fitted.csv",
                 "plot_variables.csv", "plot_predictors.csv", "plot_inertia.csv"):
        assert (fit_out / name).exists(), name
    model = io.load_model(fit_out / "model.json")
    pred_out = tmp_path / "pred"
    assert main(["predict", "--config", str(simulated / "run.cfg"), "--model", str(fit_out / "model.json"),
                 "--out", str(pred_out)]) == 0
    pred = io.read_table(pred_out / "predictions.csv").numeric()
    fitted = io.read_table(fit_out / "fitted.csv").numeric()
    np.testing.assert_allclose(pred, fitted, atol=1e-12)
    np.testing.assert_allclose(pred, model.fitted_eta, atol=1e-10)
    # emitted CSVs parse back to the in-memory model
    header, rows = read_csv(fit_out / "coefficients.csv")
    slopes = [float(r[2]) for r in rows if r[0] == "y1" and r[1].startswith("x")]
    np.testing.assert_allclose(slopes, model.beta_raw[0], atol=1e-12)
    header, rows = read_csv(fit_out / "variance_components.csv")
    np.testing.assert_allclose([float(r[1]) for r in rows], model.sigma2, atol=1e-12)
    header, rows = read_csv(fit_out / "plot_inertia.csv")
    np.testing.assert_allclose([float(r[1]) for r in rows], model.inertia_pct, atol=1e-12)
    plot = io.export_plot_data(model, (1, 2), 0.7)
    header, rows = read_csv(fit_out / "plot_variables.csv")
    np.testing.assert_allclose([[float(r[1]), float(r[2])] for r in rows],
                               [[v[1], v[2]] for v in plot["variables"]], atol=1e-12)
    assert [r[3] for r in rows] == ["true" if v[3] else "false" for v in plot["variables"]]


def test_marginal_predict_and_export(tmp_path, simulated):
    fit_out = tmp_path / "fit"
    assert main(["fit", "--config", str(simulated / "run.cfg"), "--out", str(fit_out)]) == 0
    out = tmp_path / "marg"
    assert main(["predict", "--x", str(simulated / "X.csv"), "--model", str(fit_out / "model.json"),
                 "--mode", "marginal", "--out", str(out)]) == 0
    assert main(["export-plot", "--model", str(fit_out / "model.json"), "--cos-threshold", "1.1",
                 "--out", str(tmp_path / "plot")]) == 0
    header, rows = read_csv(tmp_path / "plot" / "plot_variables.csv")
    assert {r[3] for r in rows} == {"false"}


def test_cv_singleton_grid(tmp_path, simulated):
    out = tmp_path / "cv"
    argv = ["cv", "--config", str(simulated / "run.cfg"), "--K-set", "2", "--s-set", "0.5", "--l-set", "4",
            "--out", str(out)]
    assert main(argv) == 0
    summary = json.loads((out / "cv_summary.json").read_text())
    assert (summary["K"], summary["s"], summary["l"]) == (2, 0.5, 4.0)
    header, rows = read_csv(out / "cv_surface.csv")
    assert header[:4] == ["s", "l", "K", "E"]
    assert len(rows) == 1
    assert float(rows[0][3]) == summary["E"]


def test_print_config_applies_flags(capsys, simulated):
    capsys.readouterr()
    assert main(["fit", "--config", str(simulated / "run.cfg"), "--s", "0.9", "--print-config"]) == 0
    cfg = io.parse_config(capsys.readouterr().out)
    assert cfg.s == 0.9
    assert cfg.groups == "group"


def test_exit_codes(tmp_path, capsys):
    assert main(["fit", "--config", str(tmp_path / "missing.cfg")]) == 1
    assert main(["fit", "--K", "many"]) == 1
    assert main(["fit"]) == 1
    # duplicated covariate with the reduction disabled: singular metric
    rng = np.random.default_rng(0)
    x = rng.standard_normal(20)
    resp = write_csv(tmp_path / "r.csv", ["g", "y"], [(i % 4, v) for i, v in enumerate(rng.standard_normal(20))])
    xs = write_csv(tmp_path / "x.csv", ["a", "b"], [(v, v) for v in x])
    out = tmp_path / "numfail"
    code = main(["fit", "--responses", resp, "--x", xs, "--groups", "g", "--families", "y:gaussian",
                 "--reduce", "never", "--out", str(out)])
    assert code == 2
    assert not (out / "model.json").exists()
    assert "numerical failure" in capsys.readouterr().err


def test_console_script(tmp_path):
    proc = subprocess.run([sys.executable, "-m", "mixscglr.cli", "simulate", "--design", "latent_bundle",
                           "--N", "5", "--out", str(tmp_path / "o")], capture_output=True, text=True)
    assert proc.returncode == 0, proc.stderr
    assert os.path.exists(tmp_path / "o" / "responses.csv")
    header, rows = read_csv(tmp_path / "o" / "responses.csv")
    assert header == ["group", "y1", "y2", "y3", "trials_y3"]
    proc = subprocess.run([sys.executable, "-m", "mixscglr.cli", "fit", "--config", str(tmp_path / "o" / "run.cfg"),
                           "--out", str(tmp_path / "fit")], capture_output=True, text=True)
    assert proc.returncode == 0, proc.stderr
