import zipfile

import numpy as np
import pytest

from dualgp import cli
from dualgp import mountaincar as mc
from dualgp.gp import NumericalError

SMALL_CONFIG = """\
# tiny run that cannot converge in one sweep
n_dyn = 16
n_value = 32
n_forces = 8
mcmc_steps = 20
max_iter = 1
quiver_n = 4
surface_n = 5
"""


@pytest.fixture(scope="module")
def train_dir(tmp_path_factory):
    out = tmp_path_factory.mktemp("train_ck")
    code = cli.main(["train", "--kernel", "ck", "--out", str(out)])
    return out, code


@pytest.fixture(scope="module")
def rollout_dir(train_dir, tmp_path_factory):
    out = tmp_path_factory.mktemp("rollout_ck")
    code = cli.main(["rollout", "--model", str(train_dir[0]), "--out", str(out)])
    return out, code


@pytest.fixture(scope="module")
def toy_dir(tmp_path_factory):
    out = tmp_path_factory.mktemp("toy")
    return out, cli.main(["toy", "--out", str(out)])


def write_small_config(tmp_path):
    path = tmp_path / "small.cfg"
    path.write_text(SMALL_CONFIG)
    return path


# --- toy dynamics ----------------------------------------------------------


@pytest.mark.parametrize("x, want", [(0.0, 0.0), (0.1, 0.065 / 0.99), (4.0, 2.6 / 0.6)])
def test_toy_dynamics_examples(x, want):
    assert cli.toy_dynamics(x, 0.65, 10) == pytest.approx(want, rel=1e-14)


def test_toy_dynamics_rounded_examples():
    assert cli.toy_dynamics(0.1) == pytest.approx(0.0656566, abs=1e-7)
    assert cli.toy_dynamics(4.0) == pytest.approx(4.333333, abs=1e-6)


def test_toy_dynamics_pole():
    with pytest.raises(ValueError):
        cli.toy_dynamics(10.0, 0.65, 10.0)
    with pytest.raises(ValueError):
        cli.toy_dynamics(np.array([1.0, 10.0]))


# --- configuration ---------------------------------------------------------


def test_parse_config_defaults_and_overrides():
    cfg = cli.parse_config("n_dyn = 64   # fewer\n\n# comment only\ndiscount=0.5\n", seed=7)
    assert cfg.n_dyn == 64 and cfg.discount == 0.5 and cfg.seed == 7
    assert cfg.n_value == cli.RunConfig().n_value
    assert cli.parse_config("max_iter = 3e1").max_iter == 30


def test_defaults():
    cfg = cli.RunConfig()
    assert (cfg.n_dyn, cfg.n_value, cfg.n_forces) == (128, 512, 128)
    assert (cfg.gravity, cfg.dt, cfg.substeps) == (9.81, 0.3, 30)
    assert cfg.env() == mc.EnvConfig()


@pytest.mark.parametrize(
    "text",
    [
        "n_dyn 64",
        "bogus = 1",
        "n_dyn = 2.5",
        "tol = fast",
        "discount = 1.5",
        "n_forces = 1",
        "tol = 0",
        "toy_a = 2",
        "grid_low = 0",
    ],
)
def test_parse_config_errors(text):
    with pytest.raises(cli.ConfigError):
        cli.parse_config(text)


def test_bad_config_exits_2(tmp_path, capsys):
    cfg = tmp_path / "bad.cfg"
    cfg.write_text("n_value = many\n")
    assert cli.main(["toy", "--config", str(cfg), "--out", str(tmp_path / "o")]) == cli.EXIT_USAGE
    assert "n_value" in capsys.readouterr().err


def test_missing_config_exits_2(tmp_path):
    assert cli.main(["toy", "--config", str(tmp_path / "nope.cfg"), "--out", str(tmp_path)]) == cli.EXIT_USAGE


def test_bad_kernel_exits_2(tmp_path):
    with pytest.raises(SystemExit) as info:
        cli.main(["train", "--kernel", "matern", "--out", str(tmp_path)])
    assert info.value.code == cli.EXIT_USAGE


def test_bad_horizon_exits_2(tmp_path):
    assert cli.main(["rollout", "--out", str(tmp_path), "--horizon", "0"]) == cli.EXIT_USAGE


# --- error exits -----------------------------------------------------------


def test_unwritable_output_exits_5(tmp_path, capsys):
    blocker = tmp_path / "file"
    blocker.write_text("x")
    assert cli.main(["toy", "--out", str(blocker / "sub")]) == cli.EXIT_IO
    assert str(blocker / "sub") in capsys.readouterr().err


def test_missing_model_exits_5(tmp_path, capsys):
    assert cli.main(["rollout", "--model", str(tmp_path), "--out", str(tmp_path / "r")]) == cli.EXIT_IO
    assert cli.MODEL_FILE in capsys.readouterr().err


def test_corrupt_model_exits_5(tmp_path, capsys):
    (tmp_path / cli.MODEL_FILE).write_bytes(b"not a zip archive")
    assert cli.main(["rollout", "--model", str(tmp_path), "--out", str(tmp_path / "r")]) == cli.EXIT_IO
    assert cli.MODEL_FILE in capsys.readouterr().err


def test_model_missing_member_exits_5(train_dir, tmp_path, capsys):
    src = train_dir[0] / cli.MODEL_FILE
    with zipfile.ZipFile(src) as zin, zipfile.ZipFile(tmp_path / cli.MODEL_FILE, "w") as zout:
        for item in zin.infolist():
            if not item.filename.startswith("value_targets"):
                zout.writestr(item, zin.read(item))
    assert cli.main(["rollout", "--model", str(tmp_path), "--out", str(tmp_path / "r")]) == cli.EXIT_IO
    assert "corrupt" in capsys.readouterr().err


def test_numerical_failure_exits_3(tmp_path, monkeypatch):
    def boom(cfg, out):
        raise NumericalError("forced", jitter=1.0)

    monkeypatch.setattr(cli, "cmd_toy", boom)
    assert cli.main(["toy", "--out", str(tmp_path)]) == cli.EXIT_NUMERICAL


def test_non_convergence_exits_4_with_artifacts(tmp_path):
    out = tmp_path / "run"
    assert cli.main(["train", "--kernel", "rbf", "--config", str(write_small_config(tmp_path)), "--out", str(out)]) == 4
    _, diag = cli.read_csv(out / "diagnostics.csv")
    assert diag.shape == (1, 5) and diag[0, 4] == 0
    for name in ("quiver.csv", "policy.csv", "value_iter_000.csv", "value_iter_001.csv", cli.MODEL_FILE):
        assert (out / name).is_file()
    assert "converged = 0" in (out / cli.MANIFEST).read_text()
    assert cli.main(["verify-manifest", "--out", str(out)]) == cli.EXIT_OK


# --- manifests and CSVs ----------------------------------------------------


@pytest.mark.parametrize("which", ["toy_dir", "train_dir", "rollout_dir"])
def test_manifest_lists_every_file(which, request):
    out, code = request.getfixturevalue(which)
    assert code == cli.EXIT_OK
    listed = cli.read_manifest(out)
    on_disk = {p.name for p in out.iterdir()} - {cli.MANIFEST}
    assert set(listed) == on_disk
    assert cli.verify_manifest(out) == []
    text = (out / cli.MANIFEST).read_text()
    assert text.startswith(f"# dualgp {cli.__version__}")
    assert "[config]" in text and "seed = 0" in text


def test_tampered_manifest_exits_5(toy_dir, tmp_path, capsys):
    out = tmp_path / "copy"
    out.mkdir()
    for p in toy_dir[0].iterdir():
        (out / p.name).write_bytes(p.read_bytes())
    with open(out / "toy_rbf.csv", "a") as fh:
        fh.write("0,0,0,0,0\n")
    (out / "toy_ck.csv").unlink()
    assert cli.main(["verify-manifest", "--out", str(out)]) == cli.EXIT_IO
    err = capsys.readouterr().err
    assert "toy_rbf.csv: checksum mismatch" in err and "toy_ck.csv: missing" in err


def test_verify_without_manifest_exits_5(tmp_path):
    assert cli.main(["verify-manifest", "--out", str(tmp_path)]) == cli.EXIT_IO


def test_csv_format(tmp_path):
    cli.write_csv(tmp_path / "a.csv", ["u", "v"], [(1 / 3, 2.0), (1e-12, -123456789012.0)])
    assert (tmp_path / "a.csv").read_text() == "u,v\n0.333333333,2\n1e-12,-1.23456789e+11\n"


def test_toy_csv_schemas(toy_dir):
    out, _ = toy_dir
    assert cli.read_csv(out / "toy_truth.csv")[0] == ["x_query", "f_true"]
    assert cli.read_csv(out / "toy_observations.csv")[1].shape == (11, 2)
    for variant in ("rbf", "ck", "ntk"):
        header, data = cli.read_csv(out / f"toy_{variant}.csv")
        assert header == ["x_query", "post_mean", "post_var", "ci_lo", "ci_hi"]
        assert data.shape == (100, 5)
        assert data[0, 0] == pytest.approx(0.2) and data[-1, 0] == pytest.approx(9.0)
        np.testing.assert_allclose(data[:, 4] - data[:, 3], 2 * 1.96 * np.sqrt(data[:, 2]), rtol=1e-6, atol=1e-8)
    for line in (out / "toy_rbf.csv").read_text().splitlines()[1:]:
        assert all(v == "%.9g" % float(v) for v in line.split(","))


# --- train artifacts -------------------------------------------------------


def test_train_schemas(train_dir):
    out, _ = train_dir
    header, quiver = cli.read_csv(out / "quiver.csv")
    assert header == ["x", "xdot", "true_next_x", "true_next_xdot", "pred_next_x", "pred_next_xdot"]
    assert quiver.shape == (400, 6)
    header, surface = cli.read_csv(out / "value_iter_000.csv")
    assert header == ["x", "xdot", "value"] and surface.shape == (2500, 3)
    header, policy = cli.read_csv(out / "policy.csv")
    assert header == ["x", "xdot", "force"] and policy.shape == (512, 3)
    assert cli.read_csv(out / "diagnostics.csv")[0] == ["iteration", "max_delta", "mean_delta", "threshold", "converged"]


def test_iteration_zero_surface_is_reward(train_dir):
    _, surface = cli.read_csv(train_dir[0] / "value_iter_000.csv")
    assert np.max(np.abs(surface[:, 2] - mc.reward(surface[:, :2]))) <= 0.5


def final_surface(out):
    last = sorted(out.glob("value_iter_*.csv"))[-1]
    return cli.read_csv(last)[1]


@pytest.mark.xfail(
    strict=True,
    reason="with a discount of 0.8 the true value near (0.1, 0) is a sizeable fraction of the peak: "
    "from there the car reaches the goal within a few steps",
)
def test_central_region_value_near_zero(train_dir):
    surface = final_surface(train_dir[0])
    near = np.hypot(surface[:, 0] - 0.1, surface[:, 1]) <= 0.1
    assert np.all(np.abs(surface[near, 2]) < 1e-2 * surface[:, 2].max())


def test_diagnostics_final_below_threshold(train_dir):
    out, code = train_dir
    assert code == cli.EXIT_OK
    _, diag = cli.read_csv(out / "diagnostics.csv")
    assert np.all(np.isfinite(diag[:, 1]))
    assert diag[-1, 1] < diag[-1, 3] and diag[-1, 4] == 1
    assert np.all(diag[:-1, 4] == 0)
    assert len(list(out.glob("value_iter_*.csv"))) == diag.shape[0] + 1


def test_model_round_trip(train_dir, tmp_path):
    out, _ = train_dir
    dyn, val, env = cli.load_model(out / cli.MODEL_FILE)
    assert env == mc.EnvConfig()
    cli.save_model(tmp_path / cli.MODEL_FILE, dyn, val, env)
    assert (tmp_path / cli.MODEL_FILE).read_bytes() == (out / cli.MODEL_FILE).read_bytes()
    probe = mc.sample_states(20, seed=3)
    again = cli.load_model(tmp_path / cli.MODEL_FILE)
    np.testing.assert_array_equal(again[1].predict(probe), val.predict(probe))
    np.testing.assert_array_equal(again[0].predict(probe), dyn.predict(probe))


# --- rollout artifacts -----------------------------------------------------


def test_rollout_examples(rollout_dir, default_cfg):
    out, code = rollout_dir
    assert code == cli.EXIT_OK
    header, traj = cli.read_csv(out / "trajectory.csv")
    assert header == ["t", "x", "xdot", "force", "reward"]
    assert traj.shape[0] == default_cfg.horizon + 1
    assert traj[0, 1] == -0.5 and traj[0, 2] == 0.0
    assert traj[:, 1].min() < -0.5


def test_rollout_horizon_flag(train_dir, tmp_path):
    out = tmp_path / "short"
    assert cli.main(["rollout", "--model", str(train_dir[0]), "--out", str(out), "--horizon", "7"]) == 0
    assert cli.read_csv(out / "trajectory.csv")[1].shape == (8, 5)
    assert "horizon = 7" in (out / cli.MANIFEST).read_text()


def test_rollout_records_model_checksum(train_dir, rollout_dir):
    text = (rollout_dir[0] / cli.MANIFEST).read_text()
    assert f"model_sha256 = {cli.sha256(train_dir[0] / cli.MODEL_FILE)}" in text


def test_state_grid_order():
    g = cli.state_grid(3)
    np.testing.assert_array_equal(g[:3, 0], -1.0)
    np.testing.assert_array_equal(g[:3, 1], [-2, 0, 2])
    assert np.all(g[:, 2] == 0)
