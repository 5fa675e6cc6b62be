import math

import numpy as np
import pytest

from gaugeflow import cli, domain, fixtures


def write_connection(path, A, grid):
    domain.write_gfdump(path, np.moveaxis(A, 0, 2), grid, r=A.shape[-1])
    return str(path)


def read_summary(out):
    pairs = (line.split("=", 1) for line in (out / "summary.txt").read_text().splitlines())
    return dict(pairs)


def test_defaults_are_filled_in():
    cfg = cli.parse_config("subcommand=flow\n")
    assert cfg.flow.dt_factor == 0.5
    assert cfg.flow.eps0 == pytest.approx(4 * math.pi)
    assert cfg.flow.sigma == pytest.approx(2 * math.pi)
    assert cfg.flow.residual_tol == 1e-8
    assert (cfg.topology, cfg.n, cfg.fixture) == ("Square", 65, "abelian-c05")


def test_sigma_must_stay_below_eps0():
    with pytest.raises(cli.ConfigError, match="sigma must be < eps0"):
        cli.parse_config("subcommand=generalized\nsigma=13.0\n")


@pytest.mark.parametrize(
    "text,where",
    [
        ("subcommand=flow\n# comment\nfoo=1\n", "line 3: unknown key 'foo'"),
        ("subcommand=flow\nn=many\n", "line 2: n expects int"),
        ("subcommand=flow\njust words\n", "line 2: expected key=value"),
        ("n=33\n", "line 0: missing required key"),
        ("subcommand=flow\ntopology=Sphere\n", "line 2: topology"),
        ("subcommand=flow\nsource=random\n", "line 2: source=random needs a seed"),
    ],
)
def test_config_errors_name_their_line(text, where):
    with pytest.raises(cli.ConfigError) as info:
        cli.parse_config(text)
    assert str(info.value).startswith(where)


def test_override_wins_and_is_named_in_errors():
    cfg = cli.parse_config("subcommand=flow\nn=33\n", [("n", "17")])
    assert cfg.n == 17
    with pytest.raises(cli.ConfigError, match="--dt_factor"):
        cli.parse_config("subcommand=flow\n", [("dt_factor", "2.0")])


def test_bubble_fixture_carries_its_scale():
    cfg = cli.parse_config("subcommand=blowup\nfixture=planted-bubble(0.0625)\n")
    assert cfg.fixture == "planted-bubble" and cfg.lam == 0.0625


@pytest.mark.parametrize(
    "text",
    ["subcommand=flow\n", "subcommand=scan\ntopology=Torus\nn=64\nscan_radius=0.1\nsigma=1.5\nseed=4\n"],
)
def test_config_echo_round_trips(text):
    cfg = cli.parse_config(text)
    again = cli.parse_config(cfg.echo())
    assert again == cfg
    assert again.echo() == cfg.echo()


def test_flow_from_a_critical_point_converges_at_once(tmp_path):
    grid = domain.make_grid("Torus", 16)
    path = write_connection(tmp_path / "zero.gfdump", fixtures.zero_form(grid, 2), grid)
    status = cli.main(["flow", "-o", str(tmp_path / "out"), "topology=Torus", "n=16", "source=file", f"path={path}"])
    assert status == cli.EXIT_OK
    summary = read_summary(tmp_path / "out")
    assert summary["status"] == "Converged"
    assert int(summary["steps"]) <= 2


def test_runs_are_bit_identical(tmp_path):
    args = ["flow", "n=17", "fixture=random-so3-small", "seed=3", "t_max=0.01", "snapshot_every=20", "record_every=5"]
    for name in ("a", "b"):
        assert cli.main(args + ["-o", str(tmp_path / name)]) == cli.EXIT_OK

    def outputs(d):
        return sorted(p.name for p in d.iterdir() if p.suffix in (".csv", ".gfdump"))

    files = outputs(tmp_path / "a")
    assert any(f.startswith("snapshot_") for f in files) and "energy.csv" in files
    assert files == outputs(tmp_path / "b")
    for f in files:
        assert (tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes(), f


def test_config_echo_is_written(tmp_path):
    out = tmp_path / "out"
    cli.main(["flow", "-o", str(out), "n=9", "max_steps=3"])
    echoed = cli.parse_config((out / "config.echo").read_text())
    assert echoed.n == 9 and echoed.flow.max_steps == 3 and echoed.output == str(out)


def test_output_directory_from_environment(tmp_path, monkeypatch):
    monkeypatch.setenv("GAUGEFLOW_OUT", str(tmp_path / "env"))
    assert cli.main(["flow", "-o", str(tmp_path / "flag"), "n=9", "max_steps=2"]) == cli.EXIT_OK
    assert (tmp_path / "env" / "summary.txt").exists()
    assert not (tmp_path / "flag").exists()


def test_config_file_and_flag_override(tmp_path):
    conf = tmp_path / "run.cfg"
    conf.write_text("subcommand=flow\nn=33\nmax_steps=2\n")
    out = tmp_path / "out"
    assert cli.main(["-c", str(conf), "--n", "9", "-o", str(out)]) == cli.EXIT_OK
    assert cli.parse_config((out / "config.echo").read_text()).n == 9


def test_exit_code_for_bad_configuration(tmp_path, capsys):
    assert cli.main(["flow", "-o", str(tmp_path), "foo=1"]) == cli.EXIT_CONFIG
    assert "unknown key 'foo'" in capsys.readouterr().err
    assert cli.main(["flow", "stray", "-o", str(tmp_path)]) == cli.EXIT_CONFIG
    assert cli.main(["-o", str(tmp_path), "n=9"]) == cli.EXIT_CONFIG
    assert cli.main(["coulomb", "-o", str(tmp_path), "topology=Torus", "n=16"]) == cli.EXIT_CONFIG


def test_exit_code_for_non_finite_input(tmp_path):
    grid = domain.make_grid("Square", 9)
    path = write_connection(tmp_path / "nan.gfdump", np.full((2, 9, 9, 2, 2), np.nan), grid)
    assert cli.main(["flow", "-o", str(tmp_path / "o"), "n=9", "source=file", f"path={path}"]) == cli.EXIT_CONFIG


def test_exit_code_for_numerical_failure(tmp_path):
    grid = domain.make_grid("Square", 9)
    A = fixtures.smooth_form(grid, 2, np.random.default_rng(0), 500.0, 3)
    path = write_connection(tmp_path / "huge.gfdump", A, grid)
    out = tmp_path / "o"
    assert cli.main(["flow", "-o", str(out), "n=9", "source=file", f"path={path}", "max_steps=50"]) == cli.EXIT_NUMERIC
    assert read_summary(out)["failure"].startswith("numerical failure")


def test_exit_code_for_failed_check(tmp_path):
    out = tmp_path / "o"
    assert cli.main(["coulomb", "-o", str(out), "n=17", "max_steps=5"]) == cli.EXIT_CHECK
    assert read_summary(out)["failure"] == "check failed: flow converged"


def test_selftest_passes(tmp_path):
    assert cli.main(["selftest", "-o", str(tmp_path)]) == cli.EXIT_OK
    rows = (tmp_path / "selftest.csv").read_text().splitlines()
    assert rows[0] == "check,value" and len(rows) == 5


def test_abelian_coulomb_run_recovers_the_angle(tmp_path):
    out = tmp_path / "o"
    assert cli.main(["coulomb", "-o", str(out), "n=33", "scheme=semi-implicit"]) == cli.EXIT_OK
    summary = read_summary(out)
    assert float(summary["theta_error"]) <= 5 * (1 / 32) ** 2
    assert float(summary["ratio"]) == pytest.approx(1.0, rel=0.05)
    assert summary["bound_holds"] == "1"


# The converged field is the exact discrete critical point (theta error near
# round-off), but the codifferential of its pullback is taken with one-sided
# stencils at the edges, whose O(h^2) error leaves a residual of order h^1.5.
@pytest.mark.xfail(strict=True, reason="boundary stencils bound |d* Omega~|_2 below by about 3e-4 at n=65")
def test_abelian_coulomb_run_reaches_a_tiny_codifferential(tmp_path):
    out = tmp_path / "o"
    assert cli.main(["coulomb", "-o", str(out), "scheme=semi-implicit"]) == cli.EXIT_OK
    assert float(read_summary(out)["residual_coulomb"]) <= 1e-6
