from pathlib import Path

import numpy as np
import pytest
from pydantic import ValidationError

from app.errors import ConfigError
from app.schemas.run_schema import RunConfig, apply_overrides, load_run_config, read_ini, resolved_ini

CONFIG_DIR = Path(__file__).resolve().parents[1] / "configs"


def _write(tmp_path, text, name="run.ini"):
    path = tmp_path / name
    path.write_text(text, encoding="utf-8")
    return path


@pytest.mark.parametrize("path", sorted(CONFIG_DIR.glob("*.ini")), ids=lambda p: p.stem)
def test_shipped_configs_validate(path):
    cfg = load_run_config(path)
    assert cfg.wave_problem().d == cfg.problem.d


def test_defaults_without_a_file():
    cfg = load_run_config(None)
    assert cfg.problem.d == 1
    np.testing.assert_array_equal(cfg.points(), np.zeros((1, 1)))
    assert cfg.first_time(None) == 0.5


def test_points_and_times_are_parsed(tmp_path):
    path = _write(tmp_path, "[problem]\nd = 2\nT = 2\n\n[run]\nt = 0.5, 1.5\nx = 0.1, 0.2; -0.3, 0.4\n")
    cfg = load_run_config(path)
    assert cfg.run.t == [0.5, 1.5]
    np.testing.assert_array_equal(cfg.points(), [[0.1, 0.2], [-0.3, 0.4]])


def test_overrides_take_precedence(tmp_path):
    path = _write(tmp_path, "[run]\nseed = 1\nM = 10\n")
    cfg = load_run_config(path, ["run.seed=7", "problem.lambda=2.5"])
    assert cfg.run.seed == 7
    assert cfg.run.M == 10
    assert cfg.problem.rate == 2.5


@pytest.mark.parametrize("item", ["run.seed", "seed=3", "nowhere.key=1"])
def test_malformed_overrides(item):
    with pytest.raises(ConfigError):
        apply_overrides({}, [item])


def test_unknown_sections_and_missing_files(tmp_path):
    with pytest.raises(ConfigError):
        read_ini(_write(tmp_path, "[solver]\nfoo = 1\n"))
    with pytest.raises(ConfigError):
        read_ini(tmp_path / "absent.ini")


def test_keys_are_case_sensitive(tmp_path):
    raw = read_ini(_write(tmp_path, "[problem]\nT = 3\nF = cos\n"))
    assert raw["problem"] == {"T": "3", "F": "cos"}


@pytest.mark.parametrize(
    "text",
    [
        "[problem]\nd = 4\n",
        "[problem]\nT = 1\n[run]\nt = 1.5\n",
        "[problem]\nd = 2\n[run]\nx = 0.1\n",
        "[problem]\np = 1\nf1 = sqnorm\n",
        "[problem]\nf = tan\n",
        "[problem]\nf1 = cubic\n",
        "[distill]\neps_target = 0\n",
        "[run]\nt = -0.1\n",
        "[moments]\nconditioned_M = 1\n",
    ],
)
def test_invalid_configurations(tmp_path, text):
    with pytest.raises(ValidationError):
        load_run_config(_write(tmp_path, text))


def test_first_time_override_is_checked():
    cfg = load_run_config(None)
    assert cfg.first_time(0.25) == 0.25
    with pytest.raises(ConfigError):
        cfg.first_time(2.0)


def test_linear_problem_with_initial_position():
    cfg = load_run_config(None, ["problem.d=2", "problem.f1=sqnorm", "problem.F=cos", "problem.F_scale=0.5"])
    problem = cfg.wave_problem()
    assert problem.p == 0
    assert problem.F_sup == pytest.approx(0.5 + 4.0)
    value = problem.F_lin(0.0, np.array([[0.0, 0.0]]))
    assert value[0] == 0.5 + 4.0
    np.testing.assert_allclose(cfg.shift_values(np.array([[1.0, 2.0]])), [5.0])


def test_branching_problem_uses_coefficient_profile():
    cfg = load_run_config(None, ["problem.p=2", "problem.c=const", "problem.c_scale=0.1", "problem.f_scale=0.2"])
    problem = cfg.wave_problem()
    assert (problem.f_sup, problem.c_sup) == (0.2, 0.1)
    assert problem.c(0.3, np.zeros((2, 1))) == pytest.approx([0.1, 0.1])
    assert cfg.problem.source_profile().factor == "const"
    np.testing.assert_array_equal(cfg.shift_values(np.ones((3, 1))), np.zeros(3))


def test_resolved_ini_reloads_to_the_same_config(tmp_path):
    cfg = load_run_config(CONFIG_DIR / "perturbative_d1.ini", ["run.seed=11"])
    text = resolved_ini(cfg)
    assert "lambda = 1.0" in text
    again = load_run_config(_write(tmp_path, text, "resolved.ini"))
    assert again.model_dump() == cfg.model_dump()
    assert isinstance(again, RunConfig)
