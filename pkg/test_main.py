import json

import numpy as np
import pytest

from . import main as cli
from .clothsim import make_grid_cloth
from .datasets import ClothSpec
from .geometry import load_obj, save_obj
from .main import EXIT_CONFIG, EXIT_FAILURE, EXIT_NUMERICAL, EXIT_OK, main
from .persistence import read_json, read_tensor, save_checkpoint, write_tensor


SMALL_DATA = {
	"n_records": 1,
	"cloth": {"rows": 4, "cols": 4, "size": 0.3},
	"length": [3, 3],
	"settle_tail": 1,
}

SMALL_TASK = {
	"cloth": {"rows": 4, "cols": 4, "size": 0.3},
	"fold": "half",
	"planner": {"n_iterations": 1, "n_samples": 4, "seq_length": 2, "informed_k": 4},
	"mpc": {"max_steps": 1},
	"episodes": 2,
}


@pytest.fixture(autouse=True)
def clean_env(monkeypatch, tmp_path):
	# main() пишет CLOTHDIFF_* в окружение; monkeypatch вернёт исходные значения
	for name in ("CLOTHDIFF_SEED", "CLOTHDIFF_LOG_LEVEL"):
		monkeypatch.setenv(name, "0")
		monkeypatch.delenv(name)
	monkeypatch.chdir(tmp_path)


def _write(path, payload):
	path.write_text(json.dumps(payload), encoding="utf-8")
	return str(path)


def test_unknown_config_key_is_config_error(tmp_path):
	config = _write(tmp_path / "gen.json", {**SMALL_DATA, "n_trajectories": 3})
	assert main(["gen-data", "--config", config, "--out", str(tmp_path / "out")]) == EXIT_CONFIG


def test_missing_config_file(tmp_path):
	assert main(["gen-data", "--config", str(tmp_path / "absent.json"), "--out", str(tmp_path / "out")]) == EXIT_CONFIG


def test_unknown_command_exits():
	with pytest.raises(SystemExit):
		main(["fold-everything"])


def test_seed_flag_overrides_config(tmp_path):
	fixed = _write(tmp_path / "fixed.json", {**SMALL_DATA, "seed": 3})
	default = _write(tmp_path / "default.json", SMALL_DATA)
	assert main(["gen-data", "--config", fixed, "--out", str(tmp_path / "a")]) == EXIT_OK
	assert main(["--seed", "3", "gen-data", "--config", default, "--out", str(tmp_path / "b")]) == EXIT_OK
	a = (tmp_path / "a" / "traj_0000" / "states.cdt").read_bytes()
	b = (tmp_path / "b" / "traj_0000" / "states.cdt").read_bytes()
	assert a == b


def test_plan_and_plot_emit(tmp_path, capsys):
	task = _write(tmp_path / "task.json", SMALL_TASK)
	out = tmp_path / "episodes.json"
	assert main(["plan", "--task", task, "--out", str(out)]) == EXIT_OK
	assert "success_rate" in json.loads(capsys.readouterr().out)
	payload = read_json(out)
	assert len(payload["episodes"]) == 2
	assert len(payload["success_curve"]) == 4
	assert all(len(e["emd"]) >= 2 or e["success"] for e in payload["episodes"])
	csv_path = tmp_path / "emd.csv"
	assert main(["plot-emit", "--input", str(out), "--out", str(csv_path)]) == EXIT_OK
	lines = csv_path.read_text(encoding="utf-8").splitlines()
	assert lines[0] == "step,emd_mean,emd_ci95"


def test_random_baseline(tmp_path):
	task = _write(tmp_path / "task.json", SMALL_TASK)
	out = tmp_path / "random.json"
	assert main(["plan", "--task", task, "--random-baseline", "--out", str(out)]) == EXIT_OK
	assert read_json(out)["task"]["episodes"] == 2


def test_simulator_rollout(tmp_path):
	config = _write(tmp_path / "task.json", SMALL_TASK)
	history = ClothSpec(rows=4, cols=4, size=0.3).build().vertices
	write_tensor(tmp_path / "history.cdt", history)
	write_tensor(tmp_path / "actions.cdt", np.array([[0.0, 0.0, 0.03], [0.02, 0.0, 0.0]]))
	args = [
		"rollout", "--history", str(tmp_path / "history.cdt"), "--actions", str(tmp_path / "actions.cdt"),
		"--grasp", "0", "--config", config, "--out", str(tmp_path / "frames.cdt"),
	]
	assert main(args) == EXIT_OK
	frames = read_tensor(tmp_path / "frames.cdt")
	assert frames.shape == (2, 16, 3)
	assert np.allclose(frames[-1, 0], history[0] + [0.02, 0.0, 0.03])


def test_simulation_blowup_is_numerical_error(tmp_path):
	config = _write(tmp_path / "task.json", SMALL_TASK)
	write_tensor(tmp_path / "history.cdt", ClothSpec(rows=4, cols=4, size=0.3).build().vertices)
	write_tensor(tmp_path / "actions.cdt", np.array([[np.nan, 0.0, 0.0]]))
	args = [
		"rollout", "--history", str(tmp_path / "history.cdt"), "--actions", str(tmp_path / "actions.cdt"),
		"--grasp", "0", "--config", config, "--out", str(tmp_path / "frames.cdt"),
	]
	assert main(args) == EXIT_NUMERICAL


def test_estimate_rejects_dynamics_checkpoint(tmp_path, ddm_model):
	save_checkpoint(ddm_model, tmp_path / "ddm")
	write_tensor(tmp_path / "cloud.cdt", np.zeros((8, 3)))
	args = ["estimate", "--ckpt", str(tmp_path / "ddm"), "--cloud", str(tmp_path / "cloud.cdt"), "--out", str(tmp_path / "m.obj")]
	assert main(args) == EXIT_CONFIG


def test_estimate_writes_mesh(tmp_path, dpm_model, rng):
	save_checkpoint(dpm_model, tmp_path / "dpm")
	write_tensor(tmp_path / "cloud.cdt", dpm_model.canonical.vertices[:10] + rng.normal(0, 0.005, (10, 3)))
	args = ["estimate", "--ckpt", str(tmp_path / "dpm"), "--cloud", str(tmp_path / "cloud.cdt"), "--out", str(tmp_path / "m.cdt")]
	assert main(args) == EXIT_OK
	assert read_tensor(tmp_path / "m.cdt").shape == (16, 3)


def test_gradcheck_command(tmp_path):
	out = tmp_path / "gradcheck.json"
	assert main(["gradcheck", "--scope", "ops", "--out", str(out)]) == EXIT_OK
	report = read_json(out)
	assert report["passed"] and report["n_checked"] == len(report["results"])


def test_plot_emit_without_series_fails(tmp_path):
	source = _write(tmp_path / "report.json", {"kind": "dpm"})
	assert main(["plot-emit", "--input", source]) == EXIT_CONFIG


def test_failure_exit_code(tmp_path):
	assert EXIT_FAILURE == 1
	source = tmp_path / "episodes.json"
	source.write_text(json.dumps({"episodes": [{"cd": [1.0]}]}), encoding="utf-8")
	assert main(["plot-emit", "--input", str(source)]) == EXIT_FAILURE


def test_workers_default_from_environment(tmp_path, monkeypatch):
	seen = []
	real_gen_data = cli.gen_data

	def recording_gen_data(config, out):
		seen.append(config.workers)
		return real_gen_data(config, out)

	monkeypatch.setattr(cli, "gen_data", recording_gen_data)
	monkeypatch.setenv("CLOTHDIFF_WORKERS", "2")
	default = _write(tmp_path / "default.json", SMALL_DATA)
	pinned = _write(tmp_path / "pinned.json", {**SMALL_DATA, "workers": 1})
	assert main(["gen-data", "--config", default, "--out", str(tmp_path / "a")]) == EXIT_OK
	assert main(["gen-data", "--config", pinned, "--out", str(tmp_path / "b")]) == EXIT_OK
	assert seen == [2, 1]
	a = (tmp_path / "a" / "traj_0000" / "states.cdt").read_bytes()
	b = (tmp_path / "b" / "traj_0000" / "states.cdt").read_bytes()
	assert a == b


def test_estimate_with_canonical_file(tmp_path, dpm_model, rng):
	save_checkpoint(dpm_model, tmp_path / "dpm")
	save_obj(dpm_model.canonical, tmp_path / "canonical.obj")
	write_tensor(tmp_path / "cloud.cdt", dpm_model.canonical.vertices[:10] + rng.normal(0, 0.005, (10, 3)))
	args = [
		"estimate", "--ckpt", str(tmp_path / "dpm"), "--canonical", str(tmp_path / "canonical.obj"),
		"--cloud", str(tmp_path / "cloud.cdt"), "--out", str(tmp_path / "m.obj"),
	]
	assert main(args) == EXIT_OK
	mesh = load_obj(tmp_path / "m.obj")
	assert mesh.n_vertices == 16
	assert np.array_equal(mesh.faces, dpm_model.canonical.faces)


def test_estimate_rejects_foreign_canonical(tmp_path, dpm_model):
	save_checkpoint(dpm_model, tmp_path / "dpm")
	save_obj(make_grid_cloth(3, 3, 0.1), tmp_path / "canonical.obj")
	write_tensor(tmp_path / "cloud.cdt", np.zeros((8, 3)))
	args = [
		"estimate", "--ckpt", str(tmp_path / "dpm"), "--canonical", str(tmp_path / "canonical.obj"),
		"--cloud", str(tmp_path / "cloud.cdt"), "--out", str(tmp_path / "m.obj"),
	]
	assert main(args) == EXIT_CONFIG
	args[4] = str(tmp_path / "absent.obj")
	assert main(args) == EXIT_CONFIG


def test_plan_model_flags_need_checkpoints(tmp_path):
	task = _write(tmp_path / "task.json", SMALL_TASK)
	out = str(tmp_path / "episodes.json")
	assert main(["plan", "--task", task, "--dynamics", "ddm", "--out", out]) == EXIT_CONFIG
	assert main(["plan", "--task", task, "--perception", "dpm", "--out", out]) == EXIT_CONFIG
	with pytest.raises(SystemExit):
		main(["plan", "--task", task, "--dynamics", "learned", "--out", out])
	assert main(["plan", "--task", task, "--dynamics", "sim", "--perception", "oracle", "--out", out]) == EXIT_OK


def test_plan_rejects_wrong_checkpoint_kind(tmp_path, dpm_model):
	save_checkpoint(dpm_model, tmp_path / "dpm")
	task = _write(tmp_path / "task.json", SMALL_TASK)
	args = ["plan", "--task", task, "--dynamics", "ddm", "--ddm", str(tmp_path / "dpm"), "--out", str(tmp_path / "e.json")]
	assert main(args) == EXIT_CONFIG


def test_plan_with_perception_model(tmp_path, dpm_model):
	save_checkpoint(dpm_model, tmp_path / "dpm")
	task = _write(tmp_path / "task.json", {**SMALL_TASK, "episodes": 1, "mpc": {"max_steps": 1, "samples_per_face": 4}})
	out = tmp_path / "episodes.json"
	args = ["plan", "--task", task, "--perception", "dpm", "--dpm", str(tmp_path / "dpm"), "--out", str(out)]
	assert main(args) == EXIT_OK
	episode = read_json(out)["episodes"][0]
	assert episode["error"] is None
