import asyncio
import json

import numpy as np
import pytest
from fastapi.testclient import TestClient

from .config import Config
from .datasets import ClothSpec
from .errors import ConfigError
from .http_server import ClothHttpServer
from .mcp_server import ClothMCPServer
from .persistence import save_checkpoint
from .toolbox import ClothToolbox


TOOLS = ["cloth_metrics", "estimate_state", "predict_dynamics", "plan_actions"]


@pytest.fixture(autouse=True)
def no_dotenv(monkeypatch, tmp_path):
	monkeypatch.chdir(tmp_path)


@pytest.fixture
def small_config():
	return Config(cloth_rows=4, cloth_cols=4, cloth_size=0.3, seed=5)


def _call(toolbox, name, arguments):
	return asyncio.run(toolbox.call_tool(name, arguments))


def _payload(result):
	assert not result.isError, result.content[0].text
	return json.loads(result.content[0].text)


def test_list_tools(small_config):
	tools = asyncio.run(ClothToolbox(small_config).list_tools())
	assert [t.name for t in tools] == TOOLS
	assert "cloud" in tools[1].inputSchema["properties"]


def test_cloth_metrics_tool(small_config):
	a = [[0.0, 0.0, 0.0], [1.0, 0.0, 0.0]]
	b = [[0.0, 0.0, 0.0], [1.0, 0.0, 0.5]]
	payload = _payload(_call(ClothToolbox(small_config), "cloth_metrics", {"a": a, "b": b}))
	assert payload["mse"] == pytest.approx(0.125)
	assert payload["emd"] == pytest.approx(0.25)
	assert set(payload) == {"mse", "cd", "emd"}


def test_errors_are_reported_not_raised(small_config):
	toolbox = ClothToolbox(small_config)
	assert _call(toolbox, "fold_shirt", {}).isError
	assert _call(toolbox, "cloth_metrics", {"a": [[0.0, 0.0]], "b": [[0.0, 0.0, 0.0]]}).isError
	missing = _call(toolbox, "estimate_state", {"cloud": [[0.0, 0.0, 0.0]]})
	assert missing.isError
	assert "чекпоинт" in missing.content[0].text
	with pytest.raises(ConfigError):
		asyncio.run(toolbox.run_tool("fold_shirt", None))


def test_estimate_state_tool(tmp_path, dpm_model, rng):
	save_checkpoint(dpm_model, tmp_path / "dpm")
	toolbox = ClothToolbox(Config(dpm_checkpoint=str(tmp_path / "dpm")))
	assert toolbox.check_health()["dpm"] == {"configured": True, "loaded": False}
	cloud = dpm_model.canonical.vertices[:10] + rng.normal(0.0, 0.005, (10, 3))
	payload = _payload(_call(toolbox, "estimate_state", {"cloud": cloud.tolist(), "sampling_steps": 3}))
	assert payload["n_vertices"] == 16
	assert np.asarray(payload["vertices"]).shape == (16, 3)
	assert toolbox.check_health()["dpm"]["loaded"]


def test_wrong_checkpoint_kind(tmp_path, ddm_model):
	save_checkpoint(ddm_model, tmp_path / "ddm")
	toolbox = ClothToolbox(Config(dpm_checkpoint=str(tmp_path / "ddm")))
	assert _call(toolbox, "estimate_state", {"cloud": [[0.0, 0.0, 0.0]]}).isError


def test_predict_dynamics_tool(tmp_path, ddm_model):
	save_checkpoint(ddm_model, tmp_path / "ddm")
	toolbox = ClothToolbox(Config(ddm_checkpoint=str(tmp_path / "ddm")))
	history = np.stack([ddm_model.canonical.vertices] * 2)
	arguments = {
		"history": history.tolist(),
		"actions": [[0.0, 0.0, 0.02], [0.01, 0.0, 0.0]],
		"grasp_index": 0,
		"sampling_steps": 2,
	}
	payload = _payload(_call(toolbox, "predict_dynamics", arguments))
	assert np.asarray(payload["frames"]).shape == (2, 16, 3)


def test_plan_actions_tool(small_config):
	toolbox = ClothToolbox(small_config)
	current = ClothSpec(rows=4, cols=4, size=0.3).build().vertices
	target = current + [0.03, 0.0, 0.0]
	arguments = {
		"current": current.tolist(),
		"target": target.tolist(),
		"planner": {"n_iterations": 1, "n_samples": 4, "seq_length": 2, "informed_k": 4},
	}
	payload = _payload(_call(toolbox, "plan_actions", arguments))
	assert 0 <= payload["grasp_index"] < 16
	assert np.asarray(payload["actions"]).shape == (2, 3)
	assert len(payload["cost_history"]) == 1
	wrong = dict(arguments, current=current[:8].tolist())
	assert _call(toolbox, "plan_actions", wrong).isError


def test_http_routes(small_config):
	client = TestClient(ClothHttpServer(small_config).app)
	root = client.get("/").json()
	assert root["endpoints"]["streamable_http"] == "/mcp/"
	info = client.get("/info").json()
	assert info["tools"] == TOOLS
	assert info["version"] == small_config.server_version
	health = client.get("/health").json()
	assert health["status"] == "healthy"
	assert health["models"]["cloth"] == {"rows": 4, "cols": 4, "size": 0.3}
	assert health["models"]["ddm"] == {"configured": False, "loaded": False}


def test_mcp_server_options(small_config):
	server = ClothMCPServer(small_config)
	options = server.get_initialization_options()
	assert options.server_name == small_config.server_name
	assert options.server_version == "1.0.0"
	assert options.capabilities.tools is not None


def test_config_from_environment(monkeypatch):
	monkeypatch.setenv("CLOTHDIFF_CLOTH_ROWS", "5")
	monkeypatch.setenv("CLOTHDIFF_DDM_CHECKPOINT", "ckpt/ddm")
	config = Config()
	assert config.cloth_rows == 5
	assert ClothToolbox(config).check_health()["ddm"]["configured"]


def test_rest_tool_route(small_config):
	client = TestClient(ClothHttpServer(small_config).app)
	points = [[0.0, 0.0, 0.0], [0.1, 0.0, 0.0]]
	response = client.post("/tools/cloth_metrics", json={"a": points, "b": points})
	assert response.status_code == 200
	assert response.json()["emd"] == 0.0
	assert client.post("/tools/fold_shirt", json={}).status_code == 404
	assert client.post("/tools/cloth_metrics", json={"a": points}).status_code == 422
	assert client.post("/tools/estimate_state", json={"cloud": points}).status_code == 400
