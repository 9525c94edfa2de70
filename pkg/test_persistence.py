import struct

import numpy as np
import pytest

from .errors import ConfigError, DomainError
from .neural.tensor import Tensor
from .persistence import (
	MAGIC,
	checkpoint_kind,
	decode_tensor,
	encode_tensor,
	load_checkpoint,
	read_json,
	read_tensor,
	save_checkpoint,
	write_tensor,
)


def test_tensor_layout():
	payload = encode_tensor(np.arange(6.0).reshape(2, 3))
	assert payload[:8] == MAGIC
	assert struct.unpack_from("<III", payload, 8) == (1, 0, 2)
	assert struct.unpack_from("<2Q", payload, 20) == (2, 3)
	assert len(payload) == 8 + 12 + 16 + 6 * 8
	assert np.frombuffer(payload[36:], dtype="<f8")[4] == 4.0


def test_tensor_dtypes(tmp_path):
	path = tmp_path / "mask.cdt"
	write_tensor(path, np.array([True, False, True]))
	restored = read_tensor(path)
	assert restored.dtype == np.uint8
	assert restored.tolist() == [1, 0, 1]
	assert decode_tensor(encode_tensor(np.ones(4, dtype=np.float32))).dtype == np.float32
	with pytest.raises(DomainError):
		encode_tensor(np.arange(3))


def test_corrupted_tensor_rejected():
	payload = encode_tensor(np.zeros((2, 2)))
	with pytest.raises(DomainError):
		decode_tensor(b"XXXXXXXX" + payload[8:])
	with pytest.raises(DomainError):
		decode_tensor(payload[:-8])
	with pytest.raises(DomainError):
		decode_tensor(payload[:8] + struct.pack("<I", 2) + payload[12:])


def test_missing_files_are_config_errors(tmp_path):
	with pytest.raises(ConfigError):
		read_tensor(tmp_path / "absent.cdt")
	with pytest.raises(ConfigError):
		read_json(tmp_path / "absent.json")
	broken = tmp_path / "broken.json"
	broken.write_text("{not json", encoding="utf-8")
	with pytest.raises(ConfigError):
		read_json(broken)


def test_dpm_checkpoint_roundtrip(tmp_path, dpm_model):
	save_checkpoint(dpm_model, tmp_path / "dpm", {"losses": [1.0, 0.5]})
	assert checkpoint_kind(tmp_path / "dpm") == "dpm"
	assert read_json(tmp_path / "dpm" / "manifest.json")["losses"] == [1.0, 0.5]
	loaded = load_checkpoint(tmp_path / "dpm")
	assert loaded.canonical.same_connectivity(dpm_model.canonical)
	for name, value in dpm_model.state_dict().items():
		assert np.array_equal(loaded.state_dict()[name], value)


def test_ddm_checkpoint_roundtrip(tmp_path, ddm_model):
	save_checkpoint(ddm_model, tmp_path / "ddm")
	loaded = load_checkpoint(tmp_path / "ddm")
	assert loaded.config == ddm_model.config
	assert np.allclose(loaded.schedule.alphas_bar, ddm_model.schedule.alphas_bar)


def test_unknown_checkpoint_kind(tmp_path, dpm_model):
	with pytest.raises(DomainError):
		save_checkpoint(Tensor(np.zeros(2)), tmp_path / "bad")
	save_checkpoint(dpm_model, tmp_path / "ckpt")
	manifest = tmp_path / "ckpt" / "manifest.json"
	manifest.write_text(manifest.read_text(encoding="utf-8").replace('"kind": "dpm"', '"kind": "vae"'), encoding="utf-8")
	with pytest.raises(ConfigError):
		load_checkpoint(tmp_path / "ckpt")
