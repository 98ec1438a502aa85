import json
import logging

import numpy as np
import pytest

from config import RunConfig, dump_run_config, load_run_config
from error_handlers import (CloudParseError, ErrorCategory, GeometryError, NumericalError,
                            ValidationError, handle_exception)
from logger_config import JSONFormatter, get_logger


def test_defaults():
    cfg = load_run_config()
    assert cfg.radius == 0.1 and cfg.k_neighbors == 128
    assert cfg.neighborhood == "adaptive"
    assert cfg.mask_ratio == 0.6 and cfg.patch_count == 128
    assert cfg.normalize is True


def test_file_values_and_override_precedence(write_text):
    path = write_text("run.env", "# comment\nRADIUS=0.25\nseed=3\nblock_mode=true\nbandwidth=\n")
    cfg = load_run_config(path, {"seed": 9, "k_neighbors": None})
    assert cfg.radius == 0.25
    assert cfg.seed == 9
    assert cfg.block_mode is True
    assert cfg.bandwidth is None
    assert cfg.k_neighbors == 128


def test_unknown_key_is_rejected(write_text):
    with pytest.raises(ValidationError) as info:
        load_run_config(write_text("bad.env", "radious=0.2\n"))
    assert info.value.exit_code == 2
    assert info.value.details["field"] == "radious"


def test_range_checks():
    with pytest.raises(ValidationError):
        load_run_config(overrides={"mask_ratio": 1.0})
    with pytest.raises(ValidationError, match="query_uniform"):
        load_run_config(overrides={"query_uniform": 0.7})
    with pytest.raises(ValidationError):
        load_run_config(overrides={"ae_n": 4, "ae_m": 4})


def test_missing_config_file(tmp_path):
    with pytest.raises(ValidationError):
        load_run_config(tmp_path / "absent.env")


def test_resolved_config_reloads(tmp_path):
    cfg = load_run_config(overrides={"radius": 0.05, "sigma_plane": 0.02, "block_mode": True})
    again = load_run_config(dump_run_config(cfg, tmp_path / "config.resolved.env"))
    assert again == cfg


def test_type_sigmas():
    cfg = RunConfig(sigma_cone=0.3)
    assert cfg.type_sigmas() == {"plane": None, "sphere": None, "cylinder": None, "cone": 0.3}


def test_exit_codes_by_category():
    assert ValidationError("x").exit_code == 2
    assert CloudParseError("x", path="a.xyz", line=3).exit_code == 2
    assert NumericalError("x").exit_code == 3
    assert GeometryError("x").exit_code == 1


def test_parse_error_message_names_the_line():
    err = CloudParseError("not a number", path="a.xyz", line=7)
    assert "line 7" in err.message
    assert err.one_line().startswith("error[parse_error]:")
    assert err.to_dict()["error"]["exit_code"] == 2


def test_handle_exception_maps_library_errors():
    assert handle_exception(np.linalg.LinAlgError("singular")).category is ErrorCategory.NUMERICAL
    assert handle_exception(ValueError("bad")).exit_code == 2
    assert handle_exception(FileNotFoundError("gone")).category is ErrorCategory.VALIDATION
    assert handle_exception(RuntimeError("boom")).exit_code == 1
    original = ValidationError("kept")
    assert handle_exception(original) is original


class Capture(logging.Handler):
    def __init__(self):
        super().__init__(logging.DEBUG)
        self.lines = []

    def emit(self, record):
        self.lines.append(json.loads(JSONFormatter().format(record)))


@pytest.fixture
def captured():
    handler = Capture()
    target = logging.getLogger("hybridseg.test")
    target.addHandler(handler)
    target.setLevel(logging.DEBUG)
    yield handler
    target.removeHandler(handler)
    get_logger("hybridseg.test").clear_context()


def test_json_log_lines_carry_context(captured):
    get_logger("somewhere.else").set_context(run_id="abc")
    logger = get_logger("hybridseg.test")
    logger.info("Fitted", residual=np.float64(0.5), center=np.zeros(3))
    payload = captured.lines[0]
    assert payload["message"] == "Fitted"
    assert payload["run_id"] == "abc"
    assert payload["residual"] == 0.5
    assert payload["center"] == [0.0, 0.0, 0.0]


def test_stage_logs_elapsed_time(captured):
    logger = get_logger("hybridseg.test")
    with logger.stage("eigs", method="dense") as fields:
        fields["dims"] = 2
    payload = captured.lines[-1]
    assert payload["stage"] == "eigs" and payload["dims"] == 2 and payload["method"] == "dense"
    assert payload["elapsed_ms"] >= 0
