import json

import pytest

from gmmcalib.config import (
    ALGORITHMS,
    EvaluationConfig,
    GmmConfig,
    IcpConfig,
    PipelineConfig,
    RunConfig,
    load_pipeline_config,
    load_run_config,
    read_json,
)
from gmmcalib.errors import ConfigError


def test_component_count_scales_with_the_data():
    assert GmmConfig().resolve_components(100_000) == 400
    assert GmmConfig().resolve_components(5_000) == 100
    assert GmmConfig().resolve_components(10) == 8
    assert GmmConfig(components=32).resolve_components(100_000) == 32


@pytest.mark.parametrize(
    "values",
    [
        {"outlier_weight": 1.0},
        {"outlier_weight": -0.1},
        {"tol": 0.0},
        {"max_iterations": 0},
        {"variance_floor": 0.0},
    ],
)
def test_gmm_config_rejects_bad_values(values):
    with pytest.raises(ConfigError):
        GmmConfig(**values)


def test_gmm_config_rejects_unknown_keys():
    with pytest.raises(ConfigError, match="sigma"):
        GmmConfig.from_dict({"sigma": 1.0})


def test_icp_block_must_match_its_variant():
    with pytest.raises(ConfigError):
        IcpConfig.from_dict({"variant": "gicp"}, "plane")
    assert IcpConfig.from_dict({"max_iterations": 5}, "plane").variant == "plane"


def test_icp_config_rejects_bad_values():
    with pytest.raises(ConfigError):
        IcpConfig(max_correspondence_distance=0.0)
    with pytest.raises(ConfigError):
        IcpConfig(variant="ndt")


def test_pipeline_config_requires_a_seed():
    with pytest.raises(ConfigError, match="seed"):
        PipelineConfig.from_dict({"algorithms": ["gmm"]})


def test_pipeline_config_from_dict():
    config = PipelineConfig.from_dict(
        {
            "schema_version": 1,
            "seed": 3,
            "algorithms": ["gmm", "gicp"],
            "gmm": {"components": 64},
            "icp": {"gicp": {"covariance_k": 12}},
            "crop_box": {"min": [8, -3, -1], "max": [12, 3, 3]},
        }
    )
    assert config.algorithms == ("gmm", "gicp")
    assert config.gmm.components == 64
    assert config.icp_config("gicp").covariance_k == 12
    assert config.icp_config("point").variant == "point"
    assert config.crop_min == (8, -3, -1)


def test_pipeline_config_round_trip():
    config = PipelineConfig.from_dict({"seed": 5, "gmm": {"components": 20}})
    again = PipelineConfig.from_dict(config.to_dict())
    assert again.gmm.components == 20
    assert again.seed == 5
    assert again.algorithms == ALGORITHMS


def test_pipeline_config_rejects_unknown_algorithms():
    with pytest.raises(ConfigError):
        PipelineConfig(algorithms=("gmm", "ndt"))


def test_pipeline_config_rejects_other_schema_versions():
    with pytest.raises(ConfigError, match="schema_version"):
        PipelineConfig.from_dict({"seed": 1, "schema_version": 2})


def test_evaluation_config_needs_positive_values():
    with pytest.raises(ConfigError):
        EvaluationConfig(miscalibration_threshold=0.0)


def test_read_json_errors(tmp_path):
    with pytest.raises(ConfigError, match="not found"):
        read_json(tmp_path / "missing.json")
    bad = tmp_path / "bad.json"
    bad.write_text("{")
    with pytest.raises(ConfigError, match="Invalid JSON"):
        read_json(bad)


def test_load_pipeline_config_without_a_file():
    config = load_pipeline_config(None, seed=9)
    assert config.seed == 9
    assert config.gmm.seed == 9


def test_load_pipeline_config_takes_the_cli_seed(tmp_path):
    path = tmp_path / "pipeline.json"
    path.write_text(json.dumps({"algorithms": ["point_icp"]}))
    assert load_pipeline_config(path, seed=4).seed == 4
    with pytest.raises(ConfigError):
        load_pipeline_config(path)


def test_load_run_config(tmp_path):
    path = tmp_path / "run.json"
    path.write_text(json.dumps({"seed": 2, "errors": 3, "frames": 4, "evaluation": {"bin_width": 1.0}}))
    run = load_run_config(path)
    assert isinstance(run, RunConfig)
    assert run.pipeline.seed == 2
    assert run.evaluation.bin_width == 1.0
    assert (run.errors, run.frames) == (3, 4)


def test_run_config_rejects_unknown_keys(tmp_path):
    path = tmp_path / "run.json"
    path.write_text(json.dumps({"seed": 2, "colour": "red"}))
    with pytest.raises(ConfigError, match="colour"):
        load_run_config(path)
