import math

import numpy as np
import pytest

from gpcal.config import (ExperimentConfig, RobotConfig, config_from_dict, dump_config, load_config,
                          parse_angle)
from gpcal.errors import ConfigError
from gpcal.robots import BUILTIN, builtin


def test_wam7_table_values():
    rb = builtin("wam7")
    assert rb.n == 7
    assert rb.table.links[2].d == 0.55
    assert rb.uncertainty[2, 2] == 0.2


def test_lander6_table_values():
    rb = builtin("lander6")
    assert rb.n == 6
    assert rb.table.links[3].a == 0.463
    assert rb.uncertainty[3, 3] == 0.1


def test_planar2_values():
    rb = builtin("planar2")
    assert [lk.a for lk in rb.table.links] == [1.0, 1.0]
    np.testing.assert_array_equal(rb.uncertainty, [[0.0, 0.1, 0.1, 0.2]] * 2)
    np.testing.assert_array_equal(rb.table.joint_limits, [[-3, 3], [-3, 3]])


def test_unknown_builtin():
    with pytest.raises(KeyError, match="unknown built-in"):
        builtin("puma")


@pytest.mark.parametrize("text,value", [("pi/2", math.pi / 2), ("-pi", -math.pi),
                                        ("0.5*pi", math.pi / 2), ("2pi/3", 2 * math.pi / 3),
                                        ("0.25", 0.25), (1, 1.0)])
def test_parse_angle(text, value):
    assert parse_angle(text) == pytest.approx(value)


def test_parse_angle_rejects_garbage():
    with pytest.raises(ValueError):
        parse_angle("half a turn")


def _inline_robot(bound=0.1):
    return {"name": "arm", "joint_limits": [[-1, 1], [-1, 1]],
            "links": [{"a": [1.0, 0.2]}, {"a": [0.5, bound], "alpha": ["pi/2", 0.1]}]}


def test_inline_robot_parsed():
    cfg = config_from_dict({"robot": _inline_robot()})
    rb = cfg.resolve_robot()
    assert rb.table.links[1].alpha == pytest.approx(math.pi / 2)
    assert rb.uncertainty[1, 3] == 0.1


def test_negative_bound_names_the_row():
    with pytest.raises(ConfigError, match=r"robot\.links\.1\.a\.bound"):
        config_from_dict({"robot": _inline_robot(-0.1)})


def test_unknown_key_rejected():
    with pytest.raises(ConfigError, match="budjet"):
        config_from_dict({"budjet": 10})


def test_bad_strategy_rejected():
    with pytest.raises(ConfigError, match="strategies"):
        config_from_dict({"strategies": ["thompson"]})


def test_even_bins_rejected():
    with pytest.raises(ConfigError, match="odd"):
        config_from_dict({"histogram": {"bins": 40}})


def test_field_weight_length_checked():
    bad = {"perturbation": {"additive_field": [{"axis": 4, "amplitude": 0.1, "weights": [1.0]}]}}
    with pytest.raises(ConfigError, match="weights need 2"):
        config_from_dict(bad)


def test_yaml_error_reports_line(tmp_path):
    p = tmp_path / "bad.yaml"
    p.write_text("robot: planar2\nbudget: 3\nseeds: [1]]\n")
    with pytest.raises(ConfigError, match="line 3"):
        load_config(p)


def test_missing_file(tmp_path):
    with pytest.raises(ConfigError):
        load_config(tmp_path / "absent.yaml")


def test_yaml_round_trip(tmp_path):
    cfg = config_from_dict({"robot": "wam7", "budget": 12, "seeds": [1, 2],
                            "measurement": {"noise_std": 0.01}})
    p = tmp_path / "c.yaml"
    p.write_text(dump_config(cfg))
    again = load_config(p)
    assert again == cfg
    assert again.config_hash() == cfg.config_hash()


def test_hash_changes_with_content():
    assert config_from_dict({"budget": 5}).config_hash() != config_from_dict({"budget": 6}).config_hash()


@pytest.mark.parametrize("name", sorted(BUILTIN))
def test_builtin_tables_round_trip(name):
    rb = builtin(name)
    data = RobotConfig.from_robot(rb).model_dump(mode="json")
    rb2 = RobotConfig.model_validate(data).to_robot()
    np.testing.assert_array_equal(rb2.table.phi(), rb.table.phi())
    np.testing.assert_array_equal(rb2.uncertainty, rb.uncertainty)
    np.testing.assert_array_equal(rb2.table.joint_limits, rb.table.joint_limits)
    assert RobotConfig.from_robot(rb2).model_dump(mode="json") == data


def test_refit_policy_noise_floor():
    cfg = ExperimentConfig()
    assert cfg.refit.policy((0.0,) * 7).noise_floor is None
    assert cfg.refit.policy((0.1,) * 7).noise_floor == (0.1,) * 7


def test_measurement_noise_shape_checked():
    with pytest.raises(ConfigError, match="noise_std"):
        config_from_dict({"measurement": {"noise_std": [0.1, 0.2]}})
