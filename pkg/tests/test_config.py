import json

import pytest
from hypothesis import given, strategies as st

from decon.config import PRESET_NAMES, ConfigError, ExperimentConfig, preset, validate_config


@pytest.mark.parametrize("name", PRESET_NAMES)
def test_every_preset_validates(name):
    cfg = preset(name)
    assert validate_config(cfg) == cfg


def test_decon_sl_preset():
    cfg = validate_config(preset("decon-sl"))
    assert cfg.alpha == 0.25
    assert cfg.decoder_kind == "fcn"
    assert cfg.dropout_p == 0.0
    assert cfg.decoder_levels == 1


def test_decon_ml_presets():
    large, small = preset("decon-ml-l"), preset("decon-ml-s")
    assert (large.alpha, large.dropout_p, large.decoder_levels) == (0.0, 0.5, 4)
    assert (small.alpha, small.dropout_p, small.decoder_levels) == (0.0, 0.5, 2)
    assert small.proj_hidden * 2 == large.proj_hidden
    assert large.decoder_kind == small.decoder_kind == "fpn"


def test_baseline_preset():
    cfg = preset("baseline")
    assert cfg.decoder_kind == "none"
    assert cfg.alpha == 1.0


def test_unknown_preset_lists_names():
    with pytest.raises(ConfigError) as err:
        preset("nope")
    for name in PRESET_NAMES:
        assert name in str(err.value)


@pytest.mark.parametrize(
    "changes, field",
    [
        (dict(alpha=1.5), "alpha"),
        (dict(alpha=-0.1), "alpha"),
        (dict(decoder_kind="fpn", decoder_levels=5, alpha=0.5), "decoder_levels"),
        (dict(decoder_kind="fpn", decoder_levels=0, alpha=0.5), "decoder_levels"),
        (dict(dropout_p=1.0), "dropout_p"),
        (dict(decoder_kind="none", alpha=0.5), "alpha"),
        (dict(temp_student=0.0), "temp_student"),
        (dict(temp_teacher=-1.0), "temp_teacher"),
        (dict(proj_hidden=8, proj_out=16), "proj_hidden"),
        (dict(ema_m0=1.0), "ema_m0"),
        (dict(center_momentum=1.0), "center_momentum"),
        (dict(decoder_kind="unet", alpha=0.5), "decoder_kind"),
        (dict(objective_kind="simclr"), "objective_kind"),
        (dict(image_size=40), "image_size"),
        (dict(seed=-1), "seed"),
    ],
)
def test_range_errors_name_the_field(changes, field):
    with pytest.raises(ConfigError, match=field):
        validate_config(ExperimentConfig(**changes))


def test_fcn_levels_normalized():
    cfg = validate_config(ExperimentConfig(decoder_kind="fcn", decoder_levels=3, alpha=0.5))
    assert cfg.decoder_levels == 1


def test_unknown_json_key_rejected():
    data = ExperimentConfig().to_dict()
    data["learning_rate"] = 0.1
    with pytest.raises(ConfigError, match="learning_rate"):
        ExperimentConfig.from_json(json.dumps(data))


def test_hash_changes_with_fields():
    assert ExperimentConfig().config_hash() != ExperimentConfig(seed=1).config_hash()


configs = st.builds(
    ExperimentConfig,
    alpha=st.floats(0, 1),
    dropout_p=st.floats(0, 0.99),
    decoder_kind=st.sampled_from(["fcn", "fpn"]),
    decoder_levels=st.integers(1, 4),
    objective_kind=st.sampled_from(["dense_pair", "prototype"]),
    prototypes_enc=st.integers(2, 512),
    temp_student=st.floats(1e-3, 10),
    lr=st.floats(0, 1),
    seed=st.integers(0, 2**64 - 1),
)


@given(configs)
def test_json_round_trip(cfg):
    assert ExperimentConfig.from_json(cfg.to_json()) == cfg
