import pytest

from flowrecon.config import ConfigError, ExperimentConfig, parse_config


def test_defaults_and_types():
    cfg = parse_config("""
        # comment line
        problem.kind = ct      # trailing comment
        operator.angles = 45
        operator.noise_level = 0.05
        model.clamp = none
        conditioner.trainable = false
        train.lr = 1e-3
        reconstruct.refine = 1
    """)
    assert cfg.problem.kind == "ct" and cfg.operator.angles == 45
    assert cfg.operator.noise_level == 0.05 and cfg.model.clamp is None
    assert cfg.conditioner.trainable is False and cfg.train.lr == 1e-3
    assert cfg.reconstruct.refine == 1.0 and isinstance(cfg.reconstruct.refine, float)
    assert cfg.data.count == 200 and cfg.train.plateau_factor == 0.8


@pytest.mark.parametrize("text,match", [
    ("model.widht = 3", "model.widht"),
    ("nosuch.key = 1", "nosuch.key"),
    ("train.seed = 3", "train.seed"),
    ("model.hidden = 3\nmodel.hidden = 4", "duplicate"),
    ("model.hidden = 3.5", "integer"),
    ("conditioner.trainable = maybe", "true or false"),
    ("just some words", "line 1"),
    ("train.lr = -1", "learning rate"),
])
def test_errors(text, match):
    with pytest.raises(ConfigError, match=match):
        parse_config(text)


def test_seed_override_and_train_config():
    cfg = parse_config("run.seed = 4").with_seed(2 ** 64 - 1)
    assert cfg.run.seed == 2 ** 64 - 1 and cfg.train_config.seed == 2 ** 64 - 1


def test_text_roundtrip():
    cfg = parse_config("model.clamp = none\nproblem.kind = mri\ntrain.time_budget = 30")
    again = parse_config(cfg.to_text())
    assert again == cfg
    assert parse_config(ExperimentConfig().to_text()) == ExperimentConfig()
