"""Config parsing, validation rules, digests, seed derivation."""

import pytest

from metasched.config import (
    RunConfig,
    apply_overrides,
    build_config,
    config_from_overrides,
    load_config,
    parse_config_text,
    save_config,
    with_seeds,
)
from metasched.errors import ConfigError

SAMPLE = """
# reference noisy-label run
train.lr = 0.1          # trailing comment
train.epochs = 12
meta.mode = instance
noise.p = 0.4
model.hidden = 32,16

seed.data = 7
"""


def test_parse_key_value_lines():
    raw = parse_config_text(SAMPLE)
    assert raw == {
        "train.lr": "0.1",
        "train.epochs": "12",
        "meta.mode": "instance",
        "noise.p": "0.4",
        "model.hidden": "32,16",
        "seed.data": "7",
    }


def test_build_config_maps_dotted_keys():
    cfg = build_config(parse_config_text(SAMPLE))
    assert cfg.lr == 0.1
    assert cfg.epochs == 12
    assert cfg.mode == "instance"
    assert cfg.noise_p == 0.4
    assert cfg.hidden == (32, 16)
    assert cfg.seed_data == 7
    # untouched fields keep their defaults
    assert cfg.batch_size == 32
    assert cfg.optimizer == "sgd"


def test_malformed_line_reports_line_number():
    with pytest.raises(ConfigError, match="line 2"):
        parse_config_text("train.lr = 0.1\nnot a setting\n")


def test_unknown_key_rejected():
    with pytest.raises(ConfigError, match="unknown config key"):
        build_config({"train.learning_rate": "0.1"})


def test_bad_value_types():
    with pytest.raises(ConfigError, match="integer"):
        build_config({"train.epochs": "twelve"})
    with pytest.raises(ConfigError, match="number"):
        build_config({"train.lr": "fast"})
    with pytest.raises(ConfigError, match="boolean"):
        build_config({"meta.wd_learnable": "maybe"})


def test_optim_hyper_passthrough():
    cfg = build_config({"train.optimizer": "adam", "optim.beta1": "0.8"})
    assert cfg.optim_hyper == (("beta1", 0.8),)


def test_overrides_win_over_file_values():
    raw = apply_overrides({"train.lr": "0.1"}, ["train.lr=0.5", "meta.mode=class"])
    cfg = build_config(raw)
    assert cfg.lr == 0.5
    assert cfg.mode == "class"
    with pytest.raises(ConfigError, match="key=value"):
        apply_overrides({}, ["train.lr"])


def test_temperature_excludes_other_curricula():
    with pytest.raises(ConfigError, match="exactly one curriculum"):
        config_from_overrides(["formulation=temperature", "meta.mode=instance"])
    with pytest.raises(ConfigError, match="weight decay"):
        config_from_overrides(["formulation=temperature", "meta.wd_learnable=true"])
    cfg = config_from_overrides(["formulation=temperature", "temperature.mode=joint"])
    assert cfg.temperature_mode == "joint"


def test_meta_modes_require_sgd():
    with pytest.raises(ConfigError, match="sgd"):
        config_from_overrides(["meta.mode=instance", "train.optimizer=adam"])
    # plain runs may use any optimizer
    cfg = config_from_overrides(["train.optimizer=adam"])
    assert cfg.optimizer == "adam"


def test_meta_driven_needs_meta_examples():
    with pytest.raises(ConfigError, match="meta_per_class"):
        config_from_overrides(["meta.mode=instance", "split.meta_per_class=0"])
    # a plain run can give the meta set away
    cfg = config_from_overrides(["split.meta_per_class=0"])
    assert cfg.meta_per_class == 0


def test_rate_positivity():
    for key in ("train.lr", "meta.data_lr", "meta.wd_lr", "temperature.lr"):
        with pytest.raises(ConfigError, match="positive"):
            config_from_overrides([f"{key}=0"])


def test_misc_validation():
    with pytest.raises(ConfigError, match="activation"):
        config_from_overrides(["model.activation=swish"])
    with pytest.raises(ConfigError, match="noise.p"):
        config_from_overrides(["noise.p=1.5"])
    with pytest.raises(ConfigError, match="split.k"):
        config_from_overrides(["split.kind=kfold", "split.k=1"])
    with pytest.raises(ConfigError, match="n_superclasses"):
        config_from_overrides(["personalization.target=0"])


def test_manifest_key_needs_a_dataset_file():
    with pytest.raises(ConfigError, match="data.path"):
        config_from_overrides(["data.manifest=m.csv"])
    with pytest.raises(ConfigError, match="one corruption source"):
        config_from_overrides(
            ["data.path=d.csv", "data.manifest=m.csv", "noise.p=0.2"]
        )


def test_digest_stable_and_sensitive():
    a = config_from_overrides(["train.lr=0.2"])
    b = config_from_overrides(["train.lr=0.2"])
    c = config_from_overrides(["train.lr=0.25"])
    assert a.digest() == b.digest()
    assert a.digest() != c.digest()
    assert len(a.digest()) == 16


def test_save_load_round_trip(tmp_path):
    cfg = config_from_overrides(
        [
            "meta.mode=class",
            "meta.history_reset=true",
            "noise.p=0.4",
            "model.hidden=48",
            "lr_drop.epoch=20",
            "optim.momentum=0.9",
        ]
    )
    path = tmp_path / "run.cfg"
    save_config(cfg, path)
    back = load_config(path)
    assert back == cfg
    assert back.digest() == cfg.digest()


def test_load_missing_file():
    with pytest.raises(ConfigError, match="cannot read"):
        load_config("/nonexistent/run.cfg")


def test_with_seeds_derivation():
    cfg = with_seeds(RunConfig(), 40)
    assert (cfg.seed_data, cfg.seed_init, cfg.seed_shuffle) == (40, 41, 42)


def test_derived_seeds_default_and_override():
    cfg = config_from_overrides(["seed.data=10"])
    assert cfg.noise_seed_effective == 11
    assert cfg.split_seed_effective == 12
    cfg = config_from_overrides(["seed.data=10", "noise.seed=99", "split.seed=98"])
    assert cfg.noise_seed_effective == 99
    assert cfg.split_seed_effective == 98
