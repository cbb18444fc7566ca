import pytest

from advfield.config import PROFILES, ConfigError, RunConfig, parse_lines


def test_defaults_resolve_and_roundtrip(tmp_path):
    rc = RunConfig.resolve()
    assert rc["synth.height"] == 64 and rc["synth.width"] == 64
    assert rc["run.profile"] == "desk"
    rc.write(tmp_path / "c.txt")
    again = RunConfig.resolve(tmp_path / "c.txt")
    assert again.values == rc.values
    assert again.text() == rc.text()


def test_paper_profile_pins_stated_values():
    rc = RunConfig.resolve(profile="paper")
    assert rc["train.lambda_l"] == 1.0 and rc["train.lambda_u"] == 0.1
    assert rc["attack.alpha"] == 0.3 and rc["attack.w"] == 0.5
    assert rc["attack.n"] == 1 and rc["attack.xi"] == 1.0 and rc["attack.k"] == 4
    assert rc["train.pretrain_lr"] == 1e-3 and rc["train.finetune_lr"] == 1e-5
    assert set(PROFILES) == {"desk", "paper"}


def test_layering_file_then_overrides(tmp_path):
    f = tmp_path / "c.txt"
    f.write_text("# comment\ntrain.lambda_l = 0.25\nattack.alpha = 0.2  # trailing\n")
    rc = RunConfig.resolve(f, {"attack.alpha": "0.1"})
    assert rc["train.lambda_l"] == 0.25
    assert rc["attack.alpha"] == 0.1


def test_typed_parsing():
    rc = RunConfig.resolve(overrides={"train.finetune_randaug": "off", "net.widths": "4,8",
                                      "eval.attacks": "", "ablate.seeds": "3,4"})
    assert rc["train.finetune_randaug"] is False
    assert rc["net.widths"] == (4, 8)
    assert rc["eval.attacks"] == ()
    assert rc["ablate.seeds"] == (3, 4)


@pytest.mark.parametrize("over", [{"nope.key": "1"}, {"train.batch_size": "eight"},
                                  {"train.finetune_randaug": "maybe"}])
def test_bad_values_rejected(over):
    with pytest.raises(ConfigError):
        RunConfig.resolve(overrides=over)


def test_unknown_profile_and_malformed_file(tmp_path):
    with pytest.raises(ConfigError):
        RunConfig.resolve(profile="huge")
    with pytest.raises(ConfigError):
        parse_lines("just words\n")


def test_builders_carry_values():
    rc = RunConfig.resolve(overrides={"run.seed": "5", "attack.alpha": "0.2", "train.attack": "morph"})
    tc = rc.train_config(32, 32)
    assert tc.seed == 5 and tc.net.seed == 5 and tc.attack == "morph"
    assert tc.attack_cfg.alpha == 0.2
    assert rc.synth_config().seed == 5
    with pytest.raises(ConfigError):
        RunConfig.resolve(overrides={"train.lambda_l": "-1"}).train_config(32, 32)


def test_ablation_axes():
    rc = RunConfig.resolve(overrides={"ablate.axes": "train.attack=random-bias|bias;attack.w=0.5|0"})
    assert rc.ablation_axes() == {"attack": ["random-bias", "bias"], "attack_cfg.w": [0.5, 0.0]}
    with pytest.raises(ConfigError):
        RunConfig.resolve(overrides={"ablate.axes": "synth.count=1|2"}).ablation_axes()
    with pytest.raises(ConfigError):
        RunConfig.resolve(overrides={"ablate.axes": "bogus=1"}).ablation_axes()
