import json

import pytest

from stimtrain.cli import main
from stimtrain.config import (
    PRESETS,
    config_from_dict,
    config_to_dict,
    dump_config,
    load_config,
    parse_override,
    valid_keys,
)
from stimtrain.errors import ConfigError

TINY = [
    "--set", "data.source=synth",
    "--set", "data.synth.samples_per_class=12",
    "--set", "data.synth.test_per_class=6",
    "--set", "data.synth.size=8",
    "--set", "model.stage_blocks=[1,1]",
    "--set", "batch_size=40",
]


@pytest.mark.parametrize("name", ["ct", "st", "st_klminus_snet6", "st_sitrans", "stpp_a1", "st_klminus_snet6_sitrans"])
def test_presets_load(name):
    cfg = PRESETS[name].config()
    assert cfg.mode in ("ct", "st", "st_pp")
    assert PRESETS[name].description


def test_preset_ladder_features():
    ct, st, kl6, sit, a1 = (PRESETS[n].config() for n in ("ct", "st", "st_klminus_snet6", "st_sitrans", "stpp_a1"))
    assert ct.k_subnets == 0 and st.k_subnets == 1
    assert kl6.loss.variant == "kl_minus" and kl6.k_subnets == 6
    assert sit.mode == "st_pp"
    assert a1.mode == "st_pp" and a1.k_subnets == 6 and a1.loss.variant == "kl_minus"
    assert a1.sampling.choices is not None


def test_empty_file_with_preset(tmp_path):
    path = tmp_path / "empty.json"
    path.write_text("")
    cfg = load_config(path, preset="ct")
    assert config_to_dict(cfg) == config_to_dict(PRESETS["ct"].config())
    path.write_text('{"preset": "st", "epochs": 4}')
    cfg = load_config(path, ["loss.lambda=0.5"])
    assert cfg.mode == "st" and cfg.epochs == 4 and cfg.loss.lam == 0.5


def test_round_trip_closure(tmp_path):
    cfg = load_config(None, ["model.stage_blocks=[2,2]", "sampling.choices=[1,2]", "input.l_min=3"], "stpp_a1")
    path = tmp_path / "resolved.json"
    path.write_text(dump_config(cfg))
    again = load_config(path)
    assert config_to_dict(again) == config_to_dict(cfg)
    assert dump_config(again) == dump_config(cfg)
    assert config_to_dict(config_from_dict(config_to_dict(cfg))) == config_to_dict(cfg)


def test_errors_name_dotted_keys():
    with pytest.raises(ConfigError) as exc:
        load_config(None, ["optim.lr=fast"])
    assert exc.value.key == "optim.lr"
    with pytest.raises(ConfigError) as exc:
        load_config(None, ["model.stage_blocks=[1,2.5]"])
    assert exc.value.key == "model.stage_blocks[1]"
    with pytest.raises(ConfigError) as exc:
        load_config(None, ["sampling.choices=[1,1,1,1]"])
    assert "sampling.choices" in str(exc.value) and "model.stage_blocks" in str(exc.value)
    with pytest.raises(ConfigError) as exc:
        load_config(None, ["nonsense.key=1"])
    assert "optim.lr" in str(exc.value)
    with pytest.raises(ConfigError):
        load_config(None, preset="nope")


def test_parse_override():
    assert parse_override("epochs=3") == ("epochs", 3)
    assert parse_override("loss.variant=kl_minus") == ("loss.variant", "kl_minus")
    assert parse_override("model.stage_blocks=[1, 2]") == ("model.stage_blocks", [1, 2])
    with pytest.raises(ConfigError):
        parse_override("epochs")
    assert "loss.lambda" in valid_keys() and "data.synth.size" in valid_keys()


def test_cli_enumerate_space(tmp_path, capsys):
    code = main(["enumerate-space", "--set", "model.stage_blocks=[2,2]", "--set", "sampling.choices=[2,2]",
                 "--out", str(tmp_path)])
    assert code == 0
    assert capsys.readouterr().out.split() == ["1,1", "1,2", "2,1", "2,2"]
    assert (tmp_path / "resolved_config.json").exists()


def test_cli_exit_codes(tmp_path, capsys):
    assert main(["enumerate-space", "--set", "bogus=1", "--out", str(tmp_path)]) == 1
    assert "valid keys" in capsys.readouterr().err
    assert main(["enumerate-space", "--set", "sampling.choices=[1]", "--out", str(tmp_path)]) == 1
    assert main(["no-such-command"]) == 1
    assert main(["eval", "--ckpt", str(tmp_path / "missing.stpp"), "--out", str(tmp_path)] + TINY) == 2


def test_cli_train_is_deterministic(tmp_path, capsys):
    runs = []
    for name in ("a", "b"):
        out = tmp_path / name
        assert main(["train", "--preset", "ct", "--set", "epochs=1", "--seed", "0", "--out", str(out)] + TINY) == 0
        runs.append((out / "metrics.jsonl").read_bytes())
        assert (out / "ckpt_final.stpp").exists()
        resolved = json.loads((out / "resolved_config.json").read_text())
        assert resolved["epochs"] == 1 and resolved["seed"] == 0
    assert runs[0] == runs[1]


def test_cli_diagnostics_emit_files(tmp_path, capsys):
    run = tmp_path / "run"
    assert main(["train", "--preset", "st", "--set", "epochs=1", "--out", str(run)] + TINY) == 0
    ckpt = str(run / "ckpt_final.stpp")
    out = tmp_path / "diag"
    assert main(["eval", "--ckpt", ckpt, "--mask", "1,1", "--out", str(out)] + TINY) == 0
    assert json.loads((out / "eval.json").read_text())["mask"] == "1,1"
    assert main(["loafing", "--ckpt", ckpt, "--standalone", f"1,1={ckpt}", "--out", str(out)] + TINY) == 0
    assert (out / "loafing.csv").read_text().startswith("mask,")
    assert main(["amplitude", "--ckpt", ckpt, "--ckpt", ckpt, "--out", str(out)] + TINY) == 0
    assert len((out / "amplitude.csv").read_text().splitlines()) == 2
    assert main(["erf", "--ckpt", ckpt, "--mask", "1,1", "--input-size", "8", "--samples", "4",
                 "--out", str(out)] + TINY) == 0
    assert (out / "erf_1-1_8.pgm").read_text().startswith("P2")
    assert (out / "erf_1-1_8.csv").exists()
    assert main(["bound-check", "--trials", "200", "--metrics", str(run / "metrics.jsonl"), "--out", str(out)]) == 0


def test_cli_gradcheck_passes(tmp_path, capsys):
    assert main(["gradcheck", "--out", str(tmp_path)]) == 0
    lines = capsys.readouterr().out.splitlines()
    assert len(lines) >= 10 and all(line.startswith("PASS") for line in lines)
    assert all(int(line.split(": ")[1].split()[0]) >= 20 for line in lines)
