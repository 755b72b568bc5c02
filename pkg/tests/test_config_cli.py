import csv
import json

import pytest

from harmodt import cli
from harmodt.config import RunConfig, load_config, parse_config_text
from harmodt.exceptions import ConfigurationError


def test_defaults_validate():
    cfg = RunConfig().validate()
    assert cfg.thresh == 25 and cfg.S == 0.2 and cfg.lam == 10.0 and cfg.K == 20
    assert cfg.warmup == cfg.E // 10


def test_paper_scale_values():
    cfg = RunConfig.paper_scale()
    assert (cfg.embed_dim, cfg.n_layer, cfg.n_head) == (256, 6, 8)
    assert (cfg.E, cfg.lr, cfg.batch_size, cfg.t_m, cfg.t_w) == (1_000_000, 3e-4, 256, 5000, 100_000)
    assert (cfg.eta_min, cfg.eta_max, cfg.thresh, cfg.lam, cfg.gn) == (0, 100, 25, 10.0, 5)


def test_file_parsing_and_precedence(tmp_path):
    path = tmp_path / "run.cfg"
    path.write_text("# comment\nE = 400\nlr = 0.002  # inline\nsuite = dir8\n\nseed = 3\n")
    cfg = load_config(path, {"E": "800"}, env={})
    assert (cfg.E, cfg.lr, cfg.suite, cfg.seed) == (800, 0.002, "dir8", 3)
    assert load_config(path, env={"HARMO_SEED": "11"}).seed == 11
    assert load_config(path, {"seed": 5}, env={"HARMO_SEED": "11"}).seed == 11


def test_text_round_trip():
    cfg = RunConfig(E=123, held_out="1,5", lr=0.1 + 0.2)
    assert RunConfig(**parse_config_text(cfg.to_text())) == cfg


@pytest.mark.parametrize("text", ["E 5", "bogus = 1", "E = 1.5", "lr = fast"])
def test_bad_config_lines(text):
    with pytest.raises(ConfigurationError):
        parse_config_text(text)


@pytest.mark.parametrize("change", [dict(S=1.0), dict(algo="x"), dict(t_w=5000), dict(eta_min=5, eta_max=1),
                                    dict(embed_dim=7), dict(held_out="a"), dict(importance="x")])
def test_validation_rejects(change):
    with pytest.raises(ConfigurationError):
        RunConfig(**change).validate()


def test_every_field_is_a_cli_flag():
    parser = cli.build_parser()
    args = parser.parse_args(["train", "--algo", "mtdt", "--n-groups", "3", "--eval_episodes", "7"])
    over = cli._overrides(args, skip=("algo",))
    assert over == {"n_groups": "3", "eval_episodes": "7"}
    from dataclasses import fields
    for f in fields(RunConfig):
        if f.name != "algo":
            assert parser.parse_args(["gen-data", f"--{f.name}", "1"]).__dict__[f.name] == "1"


def test_cli_end_to_end(tiny_cfg, tmp_path, monkeypatch, capsys):
    cfg = tiny_cfg()
    conf = tmp_path / "tiny.cfg"
    conf.write_text(cfg.to_text())
    run = tmp_path / "cli-run"
    assert cli.main(["gen-data", "--config", str(conf)]) == 0
    monkeypatch.setenv("HARMO_SEED", "4")
    assert cli.main(["train", "--config", str(conf), "--algo", "harmodt", "--out", str(run)]) == 0
    assert "seed = 4" in (run / "config.txt").read_text()
    capsys.readouterr()
    assert cli.main(["eval", "--run", str(run), "--protocol", "provided", "--episodes", "2"]) == 0
    out = json.loads(capsys.readouterr().out)
    assert out["protocol"] == "provided" and out["metric"] == "success"
    assert cli.main(["export", "--results", str(run), "--dest", str(tmp_path / "exp")]) == 0
    with open(tmp_path / "exp" / "scores.csv", newline="") as fh:
        rows = list(csv.DictReader(fh))
    assert len(rows) == 8 and rows[0]["protocol"] == "provided"


def test_cli_reports_errors(tmp_path, capsys):
    assert cli.main(["eval", "--run", str(tmp_path), "--protocol", "provided"]) == 2
    assert "not a run directory" in capsys.readouterr().err
    assert cli.main(["train", "--S", "1.5", "--data_dir", str(tmp_path)]) == 2
