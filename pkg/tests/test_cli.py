import copy

import yaml
import pytest

from xlctsim.cli import EXIT_CODES, _handle_error, build_parser, main


def _write_config(tmp_path, raw):
    p = tmp_path / "cfg.yaml"
    p.write_text(yaml.safe_dump(raw))
    return str(p)


def test_pipeline_subcommand(tiny_raw, tmp_path, capsys):
    cfg = _write_config(tmp_path, tiny_raw)
    out = tmp_path / "out"
    code = main(["pipeline", "--config", cfg, "--out", str(out)])
    assert code == 0
    printed = capsys.readouterr().out
    assert "pipeline ok" in printed
    assert (out / "manifest.yaml").exists()
    assert (out / "recon_xlct.raw").exists()


def test_stage_subcommands_run_in_order(tiny_raw, tmp_path, capsys):
    cfg = _write_config(tmp_path, tiny_raw)
    out = tmp_path / "out"
    for name in ("phantom", "simulate", "recon-xlct", "recon-ct", "metrics"):
        assert main([name, "--config", cfg, "--out", str(out)]) == 0
    printed = capsys.readouterr().out
    assert "xlct_cnr" in printed
    assert (out / "recon_ct.raw").exists()


def test_seed_override_lands_in_manifest(tiny_raw, tmp_path):
    cfg = _write_config(tmp_path, tiny_raw)
    out = tmp_path / "out"
    assert main(["pipeline", "--config", cfg, "--out", str(out),
                 "--seed", "99"]) == 0
    doc = yaml.safe_load((out / "manifest.yaml").read_text())
    assert doc["seed"] == 99


def test_sweep_subcommand(tiny_raw, tmp_path, capsys):
    cfg = _write_config(tmp_path, tiny_raw)
    out = tmp_path / "out"
    code = main(["sweep", "--config", cfg, "--out", str(out),
                 "--concentrations", "1.0,0.5"])
    assert code == 0
    printed = capsys.readouterr().out
    assert "concentration_uM,cnr" in printed
    assert "first_concentration_below_threshold=" in printed
    assert (out / "sweep.csv").exists()


def test_missing_config_file_exits_2(tmp_path, capsys):
    with pytest.raises(SystemExit) as exc:
        main(["pipeline", "--config", str(tmp_path / "nope.yaml"),
              "--out", str(tmp_path)])
    assert exc.value.code == 2
    assert "not found" in capsys.readouterr().err


def test_yaml_syntax_error_exits_2(tmp_path, capsys):
    p = tmp_path / "bad.yaml"
    p.write_text("phantom: [unclosed\n")
    with pytest.raises(SystemExit) as exc:
        main(["pipeline", "--config", str(p), "--out", str(tmp_path)])
    assert exc.value.code == 2
    assert "line" in capsys.readouterr().err


def test_unknown_key_exits_2(tiny_raw, tmp_path, capsys):
    bad = copy.deepcopy(tiny_raw)
    bad["rotation_speed"] = 3
    cfg = _write_config(tmp_path, bad)
    code = main(["pipeline", "--config", cfg, "--out", str(tmp_path / "o")])
    assert code == 2
    assert "rotation_speed" in capsys.readouterr().err


def test_capacity_error_exits_3(tiny_raw, tmp_path, capsys):
    bad = copy.deepcopy(tiny_raw)
    bad["phantom"]["diameter"] = 500.0
    cfg = _write_config(tmp_path, bad)
    code = main(["phantom", "--config", cfg, "--out", str(tmp_path / "o")])
    assert code == 3
    assert "capacity" in capsys.readouterr().err


def test_exit_code_mapping_covers_degeneracy():
    assert EXIT_CODES == {"validation": 2, "capacity": 3, "degeneracy": 4,
                          "error": 1}
    code = _handle_error(422, {"detail": {"kind": "degeneracy",
                                          "message": "flat"}})
    assert code == 4


def test_parser_has_all_documented_subcommands():
    parser = build_parser()
    sub = next(a for a in parser._actions
               if isinstance(a, type(parser._subparsers._group_actions[0])))
    names = set(sub.choices)
    assert {"phantom", "simulate", "recon-xlct", "recon-ct", "metrics",
            "pipeline", "sweep", "serve"} <= names


def test_flags_accepted_by_every_stage():
    parser = build_parser()
    args = parser.parse_args(["simulate", "--config", "c.yaml", "--out", "o",
                              "--seed", "5", "--threads", "3",
                              "--server", "http://h:1"])
    assert args.seed == 5 and args.threads == 3 and args.server == "http://h:1"
