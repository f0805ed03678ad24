import csv
import json
import subprocess
import sys

import numpy as np
import pytest

from prism import trainer as tr
from prism.cli import build_parser, main
from prism.data_store import load_csv

TINY = {
    "L": 12,
    "H": 4,
    "model": {"d": 8, "n_heads": 2, "n_enc_layers": 1, "graph_widths": [8, 8], "dec_widths": [16]},
    "max_epochs": 1,
    "denoise_steps": 20,
    "batch_size": 16,
}


@pytest.fixture(scope="module")
def work(tmp_path_factory):
    d = tmp_path_factory.mktemp("cli")
    assert main(["synth", "--kind", "coupled_rd", "--D", "4", "--T", "300", "--seed", "1", "--out", str(d / "rd.csv")]) == 0
    (d / "c.json").write_text(json.dumps(TINY))
    assert main(["train", "--config", str(d / "c.json"), "--data", str(d / "rd.csv"), "--holdout", "30",
                 "--out", str(d / "m.bin"), "--log", str(d / "log.jsonl")]) == 0
    return d


def rows(path):
    return list(csv.reader(open(path)))


def test_synth_shapes(tmp_path):
    assert main(["synth", "--kind", "shifted_pairs", "--D", "4", "--T", "250", "--header", "--out", str(tmp_path / "s.csv")]) == 0
    r = rows(tmp_path / "s.csv")
    assert len(r) == 251 and len(r[0]) == 4 and not r[0][0].replace(".", "").lstrip("-").isdigit()


def test_train_writes_checkpoint_and_log(work):
    state = tr.load_state(work / "m.bin")
    assert state.config.L == 12 and state.config.max_epochs == 1
    lines = (work / "log.jsonl").read_text().splitlines()
    assert lines and all(json.loads(x) for x in lines)


def test_train_flags_override_config(tmp_path, work):
    out = tmp_path / "m.bin"
    assert main(["train", "--config", str(work / "c.json"), "--data", str(work / "rd.csv"), "--holdout", "30",
                 "--seed", "7", "--no-denoise", "--variant", "no_pde", "--out", str(out)]) == 0
    cfg = tr.load_state(out).config
    assert cfg.seed == 7 and not cfg.denoise_enabled and cfg.weights.lambda_pde == 0.0 and cfg.L == 12


def test_train_twice_is_byte_identical(tmp_path, work):
    args = ["train", "--config", str(work / "c.json"), "--data", str(work / "rd.csv"), "--holdout", "30", "--seed", "7"]
    assert main(args + ["--out", str(tmp_path / "a.bin")]) == 0
    assert main(args + ["--out", str(tmp_path / "b.bin")]) == 0
    assert (tmp_path / "a.bin").read_bytes() == (tmp_path / "b.bin").read_bytes()


def test_infer_matches_library(tmp_path, work):
    assert main(["infer", "--checkpoint", str(work / "m.bin"), "--data", str(work / "rd.csv"), "--end", "200",
                 "--out", str(tmp_path / "f.csv")]) == 0
    got = np.array(rows(tmp_path / "f.csv"), dtype=float)
    expect = tr.infer(tr.load_state(work / "m.bin"), load_csv(work / "rd.csv").values[:201])
    assert got.shape == (4, 4) and np.array_equal(got, expect)


def test_eval_modes(tmp_path, work):
    assert main(["eval", "--checkpoint", str(work / "m.bin"), "--data", str(work / "rd.csv"), "--holdout", "30",
                 "--out", str(tmp_path / "e.json")]) == 0
    rep = json.loads((tmp_path / "e.json").read_text())
    assert set(rep) == {"mse", "mae", "per_step"} and len(rep["per_step"]) == 4
    np.savetxt(tmp_path / "p.csv", np.ones((3, 2)), delimiter=",")
    np.savetxt(tmp_path / "t.csv", np.zeros((3, 2)), delimiter=",")
    assert main(["eval", "--pred", str(tmp_path / "p.csv"), "--truth", str(tmp_path / "t.csv"), "--out", str(tmp_path / "d.json")]) == 0
    assert json.loads((tmp_path / "d.json").read_text())["mse"] == 1.0


def test_graph_and_stability(tmp_path, work, capsys):
    g = tmp_path / "g.json"
    assert main(["graph", "--data", str(work / "rd.csv"), "--W", "40", "--tau", "0.3", "--out", str(g)]) == 0
    obj = json.loads(g.read_text())
    A = np.array(obj["A"])
    assert A.shape == (4, 4) and np.array_equal(A, A.T)
    rep = tmp_path / "s.json"
    assert main(["stability", "--adjacency", str(g), "--kappa", "0.3", "--gamma", "0.2", "--out", str(rep)]) == 0
    r = json.loads(rep.read_text())
    assert r["rho_M"] <= 0.8 + 1e-12 and r["contractive"]
    assert "rho(M)" in capsys.readouterr().out
    assert main(["stability", "--adjacency", str(g), "--checkpoint", str(work / "m.bin"), "--out", str(rep)]) == 0


def test_denoise_command(tmp_path, work):
    out = tmp_path / "dn.csv"
    ck = tmp_path / "dn.bin"
    assert main(["denoise", "--data", str(work / "rd.csv"), "--checkpoint", str(ck), "--fit-steps", "20",
                 "--seg-len", "12", "--holdout", "30", "--out", str(out)]) == 0
    src = load_csv(work / "rd.csv").values
    got = np.array(rows(out), dtype=float)
    assert got.shape == src.shape and np.array_equal(got[-30:], src[-30:])
    assert not np.array_equal(got[:-30], src[:-30])
    again = tmp_path / "dn2.csv"
    assert main(["denoise", "--data", str(work / "rd.csv"), "--checkpoint", str(ck), "--holdout", "30", "--out", str(again)]) == 0
    assert again.read_bytes() == out.read_bytes()


def test_spectrum_command(tmp_path):
    t = np.arange(64)
    truth = np.stack([np.sin(2 * np.pi * 4 * t / 64), np.cos(2 * np.pi * 6 * t / 64)], axis=1)
    np.savetxt(tmp_path / "t.csv", truth, delimiter=",")
    np.savetxt(tmp_path / "p.csv", 0.9 * truth, delimiter=",")
    assert main(["spectrum", "--truth", str(tmp_path / "t.csv"), "--pred", str(tmp_path / "p.csv"), "--out-dir", str(tmp_path / "o")]) == 0
    rep = json.loads((tmp_path / "o" / "report.json").read_text())
    assert set(rep) == {"ch0", "ch1"} and all(ch["fundamental_match"] for ch in rep.values())
    assert len(list((tmp_path / "o").glob("*_truth.csv"))) == 2


def test_ablate_command(tmp_path, work):
    cfg = dict(TINY, denoise_steps=5)
    (tmp_path / "c.json").write_text(json.dumps(cfg))
    out = tmp_path / "ab.csv"
    assert main(["ablate", "--config", str(tmp_path / "c.json"), "--data", str(work / "rd.csv"), "--holdout", "30", "--out", str(out)]) == 0
    r = rows(out)
    assert len(r) == 7 and r[1][0] == "full" and float(r[1][4]) == 0.0 and float(r[1][5]) == 0.0
    assert sorted(x[0] for x in r[1:]) == sorted(tr.VARIANTS)


# ------------------------------------------------------------------ errors and help


def test_exit_codes(tmp_path, work, capsys):
    assert main(["train", "--data", str(tmp_path / "missing.csv"), "--out", str(tmp_path / "x.bin")]) == 3
    (tmp_path / "bad.csv").write_text("1,2\n3,oops\n")
    assert main(["graph", "--data", str(tmp_path / "bad.csv"), "--out", str(tmp_path / "g.json")]) == 3
    assert "row 2" in capsys.readouterr().err
    assert main(["eval", "--out", str(tmp_path / "e.json")]) == 2
    g = tmp_path / "g.json"
    main(["graph", "--data", str(work / "rd.csv"), "--out", str(g)])
    assert main(["stability", "--adjacency", str(g), "--out", str(tmp_path / "s.json")]) == 2
    (tmp_path / "c.json").write_text(json.dumps({"L": 12, "bogus": 3}))
    assert main(["train", "--config", str(tmp_path / "c.json"), "--data", str(work / "rd.csv"), "--out", str(tmp_path / "x.bin")]) == 3
    assert main(["train", "--no-such-flag"]) == 2
    assert main(["bogus"]) == 2


def test_every_subcommand_help_lists_defaults():
    parser = build_parser()
    sub = next(a for a in parser._actions if a.__class__.__name__ == "_SubParsersAction")
    assert set(sub.choices) == {"synth", "denoise", "graph", "train", "infer", "eval", "stability", "spectrum", "ablate"}
    for name, p in sub.choices.items():
        fmt = p._get_formatter()
        for action in p._actions:
            if action.dest == "help":
                continue
            assert action.help, (name, action.dest)
            if not action.required:
                assert "%(default)" in fmt._get_help_string(action), (name, action.dest)
        assert "(default:" in p.format_help()


def test_module_entry_point():
    out = subprocess.run([sys.executable, "-m", "prism", "--help"], capture_output=True, text=True)
    assert out.returncode == 0 and "stability" in out.stdout
