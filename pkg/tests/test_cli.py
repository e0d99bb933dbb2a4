import json
import re
import shutil
from pathlib import Path

import numpy as np
import pytest

from wisernet.cli import REGISTRY, main, make_parser, read_config, resolve
from wisernet.errors import BadConfig
from wisernet.noise import synthetic_covers
from wisernet.tensor import load_ppm, load_tensor, save_ppm

README = Path(__file__).resolve().parents[1] / "README.md"


def run(capsys, *argv):
    code = main([str(a) for a in argv])
    out = capsys.readouterr()
    return code, out.out, out.err


def tree_bytes(root: Path) -> dict:
    return {str(p.relative_to(root)): p.read_bytes() for p in sorted(root.rglob("*")) if p.is_file()}


@pytest.fixture
def covers_dir(tmp_path):
    d = tmp_path / "covers"
    d.mkdir()
    for i, im in enumerate(synthetic_covers(3, 16, 16, 5)):
        save_ppm(im, d / f"c{i}.ppm")
    return d


def rerun_identical(capsys, tmp_path, argv, out_name):
    """Run twice with the same settings; return both (stdout, files) snapshots."""
    snaps = []
    for _ in range(2):
        target = tmp_path / out_name
        if target.is_dir():
            shutil.rmtree(target)
        code, out, err = run(capsys, *argv)
        assert code == 0, err
        files = tree_bytes(target) if target.is_dir() else ({"f": target.read_bytes()} if target.exists() else {})
        snaps.append((out, files))
    return snaps


# ------------------------------------------------------------- subcommands

def test_gen_noise(capsys, tmp_path):
    a, b = rerun_identical(capsys, tmp_path, ["gen-noise", "--out", tmp_path / "n", "--height", 8, "--width", 6,
                                              "--count", 2, "--rho", 0.5, "--seed", 3], "n")
    assert a == b
    f = load_tensor(tmp_path / "n" / "noise_00001.wlt")
    assert f.shape == (3, 8, 6) and set(np.unique(f)) <= {-1.0, 0.0, 1.0}
    manifest = json.loads((tmp_path / "n" / "manifest.json").read_text())
    assert manifest["settings"]["seed"] == 3


def test_embed_pairs_layout(capsys, tmp_path, covers_dir):
    argv = ["embed", "--input", covers_dir, "--out", tmp_path / "e", "--layout", "pairs", "--seed", 1]
    a, b = rerun_identical(capsys, tmp_path, argv, "e")
    assert a == b
    c, s = load_ppm(tmp_path / "e" / "cover" / "c0.ppm"), load_ppm(tmp_path / "e" / "stego" / "c0.ppm")
    assert c == load_ppm(covers_dir / "c0.ppm")
    assert np.abs(c.bands.astype(int) - s.bands.astype(int)).max() == 1


def test_embed_rate_zero_is_identity(capsys, tmp_path, covers_dir):
    assert run(capsys, "embed", "--input", covers_dir, "--out", tmp_path / "e", "--rate", 0)[0] == 0
    assert (tmp_path / "e" / "c1.ppm").read_bytes() == (covers_dir / "c1.ppm").read_bytes()


def test_missing_input_is_no_input(capsys, tmp_path):
    code, _, err = run(capsys, "embed", "--input", tmp_path / "nope", "--out", tmp_path / "e")
    assert code == 1 and "error=NoInput" in err


def test_snr_csv(capsys):
    argv = ["snr", "--covers", 3, "--size", 32, "--rho-grid", "0,1", "--replications", 2]
    code, out, _ = run(capsys, *argv)
    assert code == 0
    lines = out.splitlines()
    assert lines[0] == "rho,rate,coupling,predicted,measured,snr_separate,snr_summed,n_covers,seed"
    assert len(lines) == 1 + 2 * 2
    assert lines[1].split(",")[3] == "0.333333"
    assert run(capsys, *argv)[1] == out


def test_mmd_csv_and_manifest(capsys, tmp_path):
    argv = ["mmd", "--covers", 10, "--size", 24, "--out", tmp_path / "m.csv"]
    a, b = rerun_identical(capsys, tmp_path, argv, "m.csv")
    assert a == b
    lines = (tmp_path / "m.csv").read_text().splitlines()
    assert lines[0] == "rho,rate,mmd_n,mmd_c,ratio,n_covers,seed"
    assert [ln.split(",")[0] for ln in lines[1:]] == ["0", "0.5", "1"]
    manifest = json.loads((tmp_path / "m.csv.manifest.json").read_text())
    assert manifest["settings"]["seed"] == 0 and manifest["command"] == "mmd"


def test_train_eval_diagnose(capsys, tmp_path):
    run_dir = tmp_path / "run"
    argv = ["train", "--synthetic", 4, "--size", 16, "--batch-size", 2, "--max-iters", 2,
            "--checkpoint-every", 1, "--out", run_dir, "--val-fraction", 0.5]
    a, b = rerun_identical(capsys, tmp_path, argv, "run")
    assert a == b
    assert sorted(p.name for p in run_dir.glob("ckpt_*")) == [f"ckpt_{i:08d}.wlck" for i in range(3)]

    data = tmp_path / "data"
    for sub in ("cover", "stego"):
        (data / sub).mkdir(parents=True)
    for i, im in enumerate(synthetic_covers(2, 16, 16, 0)):
        save_ppm(im, data / "cover" / f"{i}.ppm")
        save_ppm(im, data / "stego" / f"{i}.ppm")
    code, out, _ = run(capsys, "eval", "--checkpoint", run_dir / "best.wlck", "--data", data)
    assert code == 0
    acc = float(re.fullmatch(r"accuracy=(\S+)\n", out).group(1))
    assert 0.0 <= acc <= 1.0
    code, out, _ = run(capsys, "diagnose", "--checkpoint", run_dir / "ckpt_00000000.wlck")
    assert code == 0 and out == "cw_bar=1.000000\n"
    code, out, _ = run(capsys, "diagnose", "--checkpoint", run_dir / "ckpt_00000000.wlck", "--data", data)
    assert out.startswith("cw_bar=1.000000 s_cover=") and "s_stego=" in out


def test_train_zero_iterations_single_checkpoint(capsys, tmp_path):
    code, _, err = run(capsys, "train", "--synthetic", 4, "--size", 16, "--batch-size", 2, "--max-iters", 0,
                       "--out", tmp_path / "r")
    assert code == 0, err
    assert [p.name for p in (tmp_path / "r").glob("ckpt_*")] == ["ckpt_00000000.wlck"]


def test_train_missing_data(capsys, tmp_path):
    code, _, err = run(capsys, "train", "--data", tmp_path / "nope", "--out", tmp_path / "r")
    assert code == 1 and "error=NoInput" in err


def test_eval_missing_checkpoint(capsys, tmp_path):
    code, _, err = run(capsys, "eval", "--checkpoint", tmp_path / "x.wlck", "--data", tmp_path)
    assert code == 1 and "error=NoInput" in err


def test_audit(capsys):
    code, out, _ = run(capsys, "audit")
    assert code == 0
    kv = dict(line.split("=", 1) for line in out.splitlines())
    assert kv["params"] == "4663284" and kv["flops"] == "34722637714"
    assert run(capsys, "audit")[1] == out


# ------------------------------------------------------------------ config

def ns(command, *argv):
    return make_parser().parse_args([command, *argv])


def test_config_precedence(tmp_path):
    cfg = tmp_path / "c.ini"
    cfg.write_text("[common]\nseed = 7\nrate = 0.2\n\n[snr]\nrate = 0.3\ncovers = 9\n")
    s = resolve("snr", ns("snr", "--config", str(cfg), "--covers", "11"))
    assert s["seed"] == 7          # common section
    assert s["rate"] == 0.3        # command section beats common
    assert s["covers"] == 11       # flag beats file
    assert s["size"] == 256        # default
    assert resolve("snr", ns("snr"))["rho_grid"] == (0.0, 0.3, 1.0)


def test_common_keys_of_other_commands_are_ignored(tmp_path):
    cfg = tmp_path / "c.ini"
    cfg.write_text("[common]\nbase_lr = 0.5\n\n[train]\nmax_iters = 3\n")
    assert read_config(cfg, "snr") == {}
    assert read_config(cfg, "train") == {"base_lr": "0.5", "max_iters": "3"}


@pytest.mark.parametrize("text", ["[snr]\nbogus = 1\n", "[common]\nbogus = 1\n", "[weird]\nseed = 1\n",
                                  "[snr]\ncovers = many\n", "no section\n"])
def test_bad_config_rejected(capsys, tmp_path, text):
    cfg = tmp_path / "c.ini"
    cfg.write_text(text)
    with pytest.raises(BadConfig):
        resolve("snr", ns("snr", "--config", str(cfg)))
    code, _, err = run(capsys, "snr", "--config", cfg)
    assert code == 1 and "error=BadConfig" in err


def test_bool_keys(tmp_path):
    assert resolve("train", ns("train", "--pair-batching", "no"))["pair_batching"] is False
    with pytest.raises(BadConfig):
        resolve("train", ns("train", "--pair-batching", "maybe"))


# ------------------------------------------------------- docs versus parser

def help_flags(command):
    sub = next(a for a in make_parser()._actions if a.dest == "command").choices[command]
    text = sub.format_help()
    return set(re.findall(r"--([a-z][a-z-]*)", text)) - {"help", "config"}


@pytest.mark.parametrize("command", sorted(REGISTRY))
def test_help_lists_every_key(command):
    assert help_flags(command) == {k.name.replace("_", "-") for k in REGISTRY[command]}


def test_readme_documents_every_key():
    text = README.read_text()
    for command, keys in REGISTRY.items():
        m = re.search(rf"^### `{re.escape(command)}`\n(.*?)(?=^### |^## |\Z)", text, re.S | re.M)
        assert m, f"README lacks a section for {command}"
        documented = set(re.findall(r"`--([a-z][a-z-]*)`", m.group(1)))
        assert documented == {k.name.replace("_", "-") for k in keys}, command
