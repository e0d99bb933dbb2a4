"""``wisernet`` command line: one subcommand per experiment.

Settings come from (lowest to highest precedence) built-in defaults, an INI
file given with ``--config`` (section ``[common]`` plus a section named after
the subcommand), and command-line flags.  Unknown sections or keys abort.
Every randomized output gets a ``manifest.json`` (or ``<file>.manifest.json``)
recording the resolved settings, seed included.
"""

from __future__ import annotations

import argparse
import configparser
import csv
import io
import json
import os
import shutil
import sys
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import __version__
from .errors import BadConfig, NoInput, WiserError
from .network import NetConfig, audit, avg_kernel_correlation, build, cosine_similarity_diag, load_checkpoint
from .noise import NoiseConfig, derive_seed, gen_correlated_noise, snr_experiment, synthetic_covers
from .spam import MmdConfig, mmd_ratio_experiment
from .srm import K5_INDEX, kernel, load_bank
from .tensor import apply_noise, load_ppm, save_ppm, save_tensor
from .train import TrainConfig, evaluate, load_pairs, split_pairs, synthetic_pairs, train

THREADS_ENV = "WISERNET_THREADS"


@dataclass(frozen=True)
class Key:
    name: str
    type: type
    default: object
    help: str


def _bool(text) -> bool:
    if isinstance(text, bool):
        return text
    low = str(text).strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise BadConfig(f"not a boolean: {text!r}")


def _floats(text) -> tuple:
    if isinstance(text, tuple):
        return text
    try:
        return tuple(float(v) for v in str(text).split(",") if v.strip())
    except ValueError:
        raise BadConfig(f"not a comma-separated list of numbers: {text!r}") from None


_SEED = Key("seed", int, 0, "global seed; every random stream derives from it")
_RATE = Key("rate", float, 0.4, "fraction of pixels changed per band")
_RHO = Key("rho", float, 0.0, "target red-green and red-blue noise correlation")
_COUPLING = Key("coupling", str, "anchored", "correlated-noise sampler: anchored or shared")
_INPUT = Key("input", str, "", "directory of P6 PPM images")
_OUT = Key("out", str, "", "output path")
_TEXTURE = Key("texture", float, 1.0, "fine-texture strength of synthetic covers")
_NET = [
    Key("n", int, 1, "model magnification factor"),
    Key("size", int, 64, "input height and width in pixels"),
    Key("bottom_mode", str, "channelwise", "channelwise, normal, concat or interleave"),
    Key("bottom_learnable", _bool, True, "update the SRM-initialized bottom kernels"),
    Key("dtype", str, "real32", "real32 or real64"),
]

REGISTRY: dict[str, list[Key]] = {
    "gen-noise": [
        _INPUT, _OUT, _RATE, _RHO, _COUPLING, _SEED,
        Key("height", int, 512, "field height when no input directory is given"),
        Key("width", int, 512, "field width when no input directory is given"),
        Key("count", int, 1, "number of fields when no input directory is given"),
    ],
    "embed": [
        _INPUT, _OUT, _RATE, _RHO, _COUPLING, _SEED,
        Key("layout", str, "flat", "flat (stegos only) or pairs (cover/ and stego/ subdirectories)"),
    ],
    "snr": [
        _INPUT, _OUT, _RATE, _COUPLING, _SEED, _TEXTURE,
        Key("rho_grid", _floats, (0.0, 0.3, 1.0), "comma-separated noise correlations"),
        Key("replications", int, 1, "independent repetitions per rho"),
        Key("covers", int, 50, "synthetic covers per repetition"),
        Key("size", int, 256, "synthetic cover height and width"),
        Key("kernel", int, K5_INDEX, "1-based SRM kernel index"),
    ],
    "mmd": [
        _INPUT, _OUT, _RATE, _COUPLING, _SEED,
        Key("texture", float, 6.0, "fine-texture strength of synthetic covers"),
        Key("rho_grid", _floats, (0.0, 0.5, 1.0), "comma-separated noise correlations"),
        Key("replications", int, 1, "independent repetitions per rho"),
        Key("covers", int, 100, "synthetic covers per repetition"),
        Key("size", int, 128, "synthetic cover height and width"),
        Key("kernel", int, K5_INDEX, "1-based SRM kernel index"),
        Key("merge", str, "average", "channel-wise SPAM merge: average or concat"),
        Key("normal_scale", float, 1.0 / 3.0, "scale of the replicated kernel in the normal arm"),
        Key("bandwidth", str, "median", "Gaussian bandwidth: median or a positive number"),
    ],
    "train": [
        Key("data", str, "", "directory with cover/ and stego/ PPM pairs"),
        Key("synthetic", int, 0, "generate this many synthetic pairs instead of reading data"),
        _TEXTURE, _RATE, _SEED,
        Key("out", str, "run", "output directory"),
        Key("val_fraction", float, 0.25, "fraction of pairs held out for validation"),
        *_NET,
        Key("base_lr", float, 0.001, "initial learning rate"),
        Key("power", float, 0.75, "inv schedule power"),
        Key("gamma", float, 0.0001, "inv schedule gamma"),
        Key("weight_decay", float, 0.0005, "L2 weight decay"),
        Key("momentum", float, 0.9, "SGD momentum"),
        Key("batch_size", int, 16, "images per batch"),
        Key("max_iters", int, 5000, "SGD updates"),
        Key("checkpoint_every", int, 10000, "updates between checkpoints"),
        Key("decay_mode", str, "exempt", "exempt (no decay on BN and biases) or global"),
        Key("pair_batching", _bool, True, "keep each cover with its stego in a batch"),
    ],
    "eval": [
        Key("checkpoint", str, "", "checkpoint file"),
        Key("data", str, "", "directory with cover/ and stego/ PPM pairs"),
    ],
    "diagnose": [
        Key("checkpoint", str, "", "checkpoint file"),
        Key("data", str, "", "optional directory with cover/ and stego/ pairs for the S statistics"),
    ],
    "audit": [
        Key("n", int, 9, "model magnification factor"),
        Key("size", int, 512, "input height and width in pixels"),
        _NET[2],
        Key("bottom_learnable", _bool, True, "count the bottom kernels as parameters"),
    ],
}


# ------------------------------------------------------------------ config

def read_config(path, command: str) -> dict:
    parser = configparser.ConfigParser(interpolation=None)
    parser.optionxform = str
    try:
        with open(path, encoding="utf-8") as fh:
            parser.read_file(fh)
    except OSError as exc:
        raise NoInput(f"cannot read config {path}: {exc}") from None
    except configparser.Error as exc:
        raise BadConfig(f"config {path}: {exc}") from None
    known = {k.name: k for k in REGISTRY[command]}
    values = {}
    for section in parser.sections():
        if section not in ("common", *REGISTRY):
            raise BadConfig(f"unknown section [{section}]")
        if section not in ("common", command):
            continue
        for key, raw in parser.items(section):
            if key not in known:
                if section == "common":
                    continue
                raise BadConfig(f"unknown key {key!r} in [{section}]")
            values[key] = raw
    # [common] entries that no subcommand knows are errors too.
    if parser.has_section("common"):
        every = {k.name for keys in REGISTRY.values() for k in keys}
        for key in parser["common"]:
            if key not in every:
                raise BadConfig(f"unknown key {key!r} in [common]")
    return values


def resolve(command: str, args: argparse.Namespace) -> dict:
    raw = read_config(args.config, command) if args.config else {}
    out = {}
    for key in REGISTRY[command]:
        flag = getattr(args, key.name)
        value = flag if flag is not None else raw.get(key.name, key.default)
        try:
            keep = isinstance(key.type, type) and isinstance(value, key.type)
            out[key.name] = value if keep else key.type(value)
        except (TypeError, ValueError):
            raise BadConfig(f"{key.name}: cannot parse {value!r}") from None
    return out


def _write_manifest(path: Path, command: str, settings: dict, **extra) -> None:
    data = {"command": command, "version": __version__, "settings": settings, **extra}
    path.write_text(json.dumps(data, indent=2, sort_keys=True, default=list) + "\n")


def _ppm_files(directory: str) -> list[Path]:
    d = Path(directory)
    if not directory or not d.is_dir():
        raise NoInput(f"input directory {directory!r} does not exist")
    files = sorted(d.glob("*.ppm"))
    if not files:
        raise NoInput(f"no .ppm files in {directory}")
    return files


def _need_out(s: dict) -> Path:
    if not s["out"]:
        raise BadConfig("an output path is required (--out)")
    return Path(s["out"])


def _noise_cfg(s: dict, index: int) -> NoiseConfig:
    return NoiseConfig(s["rate"], s["rho"], derive_seed(s["seed"], index), s["coupling"]).validate()


# -------------------------------------------------------------- commands

def cmd_gen_noise(s: dict) -> int:
    out = _need_out(s)
    if s["input"]:
        jobs = [(p.stem, load_ppm(p).shape) for p in _ppm_files(s["input"])]
    else:
        jobs = [(f"noise_{i:05d}", (s["height"], s["width"])) for i in range(s["count"])]
    out.mkdir(parents=True, exist_ok=True)
    files = []
    for idx, (stem, (h, w)) in enumerate(jobs):
        field = gen_correlated_noise(h, w, _noise_cfg(s, idx))
        save_tensor(field.planes.astype(np.float32), out / f"{stem}.wlt")
        files.append(f"{stem}.wlt")
    _write_manifest(out / "manifest.json", "gen-noise", s, files=files,
                    seed_rule="field i uses derive_seed(seed, i) in sorted input order")
    return 0


def cmd_embed(s: dict) -> int:
    files = _ppm_files(s["input"])
    out = _need_out(s)
    if s["layout"] not in ("flat", "pairs"):
        raise BadConfig("layout must be flat or pairs")
    sdir = out / "stego" if s["layout"] == "pairs" else out
    sdir.mkdir(parents=True, exist_ok=True)
    if s["layout"] == "pairs":
        (out / "cover").mkdir(exist_ok=True)
    for idx, path in enumerate(files):
        cover = load_ppm(path)
        stego = apply_noise(cover, gen_correlated_noise(*cover.shape, _noise_cfg(s, idx)))
        save_ppm(stego, sdir / path.name)
        if s["layout"] == "pairs":
            shutil.copyfile(path, out / "cover" / path.name)
    _write_manifest(out / "manifest.json", "embed", s, files=[p.name for p in files],
                    seed_rule="image i uses derive_seed(seed, i) in sorted input order")
    return 0


def _covers(s: dict, rep_seed: int):
    if s["input"]:
        return [load_ppm(p) for p in _ppm_files(s["input"])]
    return synthetic_covers(s["covers"], s["size"], s["size"], rep_seed, texture=s["texture"])


def _emit_csv(s: dict, command: str, header, rows) -> None:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    w.writerows(rows)
    if s["out"]:
        out = Path(s["out"])
        out.parent.mkdir(parents=True, exist_ok=True)
        out.write_text(buf.getvalue())
        _write_manifest(out.with_name(out.name + ".manifest.json"), command, s)
    else:
        sys.stdout.write(buf.getvalue())


def cmd_snr(s: dict) -> int:
    k = kernel(load_bank(), s["kernel"])
    header = ("rho", "rate", "coupling", "predicted", "measured", "snr_separate", "snr_summed", "n_covers", "seed")
    rows = []
    for rep in range(s["replications"]):
        rep_seed = derive_seed(s["seed"], rep)
        covers = _covers(s, rep_seed)
        for rho in s["rho_grid"]:
            cfg = NoiseConfig(s["rate"], rho, rep_seed, s["coupling"]).validate()
            r = snr_experiment(covers, cfg, k)
            rows.append((f"{rho:g}", f"{s['rate']:g}", s["coupling"], f"{r.predicted_ratio:.6f}",
                         f"{r.measured_ratio:.6f}", f"{r.snr_separate:.6e}", f"{r.snr_summed:.6e}",
                         r.n_covers, rep_seed))
    _emit_csv(s, "snr", header, rows)
    return 0


def cmd_mmd(s: dict) -> int:
    k = kernel(load_bank(), s["kernel"])
    bw = s["bandwidth"]
    mcfg = MmdConfig(bandwidth=bw if bw == "median" else float(bw))
    rows = []
    for rep in range(s["replications"]):
        rep_seed = derive_seed(s["seed"], rep)
        covers = _covers(s, rep_seed)
        for rho in s["rho_grid"]:
            r = mmd_ratio_experiment(covers, s["rate"], rho, k, mcfg, seed=rep_seed, coupling=s["coupling"],
                                     normal_scale=s["normal_scale"], merge=s["merge"])
            rows.append((f"{rho:g}", f"{s['rate']:g}", f"{r.mmd_n:.6f}", f"{r.mmd_c:.6f}",
                         f"{r.ratio:.6f}", r.n_covers, rep_seed))
    _emit_csv(s, "mmd", ("rho", "rate", "mmd_n", "mmd_c", "ratio", "n_covers", "seed"), rows)
    return 0


def _net_cfg(s: dict) -> NetConfig:
    return NetConfig(n=s["n"], input_h=s["size"], input_w=s["size"], bottom_mode=s["bottom_mode"],
                     bottom_learnable=s["bottom_learnable"], dtype=s.get("dtype", "real32"), seed=s["seed"])


def cmd_train(s: dict) -> int:
    if s["synthetic"] > 0:
        pairs = synthetic_pairs(s["synthetic"], s["size"], s["seed"], rate=s["rate"], texture=s["texture"])
    else:
        if not s["data"] or not Path(s["data"]).is_dir():
            raise NoInput(f"data directory {s['data']!r} does not exist")
        pairs = load_pairs(s["data"])
    tr, va = split_pairs(pairs, s["val_fraction"], s["seed"])
    tcfg = TrainConfig(**{k: s[k] for k in ("base_lr", "power", "gamma", "weight_decay", "momentum", "batch_size",
                                            "max_iters", "checkpoint_every", "seed", "decay_mode", "pair_batching")})
    net = build(_net_cfg(s).validate())
    out = Path(s["out"])
    res = train(net, tcfg, tr, va, out_dir=out)
    _write_manifest(out / "manifest.json", "train", s, best_iteration=res.best_iteration,
                    best_val_accuracy=res.best_accuracy, train_pairs=tr.names, val_pairs=va.names)
    print(f"best_iteration={res.best_iteration} val_accuracy={res.best_accuracy:.6f}")
    return 0


def _checkpoint(s: dict):
    if not s["checkpoint"] or not Path(s["checkpoint"]).is_file():
        raise NoInput(f"checkpoint {s['checkpoint']!r} does not exist")
    return load_checkpoint(s["checkpoint"])[0]


def cmd_eval(s: dict) -> int:
    net = _checkpoint(s)
    if not s["data"] or not Path(s["data"]).is_dir():
        raise NoInput(f"data directory {s['data']!r} does not exist")
    print(f"accuracy={evaluate(net, load_pairs(s['data'])):.6f}")
    return 0


def cmd_diagnose(s: dict) -> int:
    net = _checkpoint(s)
    if s["data"]:
        if not Path(s["data"]).is_dir():
            raise NoInput(f"data directory {s['data']!r} does not exist")
        pairs = load_pairs(s["data"])
        rep = cosine_similarity_diag(net, pairs.covers, pairs.stegos)
        print(f"cw_bar={rep.cw_bar:.6f} s_cover={rep.s_cover:.6f} s_stego={rep.s_stego:.6f}")
    else:
        print(f"cw_bar={avg_kernel_correlation(net):.6f}")
    return 0


def cmd_audit(s: dict) -> int:
    a = audit(NetConfig(n=s["n"], input_h=s["size"], input_w=s["size"], bottom_mode=s["bottom_mode"],
                        bottom_learnable=s["bottom_learnable"]))
    for key in ("n", "input", "bottom_mode", "params", "flops", "reported_params", "reported_flops"):
        print(f"{key}={a[key]}")
    print(f"params_ratio={a['params_ratio']:.4f}")
    print(f"flops_ratio={a['flops_ratio']:.4f}")
    print(f"convention={a['convention']}")
    return 0


COMMANDS = {
    "gen-noise": (cmd_gen_noise, "write +-1 noise fields as WLTENSOR files"),
    "embed": (cmd_embed, "add simulated +-1 stego noise to PPM covers"),
    "snr": (cmd_snr, "per-band versus summed SNR over a rho grid (CSV)"),
    "mmd": (cmd_mmd, "SPAM/MMD normal versus channel-wise comparison (CSV)"),
    "train": (cmd_train, "train a network on cover/stego pairs"),
    "eval": (cmd_eval, "accuracy of a checkpoint on cover/stego pairs"),
    "diagnose": (cmd_diagnose, "kernel correlation and cosine-similarity diagnostics"),
    "audit": (cmd_audit, "closed-form parameter and FLOP counts"),
}


def make_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="wisernet", description="Color-image steganalysis toolkit.")
    p.add_argument("--version", action="version", version=__version__)
    sub = p.add_subparsers(dest="command", required=True)
    for name, (_, text) in COMMANDS.items():
        sp = sub.add_parser(name, help=text, description=text + ". Keys may also be set in the INI config.")
        sp.add_argument("--config", help="INI file with [common] and [%s] sections" % name)
        for key in REGISTRY[name]:
            shown = ",".join(f"{v:g}" for v in key.default) if isinstance(key.default, tuple) else key.default
            sp.add_argument("--" + key.name.replace("_", "-"), dest=key.name, default=None, metavar="VALUE",
                            help=f"{key.name}: {key.help} (default: {shown})")
    return p


def _threads():
    raw = os.environ.get(THREADS_ENV)
    if not raw:
        return None
    try:
        count = int(raw)
    except ValueError:
        raise BadConfig(f"{THREADS_ENV} must be an integer, got {raw!r}") from None
    from threadpoolctl import threadpool_limits
    return threadpool_limits(limits=max(1, count))


def main(argv=None) -> int:
    args = make_parser().parse_args(argv)
    try:
        limiter = _threads()
        try:
            return COMMANDS[args.command][0](resolve(args.command, args))
        finally:
            if limiter is not None:
                limiter.unregister()
    except (WiserError, OSError, ValueError) as exc:
        msg = " ".join(str(exc).split())
        print(f"error={type(exc).__name__} message={msg}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
