"""Command-line experiment runner.

Every subcommand reads an optional JSON scenario file (``--config``), takes
all randomness from ``--seed`` and writes its outputs plus a
``manifest.json`` into ``--out``. Exit codes: 0 success, 1 bad config or
malformed input file, 2 failure while running.

Scenario keys and defaults are listed in ``DEFAULTS``; nested sections
(``dims``, ``channel``, ``rls``, ``sca``, ``ssca``, ``train``, ``online``,
``overhead``) are merged key by key. An unknown key anywhere is an error.
"""

import argparse
import copy
import csv
import hashlib
import json
import platform
import sys
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, fields
from pathlib import Path

import numpy as np
import jax
import jax.numpy as jnp

from . import __version__
from .beamforming import (
    SscaConfig, analog_for_users, initial_precoder, quantize_phases, sca_digital, ssca_outer,
    zf_digital,
)
from .channel import ChannelParams, SystemDims, equivalent_channel, make_sampler, received_pilot, save_channels
from .errors import ConfigError, JcehbError, NonFiniteLoss, SchemaError
from .estimation import ls_estimate, orthogonal_pilots, random_pilots, rls_estimate
from .metrics import OverheadInputs, nmse, overhead_table, stream_rates, write_overhead_csv
from .numerics import crandn, substream
from .training import (
    OnlineConfig, TrainConfig, channel_stream, online_schedule, save_checkpoint, train_blackbox,
    train_stage1, train_stage2, transfer_finetune, write_trace_csv,
)
from .unfolding import (
    blackbox_digital, cedun_forward, hbdun_digital, init_blackbox, init_cedun, init_hbdun, load_params,
)
from .unfolding.params import random_phases

EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME = 0, 1, 2

DEFAULTS = {
    "profile": "desk",
    "dims": {},
    "channel": {},
    "snr_db": 10.0,
    "snr_grid": [10.0],
    "estimation": "rls",
    "beamforming": "sca",
    "analog": "auto",
    "scheme": "offline",
    "n_channels": 100,
    "n_seeds": 1,
    "pilot_length": 16,
    "pilots": "orthogonal",
    "quantize_bits": None,
    "checkpoint": None,
    "finetune_from": None,
    "resume": None,
    "checkpoint_every": 0,
    "workers": 1,
    "rls": {"beta": 0.99, "delta": 1e-2},
    "sca": {"I_max": 50, "tol": 1e-6},
    "ssca": {},
    "train": {},
    "online": {},
    "overhead": {"q": 8, "L": 16, "T_f": 16, "T_s": 10, "N_sample": 100, "frames": list(range(1, 17))},
}

CHOICES = {
    "profile": ("desk", "large"),
    "estimation": ("ls", "rls", "cedun"),
    "beamforming": ("sca", "zf", "hbdun", "blackbox"),
    "analog": ("auto", "random", "ssca", "checkpoint"),
    "scheme": ("single", "offline", "online"),
    "pilots": ("orthogonal", "random"),
}

# nested sections whose keys come from a dataclass
_SECTION_TYPES = {"dims": SystemDims, "channel": ChannelParams, "ssca": SscaConfig,
                  "train": TrainConfig, "online": OnlineConfig}


# -- scenario --------------------------------------------------------------------

def _field_names(cls):
    return {f.name for f in fields(cls)}


def load_scenario(path=None, overrides=None):
    """Defaults merged with the JSON file at ``path`` and ``overrides``."""
    cfg = copy.deepcopy(DEFAULTS)
    layers = []
    if path is not None:
        try:
            with open(path) as fh:
                layers.append(json.load(fh))
        except FileNotFoundError:
            raise ConfigError(f"config file {path} does not exist") from None
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config file {path} is not valid JSON: {exc}") from None
    if overrides:
        layers.append(overrides)
    for layer in layers:
        if not isinstance(layer, dict):
            raise ConfigError("scenario must be a JSON object")
        for key, value in layer.items():
            if key not in DEFAULTS:
                raise ConfigError(f"unknown config key '{key}'")
            if isinstance(DEFAULTS[key], dict):
                if not isinstance(value, dict):
                    raise ConfigError(f"config key '{key}' must be an object")
                allowed = _field_names(_SECTION_TYPES[key]) if key in _SECTION_TYPES else set(DEFAULTS[key])
                for sub in value:
                    if sub not in allowed:
                        raise ConfigError(f"unknown config key '{key}.{sub}'")
                cfg[key].update(value)
            else:
                cfg[key] = value
    validate(cfg)
    return cfg


def validate(cfg):
    for key, options in CHOICES.items():
        if cfg[key] not in options:
            raise ConfigError(f"config key '{key}' must be one of {options}, got {cfg[key]!r}")
    for key in ("n_channels", "n_seeds", "pilot_length", "workers", "checkpoint_every"):
        v = cfg[key]
        if not isinstance(v, int) or isinstance(v, bool) or v < 0:
            raise ConfigError(f"config key '{key}' must be a non-negative integer")
    if cfg["workers"] < 1:
        raise ConfigError("config key 'workers' must be at least 1")
    if not isinstance(cfg["snr_grid"], list):
        raise ConfigError("config key 'snr_grid' must be a list")
    qb = cfg["quantize_bits"]
    if qb is not None and (not isinstance(qb, int) or qb < 1):
        raise ConfigError("config key 'quantize_bits' must be null or a positive integer")
    for key in ("checkpoint", "finetune_from", "resume"):
        p = cfg[key]
        if p is not None and not Path(p).exists():
            raise ConfigError(f"config key '{key}': file {p} does not exist")
    if cfg["analog"] == "checkpoint" and cfg["checkpoint"] is None:
        raise ConfigError("config key 'analog' is 'checkpoint' but 'checkpoint' is not set")
    # construct every typed section once so bad values surface as config errors
    for key in ("channel", "ssca", "train", "online"):
        _build(key, cfg)
    system_dims(cfg, cfg["snr_db"])


def _build(key, cfg, **extra):
    cls = _SECTION_TYPES[key]
    values = dict(cfg[key])
    values.update(extra)
    for k in ("aoa_range", "aod_range"):
        if k in values:
            values[k] = tuple(values[k])
    try:
        return cls(**values)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"config section '{key}': {exc}") from None


def system_dims(cfg, snr_db):
    base = SystemDims.desk() if cfg["profile"] == "desk" else SystemDims.large()
    d = asdict(base)
    d.update(cfg["dims"])
    d.pop("sigma2")
    if "sigma2" in cfg["dims"]:
        d["sigma2"] = tuple(np.atleast_1d(cfg["dims"]["sigma2"]))
        try:
            return SystemDims(**d)
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"config section 'dims': {exc}") from None
    try:
        return SystemDims.from_snr(float(snr_db), **d)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"config section 'dims': {exc}") from None


def train_config(cfg, seed):
    return _build("train", cfg, seed=seed)


def config_hash(cfg):
    return hashlib.sha256(json.dumps(cfg, sort_keys=True).encode()).hexdigest()


def write_manifest(out, command, cfg, seed, outputs):
    manifest = {
        "command": command,
        "seed": seed,
        "config": cfg,
        "config_sha256": config_hash(cfg),
        "versions": {"jcehb": __version__, "python": platform.python_version(),
                     "numpy": np.__version__, "jax": jax.__version__},
        "outputs": sorted(outputs),
    }
    with open(Path(out) / "manifest.json", "w") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")


# -- randomness ------------------------------------------------------------------

_PURPOSE = {"channels": 11, "noise": 12, "phases": 13, "pilots": 14, "ssca": 15, "init": 16}


def rng_for(seed, purpose, *keys):
    return substream(seed, _PURPOSE[purpose], *keys)


# -- baseline chain --------------------------------------------------------------

def _stores(cfg):
    if cfg["checkpoint"] is None:
        return {}
    stores, _ = load_params(cfg["checkpoint"])
    return stores


def _trained(stores, name, cfg):
    if name in stores:
        return stores[name]
    if cfg["checkpoint"] is not None:
        raise ConfigError(f"checkpoint {cfg['checkpoint']} has no '{name}' store")
    return None


def analog_phases(cfg, dims, seed, sampler, stores):
    """Phases for the chain: from a checkpoint, random, or SSCA-optimized.
    ``auto`` takes the checkpoint's phases when there is one."""
    if cfg["analog"] == "checkpoint" or (cfg["analog"] == "auto" and stores):
        for name in ("hbdun", "blackbox"):
            if name in stores:
                return stores[name]["Psi_F"], stores[name]["Psi_W"]
        raise ConfigError("checkpoint holds no analog phases")
    phi_F, phi_W = random_phases(dims, rng_for(seed, "phases"))
    if cfg["analog"] == "ssca":
        res = ssca_outer(sampler, dims, _build("ssca", cfg), phi_F, phi_W, rng_for(seed, "ssca"))
        phi_F, phi_W = res.phi_F, res.phi_W
    return phi_F, phi_W


def conventional_pilots(cfg, dims, seed):
    L = cfg["pilot_length"]
    if cfg["pilots"] == "orthogonal":
        try:
            return orthogonal_pilots(dims.K, dims.Nt_rf, L, dims.P)
        except ValueError as exc:
            raise ConfigError(f"config key 'pilot_length': {exc}") from None
    return random_pilots(rng_for(seed, "pilots"), dims.Nt_rf, L, dims.P, lead=(dims.K,))


def run_chain(cfg, dims, H, phi_F, phi_W, stores, seed, snr_index):
    """Estimate, beamform and score one channel batch; returns per-sample
    ``(sum_rate, nmse)`` arrays."""
    if cfg["quantize_bits"] is not None:
        phi_F = quantize_phases(phi_F, cfg["quantize_bits"])
        phi_W = quantize_phases(phi_W, cfg["quantize_bits"])
    F_RF, W_RF = analog_for_users(np.asarray(phi_F), np.asarray(phi_W), dims.K)
    H_eq = equivalent_channel(H, F_RF, W_RF)
    s2 = dims.sigma2_array
    noise_rng = rng_for(seed, "noise", snr_index)
    if cfg["estimation"] == "cedun":
        ce = _trained(stores, "cedun", cfg)
        if ce is None:
            ce = init_cedun(dims, cfg["pilot_length"], rng_for(seed, "init"))
        noise = crandn(noise_rng, H.shape[:-1] + (np.shape(ce["pilots"])[-1],))
        H_hat = np.asarray(cedun_forward(ce, H_eq, H, F_RF, W_RF, s2, noise=noise, P=dims.P,
                                         delta=cfg["rls"]["delta"]))
    else:
        X = conventional_pilots(cfg, dims, seed)
        Y = received_pilot(H_eq, H, F_RF, W_RF, X, s2, rng=noise_rng, P=dims.P)
        if cfg["estimation"] == "ls":
            H_hat = ls_estimate(Y, X)
        else:
            H_hat = rls_estimate(X, Y, **cfg["rls"])
    if cfg["beamforming"] == "sca":
        res = sca_digital(H_hat, F_RF, s2, initial_precoder(F_RF, dims.Ns, H.shape[:-3]), **cfg["sca"])
        F_BB, W_BB = res.F_BB, res.W_BB
    elif cfg["beamforming"] == "zf":
        F_BB, W_BB = zf_digital(H_hat, F_RF, s2, dims.Ns)
    elif cfg["beamforming"] == "hbdun":
        hb = _trained(stores, "hbdun", cfg)
        if hb is None:
            hb = init_hbdun(dims, train_config(cfg, seed).hb_layers, rng_for(seed, "init"))
        tc = train_config(cfg, seed)
        F_BB, W_BB = hbdun_digital(hb, H_hat, F_RF, s2, mode=tc.mode, alpha=tc.alpha)
    else:
        bb = _trained(stores, "blackbox", cfg)
        if bb is None:
            bb = init_blackbox(dims, rng_for(seed, "init"))
        F_BB, W_BB = blackbox_digital(bb, jnp.asarray(H_hat), jnp.asarray(F_RF), dims.Ns)
    rate = np.asarray(stream_rates(np.asarray(F_BB), np.asarray(W_BB), H_eq, W_RF, s2, dims.P)).sum(axis=(-2, -1))
    err = nmse(H_hat, H_eq, axis=(-3, -2, -1))
    return rate, err


BASELINE_COLUMNS = ("seed", "snr_db", "sum_rate", "nmse")


def baseline_rows(cfg, seed0):
    """One row per (seed, SNR) point, mean over ``n_channels`` channels."""
    stores = _stores(cfg)
    points = [(seed0 + s, i, snr) for s in range(cfg["n_seeds"]) for i, snr in enumerate(cfg["snr_grid"])]
    channel = _build("channel", cfg)

    def one(point):
        seed, i, snr = point
        dims = system_dims(cfg, snr)
        sampler = make_sampler(dims, channel)
        H = sampler(rng_for(seed, "channels"), cfg["n_channels"])
        phi_F, phi_W = analog_phases(cfg, dims, seed, sampler, stores)
        rate, err = run_chain(cfg, dims, H, phi_F, phi_W, stores, seed, i)
        return seed, float(snr), float(np.mean(rate)), float(np.mean(err))

    if cfg["n_channels"] == 0:
        return []
    with ThreadPoolExecutor(max_workers=cfg["workers"]) as pool:
        return list(pool.map(one, points))


def write_rows(path, columns, rows):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(columns)
        for row in rows:
            w.writerow([repr(v) if isinstance(v, float) else v for v in row])


# -- subcommands -----------------------------------------------------------------

def cmd_sample_channels(args, cfg):
    dims = system_dims(cfg, cfg["snr_db"])
    channel = _build("channel", cfg)
    H = make_sampler(dims, channel)(rng_for(args.seed, "channels"), cfg["n_channels"])
    save_channels(Path(args.out) / "channels.csv", H, dims, channel, args.seed)
    return ["channels.csv"]


def cmd_run_baseline(args, cfg):
    write_rows(Path(args.out) / "baseline.csv", BASELINE_COLUMNS, baseline_rows(cfg, args.seed))
    return ["baseline.csv"]


def _initial_stores(cfg, dims, seed):
    tc = train_config(cfg, seed)
    rng = rng_for(seed, "init")
    if cfg["beamforming"] == "blackbox":
        return {"blackbox": init_blackbox(dims, rng)}
    hb = init_hbdun(dims, tc.hb_layers, rng)
    return {"cedun": init_cedun(dims, tc.ce_layers, rng), "hbdun": hb}


def _chunks(start, total, every):
    """``(start_step, n_steps)`` pieces covering ``[start, total)``."""
    every = every or max(total - start, 1)
    out = []
    s = start
    while s < total:
        n = min(every, total - s)
        out.append((s, n))
        s += n
    return out


def cmd_train(args, cfg):
    out = Path(args.out)
    dims = system_dims(cfg, cfg["snr_db"])
    sampler = make_sampler(dims, _build("channel", cfg))
    tc = train_config(cfg, args.seed)
    stage, step = "stage1", 0
    if cfg["resume"] is not None:
        stores, meta = load_params(cfg["resume"])
        stage, step = meta.get("stage", "stage1"), int(meta.get("step", 0))
    elif cfg["finetune_from"] is not None:
        stores, _ = load_params(cfg["finetune_from"])
    else:
        stores = _initial_stores(cfg, dims, args.seed)
    ck = out / "checkpoint.bin"
    trace = []

    def checkpoint(st, stp):
        save_checkpoint(ck, stores, tc, stp, st, {"scheme": cfg["scheme"]})

    if cfg["finetune_from"] is not None and cfg["resume"] is None:
        res = transfer_finetune(tc, sampler, stores, dims)
        stores = dict(stores, **res.params)
        trace += res.trace
        checkpoint("done", 0)
    elif cfg["beamforming"] == "blackbox":
        for s, n in _chunks(step, tc.steps_stage1, cfg["checkpoint_every"]):
            res = train_blackbox(tc, sampler, stores["blackbox"], dims, steps=n, start_step=s)
            stores["blackbox"] = res.params
            trace += res.trace
            checkpoint("blackbox", s + n)
        if not trace:
            checkpoint("blackbox", step)
    elif cfg["scheme"] == "online":
        online = _build("online", cfg)
        stream = channel_stream(sampler, args.seed, online)
        stores, frame_means, rows = online_schedule(tc, online, stream, stores, dims)
        trace += rows
        write_rows(out / "online_rates.csv", ("frame", "mean_sum_rate"), list(enumerate(frame_means)))
        checkpoint("online", len(rows))
    else:
        if stage == "stage1":
            for s, n in _chunks(step, tc.steps_stage1, cfg["checkpoint_every"]):
                res = train_stage1(tc, sampler, stores["hbdun"], dims, steps=n, start_step=s)
                stores["hbdun"] = res.params
                trace += res.trace
                checkpoint("stage1", s + n)
            stage, step = "stage2", 0
        if cfg["scheme"] == "offline" and stage == "stage2":
            for s, n in _chunks(step, tc.steps_stage2, cfg["checkpoint_every"]):
                res = train_stage2(tc, sampler, stores["hbdun"], stores["cedun"], dims, steps=n, start_step=s)
                stores.update(res.params)
                trace += res.trace
                checkpoint("stage2", s + n)
        if not trace:
            checkpoint(stage, step)
    write_trace_csv(out / "trace.csv", trace)
    outputs = ["checkpoint.bin", "trace.csv"]
    if cfg["scheme"] == "online" and cfg["beamforming"] != "blackbox" and cfg["finetune_from"] is None:
        outputs.append("online_rates.csv")
    return outputs


EVAL_COLUMNS = ("seed", "snr_db", "sample", "sum_rate", "nmse")


def cmd_evaluate(args, cfg):
    if cfg["checkpoint"] is None:
        raise ConfigError("evaluate needs config key 'checkpoint'")
    stores = _stores(cfg)
    channel = _build("channel", cfg)
    rows = []
    for i, snr in enumerate(cfg["snr_grid"]):
        dims = system_dims(cfg, snr)
        sampler = make_sampler(dims, channel)
        H = sampler(rng_for(args.seed, "channels"), cfg["n_channels"]) if cfg["n_channels"] else None
        if H is None:
            continue
        phi_F, phi_W = analog_phases(dict(cfg, analog="checkpoint"), dims, args.seed, sampler, stores)
        rate, err = run_chain(cfg, dims, H, phi_F, phi_W, stores, args.seed, i)
        rows += [(args.seed, float(snr), n, float(r), float(e)) for n, (r, e) in enumerate(zip(rate, err))]
    write_rows(Path(args.out) / "evaluation.csv", EVAL_COLUMNS, rows)
    return ["evaluation.csv"]


def cmd_overhead(args, cfg):
    o = cfg["overhead"]
    dims = system_dims(cfg, cfg["snr_db"])
    try:
        inp = OverheadInputs(q=o["q"], L=o["L"], T_f=o["T_f"], T_s=o["T_s"], N_sample=o["N_sample"], dims=dims)
    except ValueError as exc:
        raise ConfigError(f"config section 'overhead': {exc}") from None
    write_overhead_csv(Path(args.out) / "overhead.csv", overhead_table(inp, o["frames"]))
    return ["overhead.csv"]


# figure id -> (x column, y columns); inputs are grouped by x and each
# y column becomes one mean/std series per input file
FIGURES = {
    "rate-vs-snr": ("snr_db", ("sum_rate",)),
    "nmse-vs-snr": ("snr_db", ("nmse",)),
    "overhead": ("frames", ("single", "offline", "online")),
    "training": ("step", ("mean_sum_rate",)),
    "online": ("frame", ("mean_sum_rate",)),
}


def read_table(path, needed):
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        raise SchemaError(f"{path}: empty file")
    header = rows[0]
    missing = [c for c in needed if c not in header]
    if missing:
        raise SchemaError(f"{path}: missing column(s) {missing}")
    idx = [header.index(c) for c in needed]
    table = []
    for n, row in enumerate(rows[1:], start=2):
        try:
            table.append([float(row[i]) for i in idx])
        except (IndexError, ValueError):
            raise SchemaError(f"{path}: line {n} does not match the header") from None
    return np.array(table, dtype=float).reshape(-1, len(needed))


def figure_data(paths, figure):
    """Series ``{name: (x, mean, std)}`` aggregated across rows sharing x."""
    if figure not in FIGURES:
        raise ConfigError(f"unknown figure id '{figure}'; expected one of {sorted(FIGURES)}")
    xcol, ycols = FIGURES[figure]
    stems = [Path(p).stem for p in paths]
    series = {}
    for p, stem in zip(paths, stems):
        if stems.count(stem) > 1:
            stem = f"{Path(p).parent.name}.{stem}"
        t = read_table(p, (xcol,) + ycols)
        xs = np.unique(t[:, 0])
        for j, y in enumerate(ycols, start=1):
            name = stem if len(ycols) == 1 else f"{stem}.{y}"
            mean = np.array([t[t[:, 0] == x, j].mean() for x in xs])
            std = np.array([t[t[:, 0] == x, j].std() for x in xs])
            series[name] = (xs, mean, std)
    return series


def write_figure(path, series):
    """Plain text: one ``x`` column, then ``<series>_mean <series>_std`` pairs;
    series with different x grids are written as separate blocks."""
    with open(path, "w") as fh:
        for name, (x, mean, std) in series.items():
            fh.write(f"# series {name}\n")
            fh.write(f"x {name}_mean {name}_std\n")
            for row in zip(x, mean, std):
                fh.write(" ".join(repr(float(v)) for v in row) + "\n")
            fh.write("\n")


def cmd_figure(args, cfg):
    if not args.inputs:
        raise ConfigError("figure needs at least one --input file")
    for p in args.inputs:
        if not Path(p).exists():
            raise ConfigError(f"input file {p} does not exist")
    name = f"figure_{args.figure}.dat"
    write_figure(Path(args.out) / name, figure_data(args.inputs, args.figure))
    return [name]


COMMANDS = {
    "sample-channels": cmd_sample_channels,
    "run-baseline": cmd_run_baseline,
    "train": cmd_train,
    "evaluate": cmd_evaluate,
    "overhead": cmd_overhead,
    "figure": cmd_figure,
}


def build_parser():
    parser = argparse.ArgumentParser(prog="jcehb", description="Hybrid beamforming and channel estimation experiments.")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", help="JSON scenario file")
        p.add_argument("--seed", type=int, default=0)
        p.add_argument("--out", required=True, help="output directory")
        p.add_argument("--set", action="append", default=[], metavar="KEY=JSON",
                       help="override a top-level scenario key, e.g. --set n_channels=10")
        if name == "figure":
            p.add_argument("--figure", required=True, help=f"one of {sorted(FIGURES)}")
            p.add_argument("--input", dest="inputs", action="append", default=[])
    return parser


def _overrides(items):
    out = {}
    for item in items:
        key, sep, value = item.partition("=")
        if not sep:
            raise ConfigError(f"--set expects KEY=VALUE, got '{item}'")
        try:
            out[key] = json.loads(value)
        except json.JSONDecodeError:
            out[key] = value
    return out


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        cfg = load_scenario(args.config, _overrides(args.set))
        Path(args.out).mkdir(parents=True, exist_ok=True)
        outputs = COMMANDS[args.command](args, cfg)
        write_manifest(args.out, args.command, cfg, args.seed, outputs)
    except (ConfigError, SchemaError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except NonFiniteLoss as exc:
        print(f"error: training aborted: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    except (JcehbError, ValueError, np.linalg.LinAlgError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
