"""Command-line entry point: ``lordnet {generate,train,detect,sweep}``.

Settings resolve as flag > ``--config`` JSON file > built-in default. Config
keys mirror the long flag names (``snr-db`` or ``snr_db``). Every output
artifact records the resolved settings.

Exit codes: 0 success, 2 usage, 3 validation, 4 numerical or training failure.
"""

import argparse
import json
import logging
import sys

from . import channel, harness
from .baselines import NML_ITERATIONS
from .errors import (ConfigError, ConsistencyError, LordNetError, NumericalError,
                     ValidationError)
from .likelihood import SystemParams
from .training import TrainConfig, train
from .unfolded import Checkpoint, load_checkpoint, save_checkpoint

EXIT_OK, EXIT_USAGE, EXIT_VALIDATION, EXIT_NUMERICAL = 0, 2, 3, 4
ESTIMATES_FORMAT = "lordnet-estimates"
FORMAT_VERSION = 1

log = logging.getLogger("lordnet")

_MODES = {"two-stage": "two_stage", "one-stage": "one_stage", "alternating": "alternating"}
_TRAIN_DEFAULTS = TrainConfig()

DEFAULTS = {
    "generate": {"m": 32, "n": 8, "snr_db": 8.0, "batch": 512, "seed": 0,
                 "channel_file": None, "channel_out": None, "out": None},
    "train": {"data": None, "heldout": None, "mode": "two-stage",
              "layers": _TRAIN_DEFAULTS.L, "delta": _TRAIN_DEFAULTS.delta,
              "lr1": _TRAIN_DEFAULTS.lr_stage1, "lr2": _TRAIN_DEFAULTS.lr_stage2,
              "epochs1": _TRAIN_DEFAULTS.epochs_stage1, "epochs2": _TRAIN_DEFAULTS.epochs_stage2,
              "batch_size": _TRAIN_DEFAULTS.batch_size, "train_c": "off",
              "seed": _TRAIN_DEFAULTS.seed, "out": None, "log": None},
    "detect": {"checkpoint": None, "data": None, "detector": "lordnet", "channel_file": None,
               "step": None, "iters": None, "validation": None, "out": None},
    "sweep": {"axis": None, "m": 32, "n": 8, "snr_db": 8.0, "snr_list": "0,2,4,6,8,10",
              "train_sizes": "32,64,128,256,512,1024,2048", "batch": 512, "trials": 2048,
              "seed": 0, "detector": "lordnet", "channel_file": None, "checkpoint": None,
              "data": None, "mode": "two-stage", "layers": _TRAIN_DEFAULTS.L,
              "delta": _TRAIN_DEFAULTS.delta, "lr1": _TRAIN_DEFAULTS.lr_stage1,
              "lr2": _TRAIN_DEFAULTS.lr_stage2, "epochs1": _TRAIN_DEFAULTS.epochs_stage1,
              "epochs2": _TRAIN_DEFAULTS.epochs_stage2,
              "batch_size": _TRAIN_DEFAULTS.batch_size, "train_c": "off", "out": None},
}
REQUIRED = {"generate": ["out"], "train": ["data", "out"], "detect": ["data", "out"],
            "sweep": ["axis", "out"]}


class UsageError(Exception):
    pass


def _build_parser():
    p = argparse.ArgumentParser(prog="lordnet", description=__doc__.splitlines()[0])
    p.add_argument("--threads", type=int, default=None,
                   help="cap BLAS worker threads (results do not depend on it)")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)
    S = argparse.SUPPRESS

    def common(sp):
        sp.add_argument("--config", default=None, help="JSON file with default settings")

    g = sub.add_parser("generate", help="simulate a labeled one-bit dataset",
                       argument_default=S)
    common(g)
    g.add_argument("--m", type=int)
    g.add_argument("--n", type=int)
    g.add_argument("--snr-db", type=float)
    g.add_argument("--batch", type=int, help="number of samples B")
    g.add_argument("--seed", type=int)
    g.add_argument("--channel-file", help="import H instead of drawing a Rayleigh channel")
    g.add_argument("--channel-out", help="also write the channel matrix here")
    g.add_argument("--out")

    def train_flags(sp):
        sp.add_argument("--mode", choices=sorted(_MODES))
        sp.add_argument("--layers", type=int)
        sp.add_argument("--delta", type=float)
        sp.add_argument("--lr1", type=float)
        sp.add_argument("--lr2", type=float)
        sp.add_argument("--epochs1", type=int)
        sp.add_argument("--epochs2", type=int)
        sp.add_argument("--batch-size", type=int)
        sp.add_argument("--train-c", choices=["on", "off"])
        sp.add_argument("--seed", type=int)

    t = sub.add_parser("train", help="train the unfolded detector", argument_default=S)
    common(t)
    t.add_argument("--data")
    t.add_argument("--heldout", help="labeled dataset for periodic held-out metrics")
    train_flags(t)
    t.add_argument("--out", help="checkpoint path")
    t.add_argument("--log", help="newline-JSON training log (default OUT.log.ndjson)")

    d = sub.add_parser("detect", help="detect symbols in a dataset", argument_default=S)
    common(d)
    d.add_argument("--checkpoint")
    d.add_argument("--data")
    d.add_argument("--detector", choices=["lordnet", "nml", "bruteforce", "relaxed"])
    d.add_argument("--channel-file", help="true channel for coherent baselines")
    d.add_argument("--step", type=float, help="gradient step for nml/relaxed")
    d.add_argument("--iters", type=int, help="iterations for nml/relaxed")
    d.add_argument("--validation", help="labeled dataset for the nml step grid search")
    d.add_argument("--out")

    w = sub.add_parser("sweep", help="Monte-Carlo BER sweep", argument_default=S)
    common(w)
    w.add_argument("--axis", choices=["snr", "train-size", "layer"])
    w.add_argument("--m", type=int)
    w.add_argument("--n", type=int)
    w.add_argument("--snr-db", type=float, help="SNR for the train-size axis")
    w.add_argument("--snr-list", help="comma separated SNRs in dB")
    w.add_argument("--train-sizes", help="comma separated training sizes")
    w.add_argument("--batch", type=int, help="training size for the snr axis")
    w.add_argument("--trials", type=int, help="test vectors per point")
    w.add_argument("--detector", choices=["lordnet", "nml", "bruteforce", "relaxed"])
    w.add_argument("--channel-file")
    w.add_argument("--checkpoint", help="trained checkpoint (layer axis)")
    w.add_argument("--data", help="test dataset (layer axis)")
    train_flags(w)
    w.add_argument("--out", help="output prefix; writes PREFIX.json and PREFIX.csv")
    return p


def _load_config(path):
    if path is None:
        return {}
    try:
        with open(path) as fh:
            doc = json.load(fh)
    except OSError as exc:
        raise UsageError(f"cannot read config {path}: {exc.strerror}") from None
    except json.JSONDecodeError as exc:
        raise UsageError(f"config {path} is not valid JSON: {exc}") from None
    if not isinstance(doc, dict):
        raise UsageError(f"config {path} must be a JSON object")
    return {k.replace("-", "_"): v for k, v in doc.items()}


def resolve(command, flags, config_path=None):
    """Merge defaults, config file and explicit flags (later wins)."""
    defaults = DEFAULTS[command]
    config = _load_config(config_path)
    unknown = set(config) - set(defaults)
    if unknown:
        raise UsageError(f"unknown {command} setting(s) in config: {sorted(unknown)}")
    out = {**defaults, **config, **flags}
    missing = [k for k in REQUIRED[command] if out.get(k) is None]
    if missing:
        raise UsageError("missing required setting(s): "
                         + ", ".join("--" + k.replace("_", "-") for k in missing))
    return out


def _train_config(cfg):
    if cfg["mode"] not in _MODES:
        raise UsageError(f"--mode must be one of {sorted(_MODES)}")
    if cfg["train_c"] not in ("on", "off"):
        raise UsageError("--train-c must be on or off")
    return TrainConfig(L=int(cfg["layers"]), delta=float(cfg["delta"]),
                       lr_stage1=float(cfg["lr1"]), lr_stage2=float(cfg["lr2"]),
                       epochs_stage1=int(cfg["epochs1"]), epochs_stage2=int(cfg["epochs2"]),
                       batch_size=int(cfg["batch_size"]),
                       theta_trainables={"H", "C"} if cfg["train_c"] == "on" else {"H"},
                       mode=_MODES[cfg["mode"]], seed=int(cfg["seed"]))


def cmd_generate(cfg):
    m, n = int(cfg["m"]), int(cfg["n"])
    if cfg["channel_file"]:
        H = channel.import_channel(cfg["channel_file"])
        if H.shape != (m, n):
            raise ValidationError(f"channel file is {H.shape[0]}x{H.shape[1]}, "
                                  f"requested --m {m} --n {n}")
        kind = "imported"
    else:
        H = channel.sample_rayleigh_channel(m, n, int(cfg["seed"]))
        kind = "rayleigh"
    theta = channel.snr_params(H, float(cfg["snr_db"]))
    ds = channel.generate_dataset(theta, B=int(cfg["batch"]), seed=int(cfg["seed"]),
                                  snr_db=float(cfg["snr_db"]), channel_kind=kind)
    ds.provenance = {"command": "generate", "config": cfg}
    channel.save_dataset(ds, cfg["out"])
    if cfg["channel_out"]:
        channel.export_channel(H, cfg["channel_out"])
    meta = ds.meta
    print(f"wrote {cfg['out']}: m={meta.m} n={meta.n} B={meta.B} snr_db={meta.snr_db:g} "
          f"seed={meta.seed} channel={meta.channel_kind}")


def cmd_train(cfg):
    data = channel.load_dataset(cfg["data"])
    heldout = channel.load_dataset(cfg["heldout"]) if cfg["heldout"] else None
    tc = _train_config(cfg)
    result = train(data, tc, heldout)
    extra = {"config": cfg, "train_config": tc.to_dict(), "dataset_meta": vars(data.meta),
             "initial_loss": result.initial_loss, "final_loss": result.final_loss}
    save_checkpoint(cfg["out"], Checkpoint(result.theta, result.phi,
                                           {"H": "H" in tc.theta_trainables,
                                            "C": "C" in tc.theta_trainables}, extra=extra))
    log_path = cfg["log"] or cfg["out"] + ".log.ndjson"
    with open(log_path, "w") as fh:
        fh.write(json.dumps({"event": "config", "format_version": FORMAT_VERSION,
                             "config": cfg, "train_config": tc.to_dict()}) + "\n")
        for rec in result.history:
            fh.write(json.dumps(rec) + "\n")
    print(f"wrote {cfg['out']} and {log_path}: loss {result.initial_loss:.6g} -> "
          f"{result.final_loss:.6g}")


def _coherent_theta(cfg, data, ckpt):
    if cfg["channel_file"]:
        H = channel.import_channel(cfg["channel_file"])
        if H.shape != (data.meta.m, data.meta.n):
            raise ValidationError(f"channel file is {H.shape[0]}x{H.shape[1]}, dataset is "
                                  f"{data.meta.m}x{data.meta.n}")
        if data.sigma is None:
            raise ValidationError("dataset does not record the noise level")
        return SystemParams(H, data.sigma, data.b)
    if ckpt is not None:
        return ckpt.theta
    raise ValidationError(f"--detector {cfg['detector']} needs --channel-file or --checkpoint")


def cmd_detect(cfg):
    data = channel.load_dataset(cfg["data"])
    ckpt = load_checkpoint(cfg["checkpoint"]) if cfg["checkpoint"] else None
    if ckpt is not None and (ckpt.theta.m, ckpt.theta.n) != (data.meta.m, data.meta.n):
        raise ConsistencyError(f"checkpoint is for {ckpt.theta.m}x{ckpt.theta.n}, dataset is "
                               f"{data.meta.m}x{data.meta.n}")
    name = cfg["detector"]
    note = {}
    if name == "lordnet":
        if ckpt is None:
            raise ValidationError("--detector lordnet needs --checkpoint")
        det = harness.LordNetDetector.from_params(ckpt.theta, ckpt.phi)
    else:
        theta = _coherent_theta(cfg, data, ckpt)
        if name == "nml":
            det = harness.NmlDetector(iters=int(cfg["iters"] or NML_ITERATIONS), step=cfg["step"])
            source = channel.load_dataset(cfg["validation"]) if cfg["validation"] else data
            det.fit(source, theta)
            note["step"] = det.step
        elif name == "relaxed":
            kw = {k: v for k, v in (("iters", cfg["iters"]), ("step", cfg["step"])) if v}
            det = harness.RelaxedDetector(**kw).fit(data, theta)
        else:
            det = harness.BruteForceDetector().fit(data, theta)
    est = det.predict(data.r_obs)
    errors, bits = harness.count_errors(est, data.x_true)
    with open(cfg["out"], "w") as fh:
        fh.write(json.dumps({"format": ESTIMATES_FORMAT, "format_version": FORMAT_VERSION,
                             "detector": name, "config": cfg, "B": int(est.shape[0]),
                             "n": int(est.shape[1]), "num_errors": errors, "num_bits": bits,
                             **note}) + "\n")
        for row in est:
            fh.write(" ".join(format(v, "g") for v in row) + "\n")
    print(f"wrote {cfg['out']}: detector={name} BER={errors / bits!r} "
          f"({errors}/{bits} errors)")


def _floats(text, what):
    if isinstance(text, (list, tuple)):
        return [float(v) for v in text]
    try:
        return [float(v) for v in str(text).split(",") if v.strip()]
    except ValueError:
        raise UsageError(f"--{what} must be a comma separated list of numbers") from None


def cmd_sweep(cfg):
    axis = cfg["axis"]
    if axis not in ("snr", "train-size", "layer"):
        raise UsageError(f"unknown axis {axis!r}; choose snr, train-size or layer")
    if axis == "layer":
        if not (cfg["checkpoint"] and cfg["data"]):
            raise UsageError("--axis layer needs --checkpoint and --data")
        ckpt = load_checkpoint(cfg["checkpoint"])
        test = channel.load_dataset(cfg["data"])
        if (ckpt.theta.m, ckpt.theta.n) != (test.meta.m, test.meta.n):
            raise ConsistencyError("checkpoint and dataset dimensions differ")
        report = harness.per_layer_ber(ckpt.theta, ckpt.phi, test,
                                       {"detector_name": "lordnet", "seed": test.meta.seed,
                                        "config": cfg})
    else:
        H = channel.import_channel(cfg["channel_file"]) if cfg["channel_file"] else None
        sc = harness.SweepConfig(int(cfg["m"]), int(cfg["n"]), int(cfg["batch"]),
                                 int(cfg["seed"]), H)
        det = harness.make_detector(cfg["detector"], _train_config(cfg)
                                    if cfg["detector"] == "lordnet" else None)
        if axis == "snr":
            report = harness.sweep_snr(det, _floats(cfg["snr_list"], "snr-list"),
                                       int(cfg["trials"]), sc)
        else:
            sizes = [int(b) for b in _floats(cfg["train_sizes"], "train-sizes")]
            report = harness.sweep_train_size(det, sizes, float(cfg["snr_db"]),
                                              int(cfg["trials"]), sc)
        report.context["config"] = cfg
    report.to_json(cfg["out"] + ".json")
    report.to_csv(cfg["out"] + ".csv")
    for p in report.points:
        print(f"{report.axis}={p.axis_value:g} ber={p.ber:.6g} ({p.num_errors}/{p.num_bits})")
    print(f"wrote {cfg['out']}.json and {cfg['out']}.csv")


COMMANDS = {"generate": cmd_generate, "train": cmd_train, "detect": cmd_detect,
            "sweep": cmd_sweep}


def _exit_code(exc):
    if isinstance(exc, (UsageError, ConfigError)):
        return EXIT_USAGE
    if isinstance(exc, NumericalError):
        return EXIT_NUMERICAL
    if isinstance(exc, (LordNetError, ValueError, OSError)):
        return EXIT_VALIDATION
    raise exc


def main(argv=None):
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return exc.code if isinstance(exc.code, int) else EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    flags = {k: v for k, v in vars(args).items()
             if k not in ("command", "config", "threads", "verbose")}
    try:
        cfg = resolve(args.command, flags, args.config)
        cfg["threads"] = args.threads
        if args.threads is not None:
            from threadpoolctl import threadpool_limits
            with threadpool_limits(limits=args.threads):
                COMMANDS[args.command](cfg)
        else:
            COMMANDS[args.command](cfg)
    except Exception as exc:
        code = _exit_code(exc)
        print(f"lordnet {args.command}: error: {exc}", file=sys.stderr)
        if code == EXIT_NUMERICAL and getattr(exc, "epoch", None) is not None:
            print(f"  stage={exc.stage} epoch={exc.epoch}", file=sys.stderr)
        return code
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
