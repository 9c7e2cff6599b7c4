"""Command-line front end: corpus generation, training, enhancement, VAD
inspection, evaluation, threshold ablation, and gradient checking.

One binary, seven subcommands. Every subcommand accepts --seed and an
optional --config key=value file (explicit flags win over file values,
unknown keys are rejected), and logs its fully resolved configuration.
Exit codes: 0 success, 1 runtime failure, 2 usage error. DNE_LOG
={error,info,debug} sets verbosity.
"""

import argparse
import logging
import os
import sys

import numpy as np

from dne import corpus as corpus_mod
from dne import dsp, metrics, trainer
from dne.embedding import DneExtractor
from dne.enhance import Blstm, Ddae, UNet
from dne.nncore import (
    BatchNorm,
    BiLstm,
    Conv2d,
    ConvTranspose2d,
    Dense,
    Lstm,
    Tensor,
    bce_loss,
    grad_check,
    mse_loss,
)
from dne.vad import VadModel

log = logging.getLogger("dne")

GRADCHECK_TOL = 1e-4

REQUIRED = object()

# "lambda" is reserved in Python, so the gradient weight lives in dest "lam".
FLAG_NAMES = {"lam": "--lambda"}
FILE_KEY_ALIASES = {"lambda": "lam"}

CHOICES = {
    ("train", "backbone"): ("unet", "ddae", "blstm"),
    ("train", "dne"): ("off", "sn", "cn", "dne"),
    ("enhance", "backbone"): ("unet", "ddae", "blstm"),
    ("enhance", "dne"): ("on", "off", "sn", "cn"),
    ("ablate-eta", "backbone"): ("unet", "ddae", "blstm"),
    ("evaluate", "split"): ("train", "test", "all"),
    ("evaluate", "format"): ("table", "json"),
}

_COMMON = {"seed": (int, 0), "config": (str, None)}

SPECS = {
    "mix": {
        **_COMMON,
        "out_dir": (str, REQUIRED),
        "n_train": (int, 200),
        "n_test": (int, 40),
    },
    "train": {
        **_COMMON,
        "manifest": (str, REQUIRED),
        "backbone": (str, "unet"),
        "dne": (str, "dne"),
        "eta": (float, 0.3),
        "lam": (float, 1.0),
        "epochs": (int, 30),
        "batch_size": (int, 4),
        "lr_se": (float, 1e-3),
        "lr_vad": (float, 1e-2),
        "val_fraction": (float, 0.1),
        "warm_start_epochs": (int, 0),
        "out_dir": (str, REQUIRED),
        "resume": (str, None),
    },
    "enhance": {
        **_COMMON,
        "model": (str, None),
        "input": (str, REQUIRED),
        "output": (str, REQUIRED),
        "backbone": (str, None),
        "dne": (str, None),
        "eta": (float, None),
        "identity_mask": (bool, False),
    },
    "vad": {
        **_COMMON,
        "model": (str, None),
        "input": (str, REQUIRED),
        "output": (str, None),
    },
    "evaluate": {
        **_COMMON,
        "manifest": (str, REQUIRED),
        "model": (str, None),
        "identity_mask": (bool, False),
        "split": (str, "test"),
        "format": (str, "table"),
        "output": (str, None),
    },
    "ablate-eta": {
        **_COMMON,
        "manifest": (str, REQUIRED),
        "etas": (str, "0.2,0.3,0.4,0.5,1.0"),
        "backbone": (str, "unet"),
        "epochs": (int, 30),
        "lam": (float, 1.0),
        "out_dir": (str, REQUIRED),
    },
    "gradcheck": {
        **_COMMON,
        "sample": (int, 6),
    },
}


class UsageError(Exception):
    pass


def _validated(config):
    """Range errors on user-supplied values are usage errors, not crashes."""
    try:
        return config.validate()
    except ValueError as exc:
        raise UsageError(str(exc)) from exc


def _setup_logging():
    levels = {"error": logging.ERROR, "info": logging.INFO, "debug": logging.DEBUG}
    level = levels.get(os.environ.get("DNE_LOG", "info"), logging.INFO)
    logging.basicConfig(level=level, format="%(levelname)s %(message)s", stream=sys.stderr, force=True)


def _coerce(key, value, typ):
    if typ is bool:
        lowered = str(value).lower()
        if lowered in ("1", "true", "yes"):
            return True
        if lowered in ("0", "false", "no"):
            return False
        raise UsageError(f"config key {key!r}: expected a boolean, got {value!r}")
    try:
        return typ(value)
    except ValueError as exc:
        raise UsageError(f"config key {key!r}: {exc}") from exc


def _read_config_file(path, spec):
    if not os.path.exists(path):
        raise UsageError(f"config file not found: {path}")
    values = {}
    with open(path, encoding="utf-8") as f:
        for lineno, line in enumerate(f, 1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            if "=" not in line:
                raise UsageError(f"{path}:{lineno}: expected key=value, got {line!r}")
            key, _, value = line.partition("=")
            key = FILE_KEY_ALIASES.get(key.strip(), key.strip())
            if key not in spec or key == "config":
                raise UsageError(f"{path}:{lineno}: unknown config key {key!r}")
            values[key] = _coerce(key, value.strip(), spec[key][0])
    return values


def resolve_config(command, args):
    """Merge flag values over config-file values over defaults."""
    spec = SPECS[command]
    file_values = {}
    if args.get("config"):
        file_values = _read_config_file(args["config"], spec)
    resolved = {}
    for key, (typ, default) in spec.items():
        if key == "config":
            resolved[key] = args.get("config")
            continue
        if args.get(key) is not None:
            resolved[key] = args[key]
        elif key in file_values:
            resolved[key] = file_values[key]
        elif default is REQUIRED:
            flag = FLAG_NAMES.get(key, "--" + key.replace("_", "-"))
            raise UsageError(f"missing required option {flag}")
        else:
            resolved[key] = default
    for key, value in resolved.items():
        allowed = CHOICES.get((command, key))
        if allowed and value is not None and value not in allowed:
            flag = FLAG_NAMES.get(key, "--" + key.replace("_", "-"))
            raise UsageError(f"{flag} must be one of {', '.join(allowed)} (got {value!r})")
    for key in sorted(resolved):
        if key != "config":
            log.info("config %s=%s", key, resolved[key])
    return resolved


def _load_or_build_model(cfg, default_backbone="unet", default_dne="dne"):
    """A trained model from --model, or a fresh seeded one from flags."""
    alias = {"on": "dne"}
    want_dne = alias.get(cfg.get("dne"), cfg.get("dne"))
    if cfg.get("model"):
        model = trainer.load_model(cfg["model"])
        if cfg.get("backbone") and cfg["backbone"] != model.config.backbone:
            raise UsageError(
                f"checkpoint backbone is {model.config.backbone!r}, not {cfg['backbone']!r}"
            )
        if want_dne and want_dne != model.config.dne:
            raise UsageError(f"checkpoint dne mode is {model.config.dne!r}, not {want_dne!r}")
        if cfg.get("eta") is not None:
            model.config.eta = cfg["eta"]
            _validated(model.config)
        return model
    config = _validated(trainer.TrainConfig(
        backbone=cfg.get("backbone") or default_backbone,
        dne=want_dne or default_dne,
        eta=cfg["eta"] if cfg.get("eta") is not None else 0.3,
        seed=cfg["seed"],
    ))
    log.info("no checkpoint given; using untrained weights (seed %d)", cfg["seed"])
    return trainer.JointModel(config)


def cmd_mix(cfg):
    parent = os.path.dirname(os.path.abspath(cfg["out_dir"])) or "."
    if not os.path.isdir(parent):
        raise UsageError(f"parent directory does not exist: {parent}")
    ccfg = corpus_mod.CorpusConfig(
        out_dir=cfg["out_dir"], n_train=cfg["n_train"], n_test=cfg["n_test"]
    )
    manifest = corpus_mod.generate_synthetic_corpus(ccfg, cfg["seed"])
    print(manifest.path())
    return 0


def _train_config_from(cfg):
    return _validated(trainer.TrainConfig(
        backbone=cfg["backbone"],
        dne=cfg["dne"],
        eta=cfg["eta"],
        lam=cfg["lam"],
        lr_se=cfg["lr_se"],
        lr_vad=cfg["lr_vad"],
        epochs=cfg["epochs"],
        batch_size=cfg["batch_size"],
        seed=cfg["seed"],
        out_dir=cfg["out_dir"],
        val_fraction=cfg["val_fraction"],
        warm_start_epochs=cfg["warm_start_epochs"],
    ))


def cmd_train(cfg):
    manifest = corpus_mod.load_manifest(cfg["manifest"])
    tconfig = _train_config_from(cfg)
    if tconfig.dne == "dne" and tconfig.eta == 1.0:
        log.info("eta=1.0: posteriors are randomized; the detector is bypassed for frame selection")
    result = trainer.train(manifest, tconfig, resume=cfg["resume"], info=log.info)
    print(result.best_path)
    return 0


def cmd_enhance(cfg):
    model = _load_or_build_model(cfg)
    noisy = dsp.read_wav(cfg["input"])
    out = trainer.enhance_waveform(model, noisy, identity_mask=cfg["identity_mask"])
    dsp.write_wav(cfg["output"], out)
    print(cfg["output"])
    return 0


def cmd_vad(cfg):
    model = _load_or_build_model(cfg, default_dne="off")
    noisy = dsp.read_wav(cfg["input"])
    post = trainer.vad_posteriors(model, noisy)
    lines = "".join(f"{i}\t{p:.6f}\n" for i, p in enumerate(post))
    if cfg["output"]:
        with open(cfg["output"], "w", encoding="utf-8") as f:
            f.write(lines)
    else:
        sys.stdout.write(lines)
    return 0


def cmd_evaluate(cfg):
    manifest = corpus_mod.load_manifest(cfg["manifest"])
    train_e, test_e = corpus_mod.split_entries(manifest)
    entries = {"train": train_e, "test": test_e, "all": manifest.entries}[cfg["split"]]

    if cfg["identity_mask"] or not cfg["model"]:
        if not cfg["identity_mask"]:
            raise UsageError("need --model or --identity-mask")
        enhance_fn = None
        log.info("identity mask: scoring the unmodified noisy signal")
    else:
        model = trainer.load_model(cfg["model"])
        enhance_fn = lambda noisy: trainer.enhance_waveform(model, noisy)

    report = metrics.evaluate_corpus(manifest, enhance_fn, entries=entries)
    rendered = report.to_json() if cfg["format"] == "json" else report.to_table()
    if cfg["output"]:
        with open(cfg["output"], "w", encoding="utf-8") as f:
            f.write(rendered + "\n")
    else:
        print(rendered)
    for path, message in report.errors:
        log.error("skipped %s: %s", path, message)
    return 1 if report.errors else 0


def cmd_ablate_eta(cfg):
    manifest = corpus_mod.load_manifest(cfg["manifest"])
    try:
        etas = [float(v) for v in cfg["etas"].split(",") if v.strip()]
    except ValueError as exc:
        raise UsageError(f"bad --etas list: {exc}") from exc
    if not etas:
        raise UsageError("empty --etas list")

    _, test_entries = corpus_mod.split_entries(manifest)
    reports = {}
    for eta in etas:
        if eta == 1.0:
            log.info("eta=1.0: posteriors are randomized; the detector is bypassed for frame selection")
        tconfig = _validated(trainer.TrainConfig(
            backbone=cfg["backbone"],
            dne="dne",
            eta=eta,
            lam=cfg["lam"],
            epochs=cfg["epochs"],
            seed=cfg["seed"],
            out_dir=os.path.join(cfg["out_dir"], f"eta_{eta:g}"),
        ))
        log.info("training eta=%g", eta)
        result = trainer.train(manifest, tconfig, info=log.info)
        model = trainer.load_model(result.best_path)
        enhance_fn = lambda noisy, m=model: trainer.enhance_waveform(m, noisy)
        reports[eta] = metrics.evaluate_corpus(manifest, enhance_fn, entries=test_entries)

    lines = ["noise\tsnr_db\tmetric\t" + "\t".join(f"eta_{e:g}" for e in etas)]
    keys = sorted({k for r in reports.values() for k in r.aggregates()})
    for kind, snr in keys:
        for metric in ("stoi", "ssnr"):
            cells = [f"{reports[e].aggregates()[(kind, snr)][metric]:.4f}" for e in etas]
            lines.append(f"{kind}\t{snr:g}\t{metric}\t" + "\t".join(cells))
    for metric, fn in (("stoi", "mean_stoi"), ("ssnr", "mean_ssnr")):
        cells = [f"{getattr(reports[e], fn)():.4f}" for e in etas]
        lines.append(f"all\tall\t{metric}\t" + "\t".join(cells))
    grid = "\n".join(lines)
    print(grid)
    with open(os.path.join(cfg["out_dir"], "ablation.tsv"), "w", encoding="utf-8") as f:
        f.write(grid + "\n")
    return 0


def gradcheck_suite(seed=0, sample=6):
    """Finite-difference checks for every layer and a toy build of every
    model; returns [(name, GradReport)]."""
    rng = np.random.default_rng(seed)
    f64 = np.float64
    checks = []

    def add(name, module, fn):
        params = dict(module.named_parameters())
        checks.append((name, grad_check(fn, params, sample=sample, rng=np.random.default_rng(seed))))

    dense = Dense(7, 5, activation="tanh", rng=rng, dtype=f64)
    x = Tensor(rng.normal(size=(4, 7)))
    t = Tensor(rng.normal(size=(4, 5)))
    add("dense", dense, lambda: mse_loss(dense(x), t))

    lstm = Lstm(6, 5, layers=2, rng=rng, dtype=f64)
    xl = Tensor(rng.normal(size=(2, 9, 6)))
    tl = Tensor(rng.normal(size=(2, 9, 5)))
    add("lstm", lstm, lambda: mse_loss(lstm(xl), tl))

    bi = BiLstm(5, 4, layers=1, rng=rng, dtype=f64)
    xb = Tensor(rng.normal(size=(1, 7, 5)))
    tb = Tensor(rng.normal(size=(1, 7, 4)))
    add("bilstm", bi, lambda: mse_loss(bi(xb)[0] + bi(xb)[1], tb))

    conv = Conv2d(2, 3, rng=rng, dtype=f64)
    xc = Tensor(rng.normal(size=(1, 2, 8, 8)))
    add("conv2d", conv, lambda: (conv(xc) * conv(xc)).mean())

    convt = ConvTranspose2d(3, 2, rng=rng, dtype=f64)
    xt = Tensor(rng.normal(size=(1, 3, 4, 4)))
    add("conv_transpose2d", convt, lambda: (convt(xt) * convt(xt)).mean())

    bn = BatchNorm(4, dtype=f64)
    xn = Tensor(rng.normal(size=(3, 4, 5)))
    add("batchnorm", bn, lambda: (bn(xn) * xn).mean())

    vad = VadModel(in_dim=6, hidden=5, layers=1, head_hidden=4, rng=rng, dtype=f64)
    xv = Tensor(rng.normal(size=(7, 6)))
    yv = Tensor((rng.random(7) > 0.5).astype(f64))
    add("vad_model", vad, lambda: bce_loss(vad(xv), yv))

    extractor = DneExtractor(128, rng=rng, dtype=f64)
    mag = np.abs(rng.normal(size=(9, 257)))
    post = Tensor(rng.uniform(0.05, 0.95, size=9))
    te = Tensor(rng.normal(size=(9, 128)))
    add("dne_extractor", extractor, lambda: mse_loss(extractor(mag, post, 0.5), te))

    unet = UNet(in_channels=1, channels=(4, 8), bins=8, rng=rng, dtype=f64)
    xu = Tensor(rng.normal(size=(1, 1, 16, 8)))
    tu = Tensor(rng.random((1, 16, 8)))
    add("unet_toy", unet, lambda: mse_loss(unet(xu), tu))

    ddae = Ddae(use_dne=False, hidden=(12, 8), dropout=0.0, rng=rng, dtype=f64)
    xd = Tensor(rng.normal(size=(3, 257)))
    td = Tensor(rng.random((3, 257)))
    add("ddae_toy", ddae, lambda: mse_loss(ddae(xd), td))

    blstm = Blstm(use_dne=False, hidden=4, layers=1, head_hidden=3, rng=rng, dtype=f64)
    xs = Tensor(rng.normal(size=(3, 257)))
    ts = Tensor(rng.random((3, 257)))
    add("blstm_toy", blstm, lambda: mse_loss(blstm(xs), ts))

    return checks


def cmd_gradcheck(cfg):
    checks = gradcheck_suite(cfg["seed"], cfg["sample"])
    worst = 0.0
    for name, report in checks:
        status = "pass" if report.passed(GRADCHECK_TOL) else "FAIL"
        print(f"{name}\t{report.max_rel_error:.3e}\t{status}")
        worst = max(worst, report.max_rel_error)
    print(f"max\t{worst:.3e}\t{'pass' if worst < GRADCHECK_TOL else 'FAIL'}")
    return 0 if worst < GRADCHECK_TOL else 1


HANDLERS = {
    "mix": cmd_mix,
    "train": cmd_train,
    "enhance": cmd_enhance,
    "vad": cmd_vad,
    "evaluate": cmd_evaluate,
    "ablate-eta": cmd_ablate_eta,
    "gradcheck": cmd_gradcheck,
}

_HELP = {
    "mix": "generate the synthetic noisy/clean corpus",
    "train": "jointly train a mask estimator and the detector",
    "enhance": "denoise one WAV file",
    "vad": "emit per-frame speech posteriors",
    "evaluate": "score a model over a corpus manifest",
    "ablate-eta": "train/evaluate across confidence thresholds",
    "gradcheck": "finite-difference audit of every layer and model",
}


def build_parser():
    parser = argparse.ArgumentParser(prog="dne", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    for command, spec in SPECS.items():
        p = sub.add_parser(command, help=_HELP[command])
        for key, (typ, default) in spec.items():
            flag = FLAG_NAMES.get(key, "--" + key.replace("_", "-"))
            if typ is bool:
                p.add_argument(flag, dest=key, action="store_const", const=True, default=None)
            else:
                p.add_argument(flag, dest=key, type=typ, default=None)
    return parser


def main(argv=None):
    _setup_logging()
    args = vars(build_parser().parse_args(argv))
    command = args.pop("command")
    try:
        cfg = resolve_config(command, args)
        return HANDLERS[command](cfg)
    except UsageError as exc:
        log.error("%s", exc)
        return 2
    except (OSError, ValueError, KeyError, RuntimeError) as exc:
        log.error("%s", exc)
        return 1


def entry():
    sys.exit(main())


if __name__ == "__main__":
    entry()
