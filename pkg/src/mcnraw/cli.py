"""``mcnraw`` command line: train, enhance, eval, rimef-curve, synth.

Exit codes: 0 ok, 1 usage, 2 validation, 3 I/O, 4 numeric failure.
"""
from __future__ import annotations

import argparse
import csv
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import mcnt
from .losses import MetricsReport, psnr, ssim
from .mcn import N_BLOCKS, REFERENCE_WIDTHS, FusionSpec, McnConfig, McnModel
from .raw import CFA, IlluminationParams, ParameterError, illumination_map, load_frame, naive_render, \
    prepare_input, rimef_gain
from .synth import ManifestError, MissingFileError, generate_dataset, load_dataset, load_entry, write_ppm
from .tensor import DimensionError, NumericError, Tensor, no_grad
from .train import TrainConfig, train_loop

log = logging.getLogger("mcnraw")

EXIT_OK, EXIT_USAGE, EXIT_VALIDATION, EXIT_IO, EXIT_NUMERIC = 0, 1, 2, 3, 4
SEED_ENV = "MCN_SEED"


class UsageError(Exception):
    pass


class ValidationError(ValueError):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="mcnraw", description="Multi-granulation cooperative networks for raw low-light images.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", metavar="{train,enhance,eval,rimef-curve,synth}",
                           parser_class=_Parser)
    sub.required = True

    t = sub.add_parser("train", help="train a model from a config file")
    t.add_argument("--config", required=True)
    t.add_argument("--out", default="run", help="output directory for checkpoints and log")
    t.add_argument("--manifest")
    t.add_argument("--resume", help="checkpoint to continue from")
    t.add_argument("--steps", type=int)
    t.add_argument("--epochs", type=int)
    t.add_argument("--crop", type=int)
    t.add_argument("--lr", type=float, dest="lr_initial")
    t.add_argument("--seed", type=int)

    e = sub.add_parser("enhance", help="restore one raw frame")
    e.add_argument("--input", required=True, help="raw MCNT tensor")
    e.add_argument("--meta", required=True, help="sidecar meta file")
    e.add_argument("--out", required=True, help="output path stem; writes .mcnt and .ppm")
    e.add_argument("--checkpoint")
    e.add_argument("--config", help="training config, for the model architecture")
    e.add_argument("--ratio", type=float)
    e.add_argument("--r", type=float, default=1.0)
    e.add_argument("--alpha", type=float, default=1e-6)
    g = e.add_mutually_exclusive_group()
    g.add_argument("--beta", type=float)
    g.add_argument("--beta-auto", action="store_true", help="beta = 1/ratio (default)")
    e.add_argument("--bypass", action="store_true", help="skip the network, render the packed input naively")

    v = sub.add_parser("eval", help="PSNR/SSIM over a manifest")
    v.add_argument("--checkpoint", required=True)
    v.add_argument("--manifest", required=True)
    v.add_argument("--out", required=True, help="metrics CSV")
    v.add_argument("--config")
    v.add_argument("--output", choices=("final", "plain", "sgn2", "sgn3", "sgn4", "sgn5"), default="final",
                   help="which network output to score")
    v.add_argument("--dump-features", metavar="DIR")

    c = sub.add_parser("rimef-curve", help="export the illumination curve as CSV")
    c.add_argument("--r", type=float, default=1.0)
    c.add_argument("--alpha", type=float, default=1e-6)
    c.add_argument("--beta", type=float)
    c.add_argument("--ratio", type=float, default=300.0)
    c.add_argument("--samples", type=int, default=1024)
    c.add_argument("--out", required=True)

    s = sub.add_parser("synth", help="generate a synthetic paired dataset")
    s.add_argument("--out", required=True)
    s.add_argument("--count", type=int, default=32)
    s.add_argument("--size", type=int, default=64)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--cfa", choices=("bayer", "xtrans"), default="bayer")
    s.add_argument("--noise-read", type=float, default=None)
    s.add_argument("--shot-gain", type=float, default=None)
    s.add_argument("--previews", action="store_true")
    return p


# a beta typed as a rounded 1/ratio (0.003333 for 300) means 1/ratio
BETA_SNAP_RTOL = 1e-3


def _snap_beta(beta, ratio):
    if beta is None or not ratio >= 1:
        return beta
    floor = 1.0 / ratio
    if floor * (1 - BETA_SNAP_RTOL) <= beta < floor:
        return floor
    return beta


def _validate(ns):
    if ns.command == "rimef-curve":
        ns.beta = _snap_beta(ns.beta, ns.ratio)
        beta = ns.beta if ns.beta is not None else (1.0 / ns.ratio if ns.ratio >= 1 else 1.0)
        IlluminationParams(ns.r, ns.alpha, beta, ns.ratio)
        if ns.samples < 2:
            raise ValidationError("--samples must be >= 2")
    elif ns.command == "enhance":
        if ns.ratio is not None and not ns.ratio >= 1:
            raise ValidationError(f"ratio must be >= 1, got {ns.ratio}")
        if not ns.bypass and not ns.checkpoint:
            raise UsageError("enhance: --checkpoint is required unless --bypass is given")
    elif ns.command == "synth":
        step = 4 if ns.cfa == "bayer" else 12
        if ns.count < 1:
            raise ValidationError("--count must be >= 1")
        if ns.size < step or ns.size % step:
            raise ValidationError(f"--size must be a positive multiple of {step}")
    elif ns.command == "train":
        for name in ("steps", "epochs", "crop"):
            val = getattr(ns, name)
            if val is not None and val < 1:
                raise ValidationError(f"--{name} must be >= 1")
        if ns.lr_initial is not None and not ns.lr_initial > 0:
            raise ValidationError("--lr must be > 0")


def parse_args(argv) -> argparse.Namespace:
    ns = build_parser().parse_args(list(argv))
    _validate(ns)
    return ns


# -- helpers -----------------------------------------------------------------------

def infer_model_config(tensors: dict) -> McnConfig:
    """Recover the architecture from checkpoint tensor names and shapes."""
    try:
        n = 0
        while f"sgn{n + 1}.head.weight" in tensors:
            n += 1
        in_ch = tensors["adapter1.weight"].shape[0]
        factor = int(round((tensors["sgn1.head.weight"].shape[0] / 3) ** 0.5))
        w1 = tensors["sgn1.block1.conv1.weight"].shape[0]
    except KeyError as exc:
        raise ValidationError(f"checkpoint is missing {exc.args[0]!r}") from None
    if n == 0 or w1 < 1 or REFERENCE_WIDTHS[0] % w1:
        raise ValidationError("checkpoint does not describe an MCN model")
    dense = n > 1 and tensors["sgn2.block1.conv1.weight"].shape[1] == 2 * in_ch
    fusion = FusionSpec.dense() if dense else FusionSpec.residual()
    return McnConfig(n_sgn=n, fusion=fusion, in_channels=in_ch, factor=factor,
                     width_divisor=REFERENCE_WIDTHS[0] // w1)


def _load_model(checkpoint, config_path=None) -> McnModel:
    tensors = mcnt.load_checkpoint(checkpoint)
    if config_path:
        mcfg = TrainConfig.from_file(config_path).model_config()
    else:
        mcfg = infer_model_config(tensors)
    model = McnModel(mcfg)
    model.load_state_dict({k: v for k, v in tensors.items() if not k.startswith(("adam.", "train."))})
    return model


def _pad16(packed: np.ndarray):
    h, w = packed.shape[2:]
    ph, pw = (-h) % 16, (-w) % 16
    if ph or pw:
        packed = np.pad(packed, ((0, 0), (0, 0), (0, ph), (0, pw)), mode="reflect")
    return packed, h, w


def _run(model: McnModel, packed: np.ndarray):
    x, h, w = _pad16(packed.astype(np.float32))
    with no_grad():
        out = model(Tensor(x))
    f = model.config.factor
    return out, (h * f, w * f), (h, w)


def _pick(outputs, which: str):
    named = outputs.named()
    if which == "final":
        if outputs.back_output is not None:
            return outputs.back_output
        return outputs.outputs[-1] if outputs.outputs else outputs.plain_output
    key = "sgn1" if which == "plain" else which
    if key not in named:
        raise ValidationError(f"model has no output {which!r}")
    return named[key]


# -- subcommands ------------------------------------------------------------------

def cmd_train(ns) -> int:
    overrides = {k: getattr(ns, k) for k in ("steps", "epochs", "crop", "lr_initial", "manifest")}
    if os.environ.get(SEED_ENV):
        try:
            overrides["seed"] = int(os.environ[SEED_ENV])
        except ValueError:
            raise ValidationError(f"{SEED_ENV} must be an integer, got {os.environ[SEED_ENV]!r}") from None
    if ns.seed is not None:
        overrides["seed"] = ns.seed
    cfg = TrainConfig.from_file(ns.config, **overrides)
    if not cfg.manifest:
        raise ValidationError("no manifest: set [data] manifest or pass --manifest")
    manifest = Path(cfg.manifest)
    if not manifest.is_absolute() and not manifest.exists():
        manifest = Path(ns.config).parent / manifest
    from .train import samples_from_manifest

    samples = samples_from_manifest(manifest)
    cfa_kind = samples[0].packed.shape[1]
    if (cfa_kind == 9) != (cfg.cfa == "xtrans"):
        raise ValidationError(f"config cfa {cfg.cfa!r} does not match the dataset")
    out = Path(ns.out)
    out.mkdir(parents=True, exist_ok=True)
    cfg.to_file(out / "config.ini")
    result = train_loop(cfg, samples, out_dir=out, resume=ns.resume)
    last = result.log[-1] if result.log else None
    if last:
        log.info("step %d loss %.6f", last["step"], last["loss"])
    print(out / "final.mcnc")
    return EXIT_OK


def cmd_enhance(ns) -> int:
    frame = load_frame(ns.input, ns.meta)
    if ns.ratio is not None:
        frame.exposure_ratio = ns.ratio
    ratio = frame.exposure_ratio
    beta = _snap_beta(ns.beta, ratio) if ns.beta is not None else 1.0 / ratio
    params = IlluminationParams(ns.r, ns.alpha, beta, ratio)
    packed = prepare_input(frame, params).data
    if ns.bypass:
        image = naive_render(packed, frame.cfa)
    else:
        model = _load_model(ns.checkpoint, ns.config)
        if model.config.in_channels != packed.shape[1]:
            raise ValidationError(f"checkpoint expects {model.config.in_channels} packed channels, "
                                  f"frame packs to {packed.shape[1]}")
        out, (h, w), _ = _run(model, packed)
        image = _pick(out, "final").data[0, :, :h, :w]
    image = np.asarray(image, dtype=np.float32)
    if not np.all(np.isfinite(image)):
        raise NumericError("network produced non-finite values")
    stem = Path(ns.out)
    if stem.suffix in (".mcnt", ".ppm"):
        stem = stem.with_suffix("")
    stem.parent.mkdir(parents=True, exist_ok=True)
    mcnt.save(stem.with_suffix(".mcnt"), image)
    write_ppm(stem.with_suffix(".ppm"), image)
    print(stem.with_suffix(".mcnt"))
    return EXIT_OK


def _dump_features(directory: Path, image_id: str, outputs, crop):
    directory.mkdir(parents=True, exist_ok=True)
    groups = [(f"sgn{i + 1}", feats) for i, feats in enumerate(outputs.features)]
    if outputs.back_features is not None:
        groups.append(("sgn1b", outputs.back_features))
    for name, feats in groups:
        for j, h in enumerate(feats[:N_BLOCKS]):
            scale = 2 ** min(j, 8 - j)
            fh, fw = -(-crop[0] // scale), -(-crop[1] // scale)
            mcnt.save(directory / f"{image_id}_{name}_block{j + 1}.mcnt", h.data[:, :, :fh, :fw])


def cmd_eval(ns) -> int:
    model = _load_model(ns.checkpoint, ns.config)
    report = MetricsReport()
    for entry in load_dataset(ns.manifest):
        frame, target = load_entry(entry)
        packed = prepare_input(frame, IlluminationParams(beta=1.0, ratio=frame.exposure_ratio)).data
        if model.config.in_channels != packed.shape[1]:
            raise ValidationError(f"{entry.input_path}: checkpoint expects {model.config.in_channels} "
                                  f"packed channels, got {packed.shape[1]}")
        out, (h, w), packed_hw = _run(model, packed)
        pred = np.clip(_pick(out, ns.output).data[0, :, :h, :w], 0, 1)
        if not np.all(np.isfinite(pred)):
            raise NumericError(f"{entry.image_id}: non-finite output")
        report.add(entry.image_id, psnr(pred, target), ssim(pred, target))
        if ns.dump_features:
            _dump_features(Path(ns.dump_features), entry.image_id, out, packed_hw)
    out_path = Path(ns.out)
    out_path.parent.mkdir(parents=True, exist_ok=True)
    report.write_csv(out_path)
    print(f"mean psnr {report.mean_psnr:.4f} dB  ssim {report.mean_ssim:.4f}")
    return EXIT_OK


def rimef_curve(r=1.0, alpha=1e-6, beta=None, ratio=300.0, samples=1024):
    """Rows of (x, m_f, M) on an even grid over [0, 1]."""
    beta = 1.0 / ratio if beta is None else beta
    params = IlluminationParams(r, alpha, beta, ratio)
    x = np.linspace(0.0, 1.0, samples)
    return x, illumination_map(x, r, alpha), rimef_gain(x, params).data


def cmd_rimef_curve(ns) -> int:
    x, mf, gain = rimef_curve(ns.r, ns.alpha, ns.beta, ns.ratio, ns.samples)
    with open(ns.out, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["x", "m_f", "M"])
        for row in zip(x, mf, gain):
            w.writerow([repr(float(v)) for v in row])
    return EXIT_OK


def cmd_synth(ns) -> int:
    kw = {}
    if ns.noise_read is not None:
        kw["noise_sigma_read"] = ns.noise_read
    if ns.shot_gain is not None:
        kw["shot_gain"] = ns.shot_gain
    cfa = CFA.bayer() if ns.cfa == "bayer" else CFA.xtrans()
    manifest = generate_dataset(ns.out, ns.count, ns.size, ns.seed, cfa, previews=ns.previews, **kw)
    print(manifest)
    return EXIT_OK


COMMANDS = {
    "train": cmd_train,
    "enhance": cmd_enhance,
    "eval": cmd_eval,
    "rimef-curve": cmd_rimef_curve,
    "synth": cmd_synth,
}


def execute(ns) -> int:
    return COMMANDS[ns.command](ns)


def _fail(code, msg):
    print(f"mcnraw: error: {msg}", file=sys.stderr)
    return code


def main(argv=None) -> int:
    argv = sys.argv[1:] if argv is None else argv
    try:
        ns = parse_args(argv)
        logging.basicConfig(level=logging.INFO if ns.verbose else logging.WARNING,
                            format="%(levelname)s %(name)s: %(message)s")
        return execute(ns)
    except UsageError as exc:
        return _fail(EXIT_USAGE, exc)
    except NumericError as exc:
        return _fail(EXIT_NUMERIC, f"numeric failure: {exc}")
    except (MissingFileError, mcnt.FormatError, OSError) as exc:
        return _fail(EXIT_IO, exc)
    except (ValidationError, ParameterError, DimensionError, ManifestError, KeyError, ValueError) as exc:
        return _fail(EXIT_VALIDATION, exc)


if __name__ == "__main__":
    sys.exit(main())
