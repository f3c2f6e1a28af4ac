"""Adam training of MCN models on paired raw/sRGB data."""
from __future__ import annotations

import configparser
import csv
import logging
import math
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from . import mcnt
from .losses import LossWeights, multi_granulation_loss
from .mcn import FusionSpec, McnConfig, McnModel
from .raw import CFA, IlluminationParams, prepare_input
from .tensor import NumericError, Tensor, backward

log = logging.getLogger(__name__)

LOG_FIELDS = ("epoch", "step", "loss", "recon", "smooth", "lr")


@dataclass
class TrainConfig:
    epochs: int = 4000
    steps: int | None = None  # step budget; overrides epochs when set
    lr_initial: float = 1e-4
    lr_late: float = 1e-5
    lr_switch_epoch: int = 2000
    crop: int = 512
    batch: int = 1
    seed: int = 0
    checkpoint_every: int = 100
    lambda_r: float = 1.0
    lambda_s: float = 1.0
    augment: bool = True
    # model
    n_sgn: int = 3
    fusion: str = "residual"
    cfa: str = "bayer"
    width_divisor: int = 1
    back_connection: bool = True
    # data
    manifest: str | None = None

    def __post_init__(self):
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        period = 2 if self.cfa == "bayer" else 6
        if self.crop % (2 * period):
            raise ValueError(f"crop {self.crop} must be divisible by {2 * period}")
        factor = 2 if self.cfa == "bayer" else 3
        if self.crop % (16 * factor):
            raise ValueError(f"crop {self.crop} must be divisible by {16 * factor} so the packed crop "
                             "survives four 2x poolings")
        if self.batch < 1:
            raise ValueError("batch must be >= 1")

    @property
    def loss_weights(self) -> LossWeights:
        return LossWeights(self.lambda_r, self.lambda_s)

    def model_config(self) -> McnConfig:
        return McnConfig.for_cfa(self.cfa, n_sgn=self.n_sgn, fusion=FusionSpec.for_kind(self.fusion),
                                 width_divisor=self.width_divisor, back_connection=self.back_connection)

    # -- config files --------------------------------------------------------
    _SECTIONS = {
        "model": ("n_sgn", "fusion", "cfa", "width_divisor", "back_connection"),
        "loss": ("lambda_r", "lambda_s"),
        "data": ("manifest",),
    }

    @classmethod
    def from_file(cls, path, **overrides) -> "TrainConfig":
        parser = configparser.ConfigParser()
        with open(path, encoding="utf-8") as fh:
            parser.read_file(fh)
        types = {f.name: f.type for f in fields(cls)}
        values = {}
        for section in parser.sections():
            for key, raw in parser.items(section):
                if key not in types:
                    raise ValueError(f"{path}: unknown key {key!r} in [{section}]")
                values[key] = _coerce(key, raw, types[key])
        values.update({k: v for k, v in overrides.items() if v is not None})
        return cls(**values)

    def to_file(self, path):
        parser = configparser.ConfigParser()
        data = asdict(self)
        placed = set()
        for section, keys in self._SECTIONS.items():
            parser[section] = {k: str(data[k]) for k in keys if data[k] is not None}
            placed.update(keys)
        parser["train"] = {k: str(v) for k, v in data.items() if k not in placed and v is not None}
        with open(path, "w", encoding="utf-8") as fh:
            parser.write(fh)


def _coerce(key, raw, typ):
    typ = str(typ)
    raw = raw.strip()
    if "bool" in typ:
        low = raw.lower()
        if low in ("1", "true", "yes", "on"):
            return True
        if low in ("0", "false", "no", "off"):
            return False
        raise ValueError(f"{key}: expected a boolean, got {raw!r}")
    if "int" in typ:
        if raw.lower() in ("none", ""):
            return None
        return int(raw)
    if "float" in typ:
        return float(raw)
    return raw


# -- optimiser -------------------------------------------------------------------

@dataclass
class AdamState:
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    t: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


def adam_step(params: dict, grads: dict, state: AdamState, lr: float):
    """One bias-corrected Adam update, in place on ``params[name].data``."""
    if lr <= 0:
        raise ValueError("learning rate must be positive")
    for name, g in grads.items():
        if g is not None and not np.all(np.isfinite(g)):
            bad = int(np.size(g) - np.count_nonzero(np.isfinite(g)))
            raise NumericError(f"non-finite gradient for {name} ({bad} entries) at step {state.t + 1}")
    state.t += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** state.t
    c2 = 1.0 - b2 ** state.t
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(p.data)
        dt = p.data.dtype.type
        m = state.m.get(name)
        v = state.v.get(name)
        if m is None:
            m = np.zeros_like(p.data)
            v = np.zeros_like(p.data)
        m = dt(b1) * m + dt(1 - b1) * g
        v = dt(b2) * v + dt(1 - b2) * (g * g)
        state.m[name], state.v[name] = m, v
        m_hat = m / dt(c1)
        v_hat = v / dt(c2)
        p.data = p.data - dt(lr) * m_hat / (np.sqrt(v_hat) + dt(state.eps))


def learning_rate(epoch: int, cfg: TrainConfig) -> float:
    return cfg.lr_initial if epoch < cfg.lr_switch_epoch else cfg.lr_late


# -- augmentation ----------------------------------------------------------------

@dataclass(frozen=True)
class Augmentation:
    y: int
    x: int
    size: int
    flip_h: bool
    flip_v: bool
    rot: int


def _geom(a, aug: Augmentation):
    if aug.flip_h:
        a = a[..., ::-1]
    if aug.flip_v:
        a = a[..., ::-1, :]
    if aug.rot:
        a = np.rot90(a, aug.rot, axes=(-2, -1))
    return np.ascontiguousarray(a)


def _ungeom(a, aug: Augmentation):
    if aug.rot:
        a = np.rot90(a, -aug.rot, axes=(-2, -1))
    if aug.flip_v:
        a = a[..., ::-1, :]
    if aug.flip_h:
        a = a[..., ::-1]
    return np.ascontiguousarray(a)


def augment_pair(packed, target, crop: int, rng: np.random.Generator, factor: int = 2,
                 enabled: bool = True):
    """Random aligned crop plus flips and 90-degree rotation.

    ``packed`` is (N, C, h, w); ``target`` is (N, 3, factor*h, factor*w).
    ``crop`` is the packed-grid window size. Returns (input, target, info).
    """
    p = np.asarray(packed.data if isinstance(packed, Tensor) else packed)
    t = np.asarray(target.data if isinstance(target, Tensor) else target)
    h, w = p.shape[-2:]
    if t.shape[-2:] != (h * factor, w * factor):
        raise ValueError(f"target {t.shape[-2:]} is not {factor}x packed {p.shape[-2:]}")
    if crop > h or crop > w:
        raise ValueError(f"crop {crop} larger than packed image {h}x{w}")
    y = int(rng.integers(0, h - crop + 1))
    x = int(rng.integers(0, w - crop + 1))
    if enabled:
        flip_h, flip_v = bool(rng.integers(0, 2)), bool(rng.integers(0, 2))
        rot = int(rng.integers(0, 4))
    else:
        flip_h = flip_v = False
        rot = 0
    aug = Augmentation(y, x, crop, flip_h, flip_v, rot)
    pin = p[..., y:y + crop, x:x + crop]
    tin = t[..., factor * y:factor * (y + crop), factor * x:factor * (x + crop)]
    return _geom(pin, aug), _geom(tin, aug), aug


def deaugment(packed, target, aug: Augmentation):
    """Undo the flips/rotation of :func:`augment_pair` (the crop stays)."""
    return _ungeom(np.asarray(packed), aug), _ungeom(np.asarray(target), aug)


# -- data ---------------------------------------------------------------------------

@dataclass
class Sample:
    packed: np.ndarray  # (1, C, h, w) float32, amplified with beta = 1
    target: np.ndarray  # (1, 3, H, W) float32
    image_id: str = ""


def make_sample(frame, target, image_id="", params: IlluminationParams | None = None) -> Sample:
    params = params or IlluminationParams(beta=1.0, ratio=frame.exposure_ratio)
    packed = prepare_input(frame, params).data.astype(np.float32)
    tgt = np.asarray(target, dtype=np.float32)
    if tgt.ndim == 3:
        tgt = tgt[None]
    return Sample(packed, tgt, image_id)


def samples_from_manifest(path) -> list:
    from .synth import load_dataset, load_entry

    out = []
    for entry in load_dataset(path):
        frame, target = load_entry(entry)
        out.append(make_sample(frame, target, entry.image_id))
    return out


# -- checkpoints ------------------------------------------------------------------

def save_training_state(path, model: McnModel, state: AdamState, step: int):
    tensors = {k: v.astype(np.float32) for k, v in model.state_dict().items()}
    for name in model.parameters():
        if name in state.m:
            tensors[f"adam.m.{name}"] = state.m[name].astype(np.float32)
            tensors[f"adam.v.{name}"] = state.v[name].astype(np.float32)
    tensors["adam.t"] = np.array([state.t], dtype=np.float32)
    tensors["train.step"] = np.array([step], dtype=np.float32)
    mcnt.save_checkpoint(path, tensors)


def load_training_state(path, model: McnModel):
    tensors = mcnt.load_checkpoint(path)
    model.load_state_dict({k: v for k, v in tensors.items() if not k.startswith(("adam.", "train."))})
    state = AdamState()
    for name in model.parameters():
        if f"adam.m.{name}" in tensors:
            state.m[name] = tensors[f"adam.m.{name}"].astype(np.float32)
            state.v[name] = tensors[f"adam.v.{name}"].astype(np.float32)
    state.t = int(tensors["adam.t"][0]) if "adam.t" in tensors else 0
    step = int(tensors["train.step"][0]) if "train.step" in tensors else 0
    return state, step


def load_model(path, config: McnConfig) -> McnModel:
    model = McnModel(config)
    tensors = mcnt.load_checkpoint(path)
    model.load_state_dict({k: v for k, v in tensors.items() if not k.startswith(("adam.", "train."))})
    return model


# -- loop ---------------------------------------------------------------------------

@dataclass
class TrainResult:
    model: McnModel
    state: AdamState
    log: list
    checkpoints: list


def _batch(samples, order, pos, cfg, step, factor):
    rng = np.random.default_rng([cfg.seed, 2, step])
    crop = cfg.crop // factor
    ins, tgts = [], []
    for b in range(cfg.batch):
        s = samples[order[(pos + b) % len(order)]]
        pin, tin, _ = augment_pair(s.packed, s.target, crop, rng, factor, cfg.augment)
        ins.append(pin)
        tgts.append(tin)
    return Tensor(np.concatenate(ins)), Tensor(np.concatenate(tgts))


def train_loop(cfg: TrainConfig, dataset, out_dir=None, resume=None, model: McnModel | None = None,
               on_step=None) -> TrainResult:
    """Train until ``cfg.steps`` (or ``cfg.epochs`` passes) are done.

    Per-step randomness derives from (seed, step) and epoch order from
    (seed, epoch), so a resumed run reproduces an uninterrupted one.
    """
    samples = list(dataset)
    if not samples:
        raise ValueError("dataset is empty")
    mcfg = cfg.model_config()
    factor = mcfg.factor
    model = model or McnModel(mcfg, seed=cfg.seed)
    state, start = AdamState(), 0
    if resume is not None:
        state, start = load_training_state(resume, model)
    steps_per_epoch = max(1, math.ceil(len(samples) / cfg.batch))
    total = cfg.steps if cfg.steps is not None else cfg.epochs * steps_per_epoch
    out_dir = Path(out_dir) if out_dir is not None else None
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)
    params = model.parameters()
    rows, ckpts = [], []
    order_epoch, order = -1, None
    for step in range(start, total):
        epoch, pos = divmod(step, steps_per_epoch)
        if epoch != order_epoch:
            order = np.random.default_rng([cfg.seed, 1, epoch]).permutation(len(samples))
            order_epoch = epoch
        x, t = _batch(samples, order, pos * cfg.batch, cfg, step, factor)
        parts = {}
        loss = multi_granulation_loss(model(x), t, cfg.loss_weights, parts)
        if not np.isfinite(loss.data):
            if out_dir is not None:
                save_training_state(out_dir / "nonfinite.mcnc", model, state, step)
            raise NumericError(f"non-finite loss at step {step + 1}")
        model.zero_grad()
        backward(loss)
        lr = learning_rate(epoch, cfg)
        adam_step(params, {k: p.grad for k, p in params.items()}, state, lr)
        row = {"epoch": epoch, "step": step + 1, "loss": float(loss.data),
               "recon": parts["recon"], "smooth": parts["smooth"], "lr": lr}
        rows.append(row)
        if on_step is not None:
            on_step(row)
        end_of_epoch = pos == steps_per_epoch - 1
        if out_dir is not None and end_of_epoch and (epoch + 1) % cfg.checkpoint_every == 0 \
                and step + 1 < total:
            path = out_dir / f"ckpt_epoch{epoch + 1:05d}.mcnc"
            save_training_state(path, model, state, step + 1)
            ckpts.append(path)
    model.zero_grad()
    if out_dir is not None:
        path = out_dir / "final.mcnc"
        save_training_state(path, model, state, total)
        ckpts.append(path)
        write_log(out_dir / "train_log.csv", rows, append=resume is not None)
    return TrainResult(model, state, rows, ckpts)


def write_log(path, rows, append=False):
    path = Path(path)
    new = not (append and path.exists())
    with open(path, "w" if new else "a", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        if new:
            w.writerow(LOG_FIELDS)
        for r in rows:
            w.writerow([r["epoch"], r["step"], repr(r["loss"]), repr(r["recon"]), repr(r["smooth"]),
                        repr(r["lr"])])


def read_log(path) -> list:
    with open(path, newline="", encoding="utf-8") as fh:
        return [{k: float(v) for k, v in row.items()} for row in csv.DictReader(fh)]


def cfa_for(cfg: TrainConfig) -> CFA:
    return CFA.bayer() if cfg.cfa == "bayer" else CFA.xtrans()
