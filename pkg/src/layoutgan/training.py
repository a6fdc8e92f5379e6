"""Alternating adversarial training with checkpointing.

A training step refreshes the spectral-norm power-iteration state, applies
one discriminator update on hinge losses over real and detached fake
samples, then one generator update on the adversarial score plus
reconstruction and perceptual terms. All randomness flows through one
``numpy`` generator owned by the training state, and that generator's state
travels inside checkpoints, so a resumed run continues bit-identically.

Checkpoints are a single binary file: magic ``ISLA``, a format version,
a length-prefixed name table, raw little-endian float32 payloads, and a
trailing UTF-8 JSON blob holding the step counter, optimizer counters,
PRNG state, and the full configuration echo. Saving a freshly loaded
checkpoint reproduces the file byte for byte.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .config import (RunConfig, config_from_dict, config_to_dict,
                     discriminator_config, generator_config)
from .data import DataError, Dataset, simulate_detections, split
from .layouts import InstanceLayout, StyleCodes, sample_styles, with_background
from .networks import Discriminator, Generator
from .objectives import (AdamState, FrozenExtractor, adam_step,
                         combined_adv, generator_adv_score, l1_mean,
                         semi_weighted_adv)

__all__ = [
    "TrainItem", "TrainState", "CheckpointError", "CheckpointFormatError",
    "CheckpointVersionError", "CheckpointTruncatedError",
    "CheckpointNameError", "init_state", "prepare_items", "make_batch",
    "train_step", "run_training", "save_checkpoint", "load_checkpoint",
]

MAGIC = b"ISLA"
VERSION = 1

MODES = ("fully", "semi")


class CheckpointError(ValueError):
    """Base class for unreadable or inconsistent checkpoint files."""


class CheckpointFormatError(CheckpointError):
    """Wrong magic bytes or malformed framing."""


class CheckpointVersionError(CheckpointError):
    """Checkpoint written by an unsupported format version."""


class CheckpointTruncatedError(CheckpointError):
    """File ends before the announced payload does."""


class CheckpointNameError(CheckpointError):
    """Tensor names or shapes do not match the configured networks."""


# --------------------------------------------------------------------------
# training state
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class TrainItem:
    """One training example: layout with background, target image, and
    (for detection-derived layouts) per-foreground-box confidences."""

    inst: InstanceLayout
    image: np.ndarray
    confidences: Optional[Tuple[float, ...]] = None


@dataclass
class TrainState:
    config: RunConfig
    gen: Generator
    disc: Discriminator
    extractor: FrozenExtractor
    g_opt: AdamState = field(default_factory=AdamState)
    d_opt: AdamState = field(default_factory=AdamState)
    rng: np.random.Generator = None
    step: int = 0


def init_state(config: RunConfig) -> TrainState:
    """Fresh networks and optimizer state from (config, config.train.seed)."""
    seed = config.train.seed
    gen = Generator(generator_config(config),
                    np.random.default_rng(np.random.SeedSequence([seed, 101])))
    disc = Discriminator(
        discriminator_config(config),
        np.random.default_rng(np.random.SeedSequence([seed, 102])))
    loop_rng = np.random.default_rng(np.random.SeedSequence([seed, 103]))
    return TrainState(config=config, gen=gen, disc=disc,
                      extractor=FrozenExtractor(), rng=loop_rng)


def refresh_spectral(net) -> None:
    """One power iteration per normalized weight, outside any tape."""
    for _name, layer in net.layers():
        if getattr(layer, "spectral", False):
            layer.weight(sn_update=True)


def _all_params(state: TrainState) -> List[Tensor]:
    return (list(state.gen.named_params().values())
            + list(state.disc.named_params().values()))


# --------------------------------------------------------------------------
# batch assembly
# --------------------------------------------------------------------------

def prepare_items(dataset: Dataset, config: RunConfig,
                  mode: str = "fully") -> List[TrainItem]:
    """Training view of a dataset.

    In ``fully`` mode every sample keeps its annotated layout. In ``semi``
    mode the dataset is split deterministically; samples outside the
    supervised fraction swap their annotations for simulated detections
    with per-box confidences.
    """
    if mode not in MODES:
        raise ad.ContractError(f"mode must be one of {MODES}, got '{mode}'")
    if dataset.resolution != config.model.resolution:
        raise DataError(
            f"dataset resolution {dataset.resolution} does not match "
            f"configured resolution {config.model.resolution}")
    d = config.data
    unsup: set = set()
    if mode == "semi":
        _sup, uns = split(len(dataset), d.supervised_fraction, d.seed)
        unsup = set(uns)
    items = []
    for idx, sample in enumerate(dataset.samples):
        if idx in unsup:
            det = simulate_detections(sample.layout, seed=d.seed + idx,
                                      jitter_sigma=d.jitter_sigma,
                                      drop_prob=d.drop_prob,
                                      tau=config.loss.tau)
            items.append(TrainItem(inst=with_background(det),
                                   image=sample.image,
                                   confidences=tuple(b.confidence
                                                     for b in det.boxes)))
        else:
            items.append(TrainItem(inst=with_background(sample.layout),
                                   image=sample.image))
    return items


def make_batch(state: TrainState, items: Sequence[TrainItem]
               ) -> Tuple[List[TrainItem], List[StyleCodes]]:
    """Draw one minibatch (with replacement) plus fresh style codes."""
    if not items:
        raise ad.ContractError("cannot draw a batch from zero items")
    cfg = state.config
    idx = state.rng.integers(0, len(items), size=cfg.train.batch_size)
    chosen = [items[int(i)] for i in idx]
    styles = [sample_styles(it.inst, cfg.model.d_img, cfg.model.d_obj,
                            seed=int(state.rng.integers(2 ** 63)))
              for it in chosen]
    return chosen, styles


# --------------------------------------------------------------------------
# one optimization step
# --------------------------------------------------------------------------

def _adv(p_img, p_obj, confs, lam, is_real, tau):
    if confs is None:
        return combined_adv(p_img, p_obj, lam, is_real)
    return semi_weighted_adv(p_img, p_obj, confs, lam, is_real, tau=tau)


def train_step(state: TrainState, batch: Sequence[TrainItem],
               styles: Sequence[StyleCodes], mode: str = "fully"
               ) -> Dict[str, float]:
    """One discriminator update followed by one generator update.

    The whole logical batch runs through the generator in a single pass so
    its normalization statistics cover every sample. A non-finite value
    anywhere raises ``FloatingPointError`` naming the producing op.
    Returns the loss components and score means for the metric stream;
    ``d_loss`` and ``g_loss`` are batch sums, ``recon`` and ``percep``
    batch means.
    """
    if mode not in MODES:
        raise ad.ContractError(f"mode must be one of {MODES}, got '{mode}'")
    if mode == "fully" and any(it.confidences is not None for it in batch):
        raise ad.ContractError(
            "fully supervised mode cannot take confidence-weighted items")
    cfg = state.config
    lam, tau = cfg.loss.lam, cfg.loss.tau
    n = len(batch)
    insts = [it.inst for it in batch]
    real_np = [it.image.astype(state.gen.dtype) for it in batch]

    # ---- discriminator update (real up, detached fake down)
    refresh_spectral(state.gen)
    refresh_spectral(state.disc)
    fakes = state.gen.forward_batch(insts, styles)
    fake_np = [np.asarray(out.image.data) for out in fakes]

    ad.zero_grads(_all_params(state))
    img_real: List[float] = []
    img_fake: List[float] = []
    obj_real: List[float] = []
    obj_fake: List[float] = []
    with ad.Tape():
        d_loss = None
        for i, it in enumerate(batch):
            sr = state.disc.forward(ad.constant(real_np[i]), it.inst)
            sf = state.disc.forward(ad.constant(fake_np[i]), it.inst)
            term = ad.add(
                _adv(sr.p_img, sr.p_obj, it.confidences, lam, True, tau),
                _adv(sf.p_img, sf.p_obj, it.confidences, lam, False, tau))
            d_loss = term if d_loss is None else ad.add(d_loss, term)
            img_real.append(float(sr.p_img.data))
            img_fake.append(float(sf.p_img.data))
            obj_real.extend(float(p.data) for p in sr.p_obj)
            obj_fake.extend(float(p.data) for p in sf.p_obj)
        ad.backward(d_loss)
    adam_step(state.disc.named_params(), state.d_opt,
              lr=cfg.train.lr, beta1=cfg.train.beta1,
              beta2=cfg.train.beta2, eps=cfg.train.eps)

    # ---- generator update
    refresh_spectral(state.disc)
    ad.zero_grads(_all_params(state))
    with ad.Tape():
        outs = state.gen.forward_batch(insts, styles)
        adv = None
        recon = None
        for i, out in enumerate(outs):
            s = state.disc.forward(out.image, insts[i])
            score = generator_adv_score(s.p_img, s.p_obj, lam)
            adv = score if adv is None else ad.add(adv, score)
            r = l1_mean(out.image, ad.constant(real_np[i]))
            recon = r if recon is None else ad.add(recon, r)
        fake_batch = ad.concat(
            [ad.reshape(out.image, (1,) + out.image.shape) for out in outs],
            axis=0)
        real_batch = ad.constant(np.stack(real_np))
        percep = ad.mul(
            state.extractor.perceptual_l1(fake_batch, real_batch), float(n))
        g_loss = ad.add(
            ad.sub(ad.mul(recon, cfg.loss.recon_weight), adv),
            ad.mul(percep, cfg.loss.percep_weight))
        ad.backward(g_loss)
    adam_step(state.gen.named_params(), state.g_opt,
              lr=cfg.train.lr, beta1=cfg.train.beta1,
              beta2=cfg.train.beta2, eps=cfg.train.eps)

    state.step += 1
    return {
        "step": state.step,
        "d_loss": float(d_loss.data),
        "g_loss": float(g_loss.data),
        "recon": float(recon.data) / n,
        "percep": float(percep.data) / n,
        "p_img_real": float(np.mean(img_real)),
        "p_img_fake": float(np.mean(img_fake)),
        "p_obj_real": float(np.mean(obj_real)) if obj_real else 0.0,
        "p_obj_fake": float(np.mean(obj_fake)) if obj_fake else 0.0,
    }


def run_training(state: TrainState, items: Sequence[TrainItem], steps: int,
                 mode: str = "fully",
                 on_metrics: Optional[Callable[[Dict[str, float]], None]]
                 = None) -> List[Dict[str, float]]:
    """Run ``steps`` optimization steps; returns all metric records."""
    history = []
    for _ in range(steps):
        batch, styles = make_batch(state, items)
        metrics = train_step(state, batch, styles, mode=mode)
        history.append(metrics)
        if on_metrics is not None:
            on_metrics(metrics)
    return history


# --------------------------------------------------------------------------
# checkpoint format
# --------------------------------------------------------------------------

def _checkpoint_tensors(state: TrainState) -> Dict[str, np.ndarray]:
    out: Dict[str, np.ndarray] = {}
    for prefix, net in (("gen", state.gen), ("disc", state.disc)):
        for name, p in net.named_params().items():
            out[f"{prefix}.{name}"] = p.data
        for name, u in net.named_sn().items():
            out[f"{prefix}.sn.{name}"] = u
    for prefix, opt in (("g", state.g_opt), ("d", state.d_opt)):
        for name, arr in opt.m1.items():
            out[f"opt.{prefix}.m1.{name}"] = arr
        for name, arr in opt.m2.items():
            out[f"opt.{prefix}.m2.{name}"] = arr
    return out


def save_checkpoint(path, state: TrainState) -> None:
    tensors = _checkpoint_tensors(state)
    names = sorted(tensors)
    head = [MAGIC, struct.pack("<I", VERSION),
            struct.pack("<I", len(names))]
    for name in names:
        raw = name.encode("utf-8")
        arr = tensors[name]
        head.append(struct.pack("<I", len(raw)))
        head.append(raw)
        head.append(struct.pack("<I", arr.ndim))
        head.append(struct.pack(f"<{arr.ndim}I", *arr.shape)
                    if arr.ndim else b"")
    body = [np.ascontiguousarray(tensors[n], dtype="<f4").tobytes()
            for n in names]
    tail = json.dumps(
        {"step": state.step,
         "opt": {"g_t": state.g_opt.t, "d_t": state.d_opt.t},
         "rng": state.rng.bit_generator.state,
         "config": config_to_dict(state.config)},
        sort_keys=True, separators=(",", ":")).encode("utf-8")
    with open(path, "wb") as f:
        for chunk in head:
            f.write(chunk)
        for chunk in body:
            f.write(chunk)
        f.write(struct.pack("<I", len(tail)))
        f.write(tail)


class _Reader:
    def __init__(self, blob: bytes):
        self.blob = blob
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.blob):
            raise CheckpointTruncatedError(
                f"checkpoint ends at byte {len(self.blob)}, "
                f"needed {self.pos + n}")
        out = self.blob[self.pos:self.pos + n]
        self.pos += n
        return out

    def u32(self) -> int:
        return struct.unpack("<I", self.take(4))[0]


def load_checkpoint(path) -> TrainState:
    """Rebuild a TrainState from a checkpoint file.

    The configuration echo in the trailing JSON defines the network
    shapes; every parameter, power-iteration vector, optimizer moment,
    and the PRNG state are restored from the file.
    """
    try:
        blob = Path(path).read_bytes()
    except OSError as e:
        raise CheckpointError(f"cannot read checkpoint: {e}") from None
    r = _Reader(blob)
    if r.take(4) != MAGIC:
        raise CheckpointFormatError("not a checkpoint file (bad magic)")
    version = r.u32()
    if version != VERSION:
        raise CheckpointVersionError(
            f"checkpoint format version {version}, supported {VERSION}")
    count = r.u32()
    entries = []
    for _ in range(count):
        name = r.take(r.u32()).decode("utf-8")
        shape = tuple(r.u32() for _ in range(r.u32()))
        entries.append((name, shape))
    tensors: Dict[str, np.ndarray] = {}
    for name, shape in entries:
        size = int(np.prod(shape, dtype=np.int64)) if shape else 1
        arr = np.frombuffer(r.take(size * 4), dtype="<f4").reshape(shape)
        tensors[name] = arr
    tail_raw = r.take(r.u32())
    if r.pos != len(blob):
        raise CheckpointFormatError(
            f"{len(blob) - r.pos} trailing bytes after the JSON block")
    try:
        tail = json.loads(tail_raw.decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise CheckpointFormatError(f"bad JSON block: {e}") from None

    state = init_state(config_from_dict(tail["config"]))
    expected: Dict[str, Tuple[int, ...]] = {}
    for prefix, net in (("gen", state.gen), ("disc", state.disc)):
        for name, p in net.named_params().items():
            expected[f"{prefix}.{name}"] = p.data.shape
        for name, u in net.named_sn().items():
            expected[f"{prefix}.sn.{name}"] = u.shape
    allowed_opt = {f"opt.{pfx}.{mom}.{name}": expected[f"{net}.{name}"]
                   for pfx, net in (("g", "gen"), ("d", "disc"))
                   for mom in ("m1", "m2")
                   for name in _net_param_names(state, net)}
    missing = set(expected) - set(tensors)
    unexpected = set(tensors) - set(expected) - set(allowed_opt)
    if missing or unexpected:
        raise CheckpointNameError(
            f"tensor names do not match the configured networks; "
            f"missing {sorted(missing)}, unexpected {sorted(unexpected)}")
    for name, arr in tensors.items():
        want = expected.get(name, allowed_opt.get(name))
        if arr.shape != want:
            raise CheckpointNameError(
                f"tensor '{name}' has shape {arr.shape}, expected {want}")

    for prefix, net in (("gen", state.gen), ("disc", state.disc)):
        for name, p in net.named_params().items():
            p.data[...] = tensors[f"{prefix}.{name}"].astype(p.dtype)
        sn_prefix = f"{prefix}.sn."
        mapping = {name[len(sn_prefix):]: np.array(arr)
                   for name, arr in tensors.items()
                   if name.startswith(sn_prefix)}
        net.load_sn(mapping)
    for pfx, opt in (("g", state.g_opt), ("d", state.d_opt)):
        opt.t = int(tail["opt"][f"{pfx}_t"])
        for name, arr in tensors.items():
            if name.startswith(f"opt.{pfx}.m1."):
                opt.m1[name[len(f"opt.{pfx}.m1."):]] = np.array(arr)
            elif name.startswith(f"opt.{pfx}.m2."):
                opt.m2[name[len(f"opt.{pfx}.m2."):]] = np.array(arr)
    state.rng = np.random.Generator(np.random.PCG64())
    state.rng.bit_generator.state = tail["rng"]
    state.step = int(tail["step"])
    return state


def _net_param_names(state: TrainState, which: str) -> List[str]:
    net = state.gen if which == "gen" else state.disc
    return list(net.named_params())
