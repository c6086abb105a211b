"""Two-phase schedule: URL pretraining of the teacher, then teacher-student training.

The semi-supervised phase draws one labeled and one unlabeled batch per step.
The labeled stream is weighted by its own entropy mask (threshold ``q_sup``);
the unlabeled stream uses hard teacher pseudo-labels weighted by the teacher's
entropy mask (threshold ``q_unsup``). The teacher follows the student by EMA.

``batch_mixer`` is the hook for input-mixing schemes (copy-paste and the like).
It receives ``(x_l, y_l, x_u, y_u, rng)`` after pseudo-labelling and returns the
same four tensors; the default is the identity.
"""

from __future__ import annotations

import base64
import copy
import io
import json
import logging
import struct
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np
import torch

from .datasets import Sample, augment_batch
from .errors import CheckpointError, ConfigError, ShapeError
from .model import NetworkConfig, UNet, init_network, softmax
from .region_learning import (
    NORMALIZATIONS,
    LossBreakdown,
    crl_loss,
    generate_pseudo_labels,
    plain_loss,
    split_regions,
    total_loss,
    url_loss,
)
from .uncertainty import RegionMask, region_mask

log = logging.getLogger(__name__)

STRATEGIES = ("URL", "CRL")
EMA_CONVENTIONS = ("standard", "inverse")


@dataclass
class AblationFlags:
    url_on: bool = True
    crl_on: bool = True
    remove_unreliable: bool = False
    freeze_pseudo_labels: bool = False
    # which weighting each stream gets when its module is on
    region_strategy_labeled: str = "URL"
    region_strategy_unlabeled: str = "CRL"


@dataclass
class TrainConfig:
    q_sup: float = 95.0
    q_unsup: float = 99.0
    alpha: float = 0.5
    labeled_ratio: float = 0.05
    pretrain_iters: int = 2000
    semi_iters: int = 4000
    batch_labeled: int = 8
    batch_unlabeled: int = 8
    lr: float = 0.01
    momentum: float = 0.9
    ema_cap: float = 0.99
    ema_convention: str = "standard"
    percentile_scope: str = "batch"
    # how region terms are scaled: "region" means, or "pixel" (scaled by region size)
    loss_normalization: str = "region"
    # keep URL weighting on the labeled stream during the semi-supervised phase
    url_in_semi: bool = True
    augment: bool = False
    base_width: int = 16
    depth: int = 4
    eval_network: str = "student"
    seed: int = 0
    ablation_flags: AblationFlags = field(default_factory=AblationFlags)

    def validate(self) -> None:
        for name in ("q_sup", "q_unsup"):
            q = getattr(self, name)
            if not 0 < q < 100:
                raise ConfigError(f"{name} must lie in (0, 100), got {q}")
        if not 0 <= self.alpha <= 1:
            raise ConfigError(f"alpha must lie in [0, 1], got {self.alpha}")
        if not 0 < self.ema_cap <= 1:
            raise ConfigError(f"ema_cap must lie in (0, 1], got {self.ema_cap}")
        if not 0 < self.labeled_ratio < 1:
            raise ConfigError(f"labeled_ratio must lie in (0, 1), got {self.labeled_ratio}")
        if self.ema_convention not in EMA_CONVENTIONS:
            raise ConfigError(f"ema_convention must be one of {EMA_CONVENTIONS}")
        if self.loss_normalization not in NORMALIZATIONS:
            raise ConfigError(f"loss_normalization must be one of {NORMALIZATIONS}")
        if self.percentile_scope not in ("batch", "image"):
            raise ConfigError("percentile_scope must be 'batch' or 'image'")
        if self.eval_network not in ("student", "teacher"):
            raise ConfigError("eval_network must be 'student' or 'teacher'")
        for name in ("pretrain_iters", "semi_iters"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be non-negative")
        for name in ("batch_labeled", "batch_unlabeled"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be positive")
        f = self.ablation_flags
        for name in ("region_strategy_labeled", "region_strategy_unlabeled"):
            if getattr(f, name) not in STRATEGIES:
                raise ConfigError(f"{name} must be one of {STRATEGIES}")

    def network_config(self, in_channels: int, num_classes: int) -> NetworkConfig:
        return NetworkConfig(in_channels, num_classes, self.base_width, self.depth, self.seed)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        flags = d.pop("ablation_flags", None) or {}
        if isinstance(flags, AblationFlags):
            flags = asdict(flags)
        flag_names = {f.name for f in fields(AblationFlags)}
        bad = set(flags) - flag_names
        if bad:
            raise ConfigError(f"unknown ablation flags: {sorted(bad)}")
        cfg = cls(**d, ablation_flags=AblationFlags(**flags))
        cfg.validate()
        return cfg


@dataclass
class TrainState:
    student: UNet
    teacher: UNet
    optimizer: torch.optim.Optimizer
    step: int
    rng: np.random.Generator
    config: TrainConfig
    frozen_pseudo: Optional[tuple] = None


# --- losses per stream ----------------------------------------------------------

def _weighted(P, Y, mask: RegionMask, strategy: str, alpha: float, num_classes: int,
              normalization: str) -> LossBreakdown:
    splits = split_regions(Y, mask, num_classes)
    if strategy == "URL":
        return url_loss(P, splits, alpha, normalization)
    return crl_loss(P, splits, alpha, normalization)


def labeled_stream_loss(P, Y, config: TrainConfig, num_classes: int, weighted: bool = True):
    """Loss of the labeled stream and the mask used (None when unweighted)."""
    flags = config.ablation_flags
    if not (flags.url_on and weighted):
        return plain_loss(P, Y, num_classes), None
    mask = region_mask(P, config.q_sup, config.percentile_scope)
    loss = _weighted(P, Y, mask, flags.region_strategy_labeled, config.alpha, num_classes,
                     config.loss_normalization)
    return loss, mask


def unlabeled_stream_loss(P, Y_pseudo, mask: Optional[RegionMask], config: TrainConfig, num_classes: int):
    flags = config.ablation_flags
    if flags.remove_unreliable:
        # exclusion instead of down-weighting: the uncertain region gets zero weight
        return crl_loss(P, split_regions(Y_pseudo, mask, num_classes), 0.0, config.loss_normalization)
    if not flags.crl_on:
        return plain_loss(P, Y_pseudo, num_classes)
    return _weighted(P, Y_pseudo, mask, flags.region_strategy_unlabeled, config.alpha, num_classes,
                     config.loss_normalization)


# --- EMA ------------------------------------------------------------------------

def ema_lambda(step: int, ema_cap: float) -> float:
    return min(step / (step + 1), ema_cap)


@torch.no_grad()
def ema_update(teacher: torch.nn.Module, student: torch.nn.Module, step: int, ema_cap: float,
               convention: str = "standard") -> float:
    """Move teacher parameters towards the student in place; returns the lambda used.

    ``inverse``:  teacher = (1 - lam) * teacher + lam * student
    ``standard``: teacher = lam * teacher + (1 - lam) * student
    with lam = min(step / (step + 1), ema_cap).
    """
    if convention not in EMA_CONVENTIONS:
        raise ConfigError(f"unknown EMA convention {convention!r}")
    lam = ema_lambda(step, ema_cap)
    keep = 1 - lam if convention == "inverse" else lam
    t_params = dict(teacher.named_parameters())
    s_params = dict(student.named_parameters())
    if t_params.keys() != s_params.keys():
        raise ShapeError("teacher and student have different parameter sets")
    for name, t in t_params.items():
        s = s_params[name]
        if t.shape != s.shape:
            raise ShapeError(f"parameter {name}: teacher {list(t.shape)} vs student {list(s.shape)}")
        t.mul_(keep).add_(s, alpha=1 - keep)
    for (name, tb), (_, sb) in zip(teacher.named_buffers(), student.named_buffers()):
        tb.copy_(sb)
    return lam


# --- data helpers ---------------------------------------------------------------

def stack_samples(samples: Sequence[Sample]):
    x = torch.from_numpy(np.stack([s.image for s in samples]).astype(np.float32))
    if samples and samples[0].label is not None:
        y = torch.from_numpy(np.stack([s.label for s in samples]).astype(np.int64))
    else:
        y = None
    return x, y


def _draw(rng: np.random.Generator, x, y, batch: int, augment: bool):
    idx = rng.integers(0, len(x), size=batch)
    xb = x[idx]
    yb = None if y is None else y[idx]
    if augment:
        xa, ya = augment_batch(xb.numpy(), None if yb is None else yb.numpy(), rng)
        xb = torch.from_numpy(xa)
        yb = None if ya is None else torch.from_numpy(ya)
    return idx, xb, yb


def _optimizer(net: torch.nn.Module, config: TrainConfig) -> torch.optim.SGD:
    return torch.optim.SGD(net.parameters(), lr=config.lr, momentum=config.momentum)


# --- phase 1 --------------------------------------------------------------------

def pretrain_teacher(labeled: Sequence[Sample], config: TrainConfig, num_classes: int,
                     net: Optional[UNet] = None, log_fn: Optional[Callable[[dict], None]] = None):
    """Supervised training of the initial teacher on labeled data.

    Returns ``(network, loss_curve)``.
    """
    config.validate()
    if len(labeled) == 0:
        raise ConfigError("pretraining needs at least one labeled sample")
    x, y = stack_samples(labeled)
    if y is None:
        raise ConfigError("pretraining samples must carry labels")
    if net is None:
        net = init_network(config.network_config(x.shape[1], num_classes))
    net.train()
    opt = _optimizer(net, config)
    rng = np.random.default_rng([config.seed, 1])
    curve = []
    for step in range(config.pretrain_iters):
        _, xb, yb = _draw(rng, x, y, config.batch_labeled, config.augment)
        P = softmax(net(xb))
        loss, mask = labeled_stream_loss(P, yb, config, num_classes)
        opt.zero_grad(set_to_none=True)
        loss.total.backward()
        opt.step()
        value = float(loss.total.detach())
        curve.append(value)
        if log_fn is not None:
            rec = {"phase": "pretrain", "step": step, **loss.to_dict("l_"), "lr": config.lr}
            rec["mask_density_l"] = mask.density if mask is not None else 0.0
            log_fn(rec)
    return net, curve


# --- phase 2 --------------------------------------------------------------------

def init_semi_state(teacher0: UNet, config: TrainConfig) -> TrainState:
    teacher = copy.deepcopy(teacher0)
    student = copy.deepcopy(teacher0)
    for p in teacher.parameters():
        p.requires_grad_(False)
    student.train()
    return TrainState(student, teacher, _optimizer(student, config), 0,
                      np.random.default_rng([config.seed, 2]), config)


def _freeze_pseudo_labels(teacher: UNet, x_u: torch.Tensor, config: TrainConfig):
    ys, ps = [], []
    for i in range(0, len(x_u), 16):
        yb, pb = generate_pseudo_labels(teacher, x_u[i:i + 16])
        ys.append(yb)
        ps.append(pb)
    return torch.cat(ys), torch.cat(ps)


def semi_step(state: TrainState, x_l, y_l, x_u, num_classes: int, batch_mixer=None) -> dict:
    """One teacher-student iteration; mutates ``state`` and returns the log record."""
    cfg = state.config
    flags = cfg.ablation_flags
    _, xl, yl = _draw(state.rng, x_l, y_l, cfg.batch_labeled, cfg.augment)
    rec = {"phase": "semi", "step": state.step}

    has_unlabeled = x_u is not None and len(x_u) > 0
    if has_unlabeled:
        if state.frozen_pseudo is not None:
            idx = state.rng.integers(0, len(x_u), size=cfg.batch_unlabeled)
            xu, yu, Pt = x_u[idx], state.frozen_pseudo[0][idx], state.frozen_pseudo[1][idx]
        else:
            _, xu, _ = _draw(state.rng, x_u, None, cfg.batch_unlabeled, False)
            yu, Pt = generate_pseudo_labels(state.teacher, xu)
        if batch_mixer is not None:
            xl, yl, xu, yu = batch_mixer(xl, yl, xu, yu, state.rng)
        if flags.crl_on or flags.remove_unreliable:
            mask_u = region_mask(Pt, cfg.q_unsup, cfg.percentile_scope)
        else:
            mask_u = None
        logits = state.student(torch.cat([xl, xu]))
        P = softmax(logits)
        P_l, P_u = P[: len(xl)], P[len(xl):]
    else:
        P_l = softmax(state.student(xl))

    loss_l, mask_l = labeled_stream_loss(P_l, yl, cfg, num_classes, weighted=cfg.url_in_semi)
    rec.update(loss_l.to_dict("l_"))
    rec["mask_density_l"] = mask_l.density if mask_l is not None else 0.0
    if has_unlabeled:
        loss_u = unlabeled_stream_loss(P_u, yu, mask_u, cfg, num_classes)
        total = total_loss(loss_l, loss_u)
        rec.update(loss_u.to_dict("u_"))
        rec["mask_density_u"] = mask_u.density if mask_u is not None else 0.0
    else:
        total = loss_l.total

    state.optimizer.zero_grad(set_to_none=True)
    total.backward()
    state.optimizer.step()
    rec["lambda"] = ema_update(state.teacher, state.student, state.step, cfg.ema_cap, cfg.ema_convention)
    rec["total"] = float(total.detach())
    rec["lr"] = cfg.lr
    state.step += 1
    return rec


def train_semi(labeled: Sequence[Sample], unlabeled: Sequence[Sample], teacher0: Optional[UNet],
               config: TrainConfig, num_classes: int, state: Optional[TrainState] = None,
               num_iters: Optional[int] = None, log_fn: Optional[Callable[[dict], None]] = None,
               batch_mixer=None):
    """Run (or resume) the semi-supervised phase.

    Pass ``teacher0`` to start fresh, or ``state`` to continue a checkpointed run.
    Runs until ``config.semi_iters`` total steps unless ``num_iters`` is given.
    Returns ``(state, log_records)``.
    """
    config.validate()
    if len(labeled) == 0:
        raise ConfigError("semi-supervised training needs labeled samples")
    x_l, y_l = stack_samples(labeled)
    x_u = stack_samples(unlabeled)[0] if len(unlabeled) else None
    if x_u is None:
        log.warning("no unlabeled samples: semi-supervised phase degrades to supervised training")
    if state is None:
        if teacher0 is None:
            raise ConfigError("need either a pretrained teacher or a state to resume")
        state = init_semi_state(teacher0, config)
        if config.ablation_flags.freeze_pseudo_labels and x_u is not None:
            state.frozen_pseudo = _freeze_pseudo_labels(state.teacher, x_u, config)
    elif config.ablation_flags.freeze_pseudo_labels and x_u is not None and state.frozen_pseudo is None:
        raise ConfigError("cannot resume a frozen-pseudo-label run without its pseudo-label table")
    end = state.step + num_iters if num_iters is not None else config.semi_iters
    records = []
    while state.step < end:
        rec = semi_step(state, x_l, y_l, x_u, num_classes, batch_mixer)
        records.append(rec)
        if log_fn is not None:
            log_fn(rec)
    return state, records


def eval_network(state: TrainState) -> UNet:
    return state.teacher if state.config.eval_network == "teacher" else state.student


# --- checkpoints ----------------------------------------------------------------

CKPT_MAGIC = b"BIRGCKPT"
CKPT_VERSION = 1


def _tensor_blobs(prefix: str, tensors: dict, entries: list, chunks: list, offset: int) -> int:
    for name, t in tensors.items():
        arr = t.detach().cpu().contiguous().numpy().astype("<f4")
        raw = arr.tobytes()
        entries.append({"name": f"{prefix}{name}", "shape": list(arr.shape), "offset": offset, "nbytes": len(raw)})
        chunks.append(raw)
        offset += len(raw)
    return offset


def save_network(path, net: UNet, step: int = 0, extra: Optional[dict] = None) -> None:
    _write_checkpoint(path, net.config, {"net.": dict(net.state_dict())}, {"step": step, **(extra or {})})


def _write_checkpoint(path, net_config: NetworkConfig, groups: dict, meta: dict) -> None:
    entries, chunks, offset = [], [], 0
    for prefix, tensors in groups.items():
        offset = _tensor_blobs(prefix, tensors, entries, chunks, offset)
    header = {"version": CKPT_VERSION, "network": asdict(net_config), "tensors": entries, **meta}
    hbytes = json.dumps(header).encode()
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as f:
        f.write(CKPT_MAGIC)
        f.write(struct.pack("<IQ", CKPT_VERSION, len(hbytes)))
        f.write(hbytes)
        for c in chunks:
            f.write(c)


def read_checkpoint(path):
    """Parse a checkpoint into (header dict, {name: float32 tensor})."""
    raw = Path(path).read_bytes()
    if raw[:8] != CKPT_MAGIC:
        raise CheckpointError(f"{path} is not a checkpoint file")
    version, hlen = struct.unpack_from("<IQ", raw, 8)
    if version != CKPT_VERSION:
        raise CheckpointError(f"checkpoint version {version} is not supported (expected {CKPT_VERSION})")
    start = 8 + struct.calcsize("<IQ")
    header = json.loads(raw[start:start + hlen].decode())
    base = start + hlen
    tensors = {}
    for e in header["tensors"]:
        lo = base + e["offset"]
        if lo + e["nbytes"] > len(raw):
            raise CheckpointError(f"checkpoint truncated at tensor {e['name']}")
        arr = np.frombuffer(raw, dtype="<f4", count=e["nbytes"] // 4, offset=lo).reshape(e["shape"])
        tensors[e["name"]] = torch.from_numpy(arr.astype(np.float32))
    return header, tensors


def _check_network(header: dict, expected: Optional[NetworkConfig]) -> NetworkConfig:
    cfg = NetworkConfig(**header["network"])
    if expected is not None:
        for k in ("in_channels", "num_classes", "base_width", "depth"):
            if getattr(cfg, k) != getattr(expected, k):
                raise CheckpointError(f"checkpoint {k}={getattr(cfg, k)} but expected {getattr(expected, k)}")
    return cfg


def _load_into(net: torch.nn.Module, tensors: dict, prefix: str) -> None:
    sd = net.state_dict()
    new = {}
    for name, ref in sd.items():
        key = prefix + name
        if key not in tensors:
            raise CheckpointError(f"checkpoint lacks tensor {key}")
        if tuple(tensors[key].shape) != tuple(ref.shape):
            raise CheckpointError(f"tensor {key}: shape {list(tensors[key].shape)} vs network {list(ref.shape)}")
        new[name] = tensors[key]
    net.load_state_dict(new)


def load_network(path, expected: Optional[NetworkConfig] = None, which: str = "auto") -> UNet:
    """Load a bare network, or the student/teacher of a training checkpoint."""
    header, tensors = read_checkpoint(path)
    cfg = _check_network(header, expected)
    net = UNet(cfg)
    if which == "auto":
        if any(k.startswith("net.") for k in tensors):
            which = "net"
        else:
            which = header.get("train_config", {}).get("eval_network", "student")
    _load_into(net, tensors, which + ".")
    return net


def checkpoint_save(state: TrainState, path) -> None:
    groups = {
        "student.": dict(state.student.state_dict()),
        "teacher.": dict(state.teacher.state_dict()),
    }
    names = [n for n, _ in state.student.named_parameters()]
    momentum = {}
    for name, p in zip(names, state.student.parameters()):
        buf = state.optimizer.state.get(p, {}).get("momentum_buffer")
        if buf is not None:
            momentum[name] = buf
    groups["optim.momentum."] = momentum
    if state.frozen_pseudo is not None:
        groups["frozen."] = {"labels": state.frozen_pseudo[0].float(), "probs": state.frozen_pseudo[1]}
    buf = io.BytesIO()
    torch.save(torch.random.get_rng_state(), buf)
    meta = {
        "step": state.step,
        "train_config": state.config.to_dict(),
        "rng": {
            "numpy": state.rng.bit_generator.state,
            "torch": base64.b64encode(buf.getvalue()).decode(),
        },
    }
    _write_checkpoint(path, state.student.config, groups, meta)


def checkpoint_load(path, expected: Optional[NetworkConfig] = None,
                    config: Optional[TrainConfig] = None) -> TrainState:
    header, tensors = read_checkpoint(path)
    net_cfg = _check_network(header, expected)
    if "train_config" not in header:
        raise CheckpointError(f"{path} holds a bare network, not a training state")
    cfg = config or TrainConfig.from_dict(header["train_config"])
    student, teacher = UNet(net_cfg), UNet(net_cfg)
    _load_into(student, tensors, "student.")
    _load_into(teacher, tensors, "teacher.")
    for p in teacher.parameters():
        p.requires_grad_(False)
    opt = _optimizer(student, cfg)
    for name, p in student.named_parameters():
        key = "optim.momentum." + name
        if key in tensors:
            opt.state[p]["momentum_buffer"] = tensors[key].clone()
    rng = np.random.default_rng()
    rng.bit_generator.state = header["rng"]["numpy"]
    torch.random.set_rng_state(torch.load(io.BytesIO(base64.b64decode(header["rng"]["torch"]))))
    frozen = None
    if "frozen.labels" in tensors:
        frozen = (tensors["frozen.labels"].long(), tensors["frozen.probs"])
    return TrainState(student, teacher, opt, int(header["step"]), rng, cfg, frozen)
