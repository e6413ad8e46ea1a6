"""Training loop, checkpoints and inference helpers."""
from __future__ import annotations

import os
from dataclasses import dataclass

import numpy as np

from .. import numcore as nc
from ..errors import ConfigError, ContractError, ParseError
from ..matchloss import GroundTruth, build_denoise_batch, total_loss
from ..msattn import DetectorNet
from ..scenes import read_dataset
from .config import RunConfig
from .evaluate import Detections, EvalReport, evaluate

PARAMS_FILE = "params.snap"
OPTIM_FILE = "optim.snap"
CONFIG_FILE = "config.txt"
STATE_FILE = "state.txt"


@dataclass
class SplitArrays:
    """A dataset split held in memory."""

    visible: np.ndarray
    infrared: np.ndarray
    gts: list

    def __len__(self):
        return len(self.gts)

    @classmethod
    def from_dataset(cls, ds) -> "SplitArrays":
        vis, ir, ann = ds.arrays()
        return cls(vis, ir, [GroundTruth.from_rows(a) for a in ann])

    @classmethod
    def load(cls, root) -> "SplitArrays":
        if not os.path.isdir(root):
            raise ConfigError(f"dataset split not found: {root}")
        return cls.from_dataset(read_dataset(root))


# ------------------------------------------------------------------ checkpoints
def save_checkpoint(path, cfg: RunConfig, net: DetectorNet, opt: nc.Adam | None = None, step: int = 0):
    os.makedirs(path, exist_ok=True)
    nc.write_snapshot(os.path.join(path, PARAMS_FILE), net.params)
    cfg.save(os.path.join(path, CONFIG_FILE))
    if opt is not None:
        state = opt.state()
        t = state.pop("t")
        nc.write_snapshot(os.path.join(path, OPTIM_FILE), {"t": np.array(float(t)), **state})
    with open(os.path.join(path, STATE_FILE), "w") as fh:
        fh.write(f"step = {step}\n")


def load_checkpoint(path, cfg: RunConfig | None = None):
    """Returns ``(cfg, net, optimizer_state or None, step)``."""
    cfg_path = os.path.join(path, CONFIG_FILE)
    if not os.path.exists(cfg_path):
        raise ParseError("checkpoint config missing", cfg_path)
    saved = RunConfig.load(cfg_path)
    cfg = cfg or saved
    if cfg.model != saved.model:
        raise ContractError(f"checkpoint {path} was trained with a different model configuration")
    net = DetectorNet(cfg.model, seed=cfg.seed)
    net.params.load_state(nc.read_snapshot(os.path.join(path, PARAMS_FILE)))
    opt_state = None
    if os.path.exists(os.path.join(path, OPTIM_FILE)):
        raw = nc.read_snapshot(os.path.join(path, OPTIM_FILE))
        opt_state = dict(raw)
        opt_state["t"] = int(raw["t"])
    step = 0
    state_path = os.path.join(path, STATE_FILE)
    if os.path.exists(state_path):
        with open(state_path) as fh:
            step = int(fh.read().split("=")[1])
    return cfg, net, opt_state, step


# ---------------------------------------------------------------------- training
def _epoch_order(seed: int, epoch: int, n: int) -> np.ndarray:
    return np.random.default_rng([seed, 17, epoch]).permutation(n)


def _step_rng(seed: int, step: int) -> np.random.Generator:
    return np.random.default_rng([seed, 29, step])


def steps_per_epoch(cfg: RunConfig, n: int) -> int:
    return -(-n // cfg.batch_size)


def lr_at(cfg: RunConfig, epoch: int) -> float:
    return cfg.lr * (cfg.lr_drop if 0 < cfg.lr_drop_epoch <= epoch else 1.0)


def batch_at(cfg: RunConfig, data: SplitArrays, step: int):
    """Image indices of global step ``step`` (a pure function of seed and step)."""
    per = steps_per_epoch(cfg, len(data))
    epoch, k = divmod(step, per)
    order = _epoch_order(cfg.seed, epoch, len(data))
    return epoch, order[k * cfg.batch_size:(k + 1) * cfg.batch_size]


def batch_loss(cfg: RunConfig, net: DetectorNet, data: SplitArrays, idx, step: int):
    gts = [data.gts[i] for i in idx]
    dn = None
    if cfg.dn_groups > 0:
        dn = build_denoise_batch(gts, cfg.dn_groups, cfg.dn_box_noise, cfg.dn_label_flip,
                                 _step_rng(cfg.seed, step), cfg.model.num_classes, cfg.model.queries)
    args = (dn.labels, dn.boxes, dn.mask) if dn is not None else ()
    out = net(data.visible[idx], data.infrared[idx], *args)
    return total_loss(out, gts, cfg.loss, dn=dn)


def format_log(step: int, epoch: int, values: dict) -> str:
    parts = [f"step={step}", f"epoch={epoch}"] + [f"{k}={v!r}" for k, v in values.items()]
    return " ".join(parts)


class Trainer:
    """Seeded, resumable training over an in-memory split."""

    def __init__(self, cfg: RunConfig, data: SplitArrays, net: DetectorNet | None = None,
                 opt_state: dict | None = None, step: int = 0):
        self.cfg = cfg.validate()
        self.data = data
        if len(data) == 0:
            raise ConfigError("training split is empty")
        self.net = net or DetectorNet(cfg.model, seed=cfg.seed)
        self.opt = nc.Adam(self.net.params, lr=cfg.lr, weight_decay=cfg.weight_decay,
                           clip_norm=cfg.clip_norm or None)
        if opt_state is not None:
            self.opt.load_state(opt_state)
        self.step = step

    @property
    def total_steps(self) -> int:
        return self.cfg.epochs * steps_per_epoch(self.cfg, len(self.data))

    def train_step(self) -> str:
        epoch, idx = batch_at(self.cfg, self.data, self.step)
        self.opt.lr = lr_at(self.cfg, epoch)
        self.net.params.zero_grad()
        bd = batch_loss(self.cfg, self.net, self.data, idx, self.step)
        nc.backward(bd.total)
        self.opt.step()
        line = format_log(self.step, epoch, bd.values())
        self.step += 1
        return line

    def run(self, log_path=None, max_steps: int | None = None, progress=None) -> list:
        """Train until the epoch budget (or ``max_steps`` more steps) is used."""
        lines = []
        stop = self.total_steps if max_steps is None else min(self.total_steps, self.step + max_steps)
        fh = open(log_path, "a") if log_path else None
        try:
            while self.step < stop:
                line = self.train_step()
                lines.append(line)
                if fh:
                    fh.write(line + "\n")
                    fh.flush()
                if progress:
                    progress(self.step, line)
        finally:
            if fh:
                fh.close()
        return lines


def grad_check_batch(cfg: RunConfig, net: DetectorNet, data: SplitArrays, samples: int = 40,
                     batch: int = 1) -> float:
    """Finite-difference check of the full training loss on one batch."""
    idx = np.arange(min(batch, len(data)))
    return nc.grad_check(lambda: batch_loss(cfg, net, data, idx, 0).total, list(net.params),
                         samples=samples, seed=cfg.seed)


# --------------------------------------------------------------------- inference
def predict(net: DetectorNet, visible, infrared, batch: int = 25) -> list:
    """Per-image :class:`Detections` (all matching queries, no NMS)."""
    dets = []
    with nc.no_grad():
        for s in range(0, len(visible), batch):
            out = net(visible[s:s + batch], infrared[s:s + batch])
            probs, boxes = out.probs, out.boxes.data
            dets += [Detections.from_probs(probs[b], boxes[b]) for b in range(len(probs))]
    return dets


def evaluate_split(net: DetectorNet, data: SplitArrays, batch: int = 25) -> EvalReport:
    if max((int(g.labels.max()) for g in data.gts if len(g)), default=-1) >= net.cfg.num_classes:
        raise ContractError(f"dataset has class ids beyond the model's {net.cfg.num_classes} classes")
    return evaluate(predict(net, data.visible, data.infrared, batch), data.gts, net.cfg.num_classes)
