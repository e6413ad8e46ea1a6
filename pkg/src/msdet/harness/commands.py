"""Command implementations behind the CLI: gen, train, eval, viz and ablate."""
from __future__ import annotations

import hashlib
import os
import statistics
import time
from dataclasses import dataclass, field, replace

import numpy as np

from ..errors import ConfigError, ContractError
from ..matchloss import GroundTruth
from ..msattn import DetectorNet
from ..scenes import build_split, read_dataset, write_dataset
from .config import RunConfig
from .evaluate import EvalReport
from .train import (SplitArrays, Trainer, evaluate_split, grad_check_batch, load_checkpoint,
                    save_checkpoint)
from .viz import viz_queries, viz_sampling

SPLITS = ("train", "val", "val_shift")
LOG_FILE = "train.log"


def echo(text):
    print(text, flush=True)


def _say(out, text):
    if out is not None:
        out(text)


# --------------------------------------------------------------------- datasets
def split_plan(cfg: RunConfig) -> dict:
    """``split -> (scene params, first index, count)``.

    ``val_shift`` re-renders the val scenes (same seed and indices) with
    ``max_shift`` raised to ``cfg.val_shift``.
    """
    cfg.validate()
    return {"train": (cfg.scene, 0, cfg.num_train),
            "val": (cfg.scene, cfg.num_train, cfg.num_val),
            "val_shift": (replace(cfg.scene, max_shift=cfg.val_shift), cfg.num_train, cfg.num_val)}


def build_arrays(cfg: RunConfig, split: str) -> SplitArrays:
    """Render one split in memory (identical content to what ``cmd_gen`` writes)."""
    params, first, count = split_plan(cfg)[split]
    man, _, vis, ir = build_split(params, cfg.seed, split, first, count)
    return SplitArrays(np.stack(vis), np.stack(ir), [GroundTruth.from_rows(a) for a in man.annotations])


def dir_checksum(root) -> str:
    """SHA-256 over relative paths and bytes of every file under ``root``."""
    h = hashlib.sha256()
    for base, dirs, files in os.walk(root):
        dirs.sort()
        for name in sorted(files):
            path = os.path.join(base, name)
            h.update(os.path.relpath(path, root).encode() + b"\0")
            with open(path, "rb") as fh:
                h.update(fh.read())
    return h.hexdigest()


def cmd_gen(cfg: RunConfig, out=echo) -> dict:
    """Write the train, val and shifted-val splits under ``cfg.data_dir``."""
    plan = split_plan(cfg)
    summary = {}
    for split, (params, first, count) in plan.items():
        root = os.path.join(cfg.data_dir, split)
        man, _, vis, ir = build_split(params, cfg.seed, split, first, count)
        try:
            write_dataset(root, man, vis, ir)
        except OSError as exc:
            raise OSError(f"cannot write dataset split to {root}: {exc}") from exc
        n_obj = sum(len(a) for a in man.annotations)
        summary[split] = {"root": root, "scenes": man.count, "objects": n_obj, "checksum": dir_checksum(root)}
        _say(out, f"{split}: {man.count} scenes, {n_obj} objects, max_shift={params.max_shift!r} -> {root}")
    return summary


def load_split(cfg: RunConfig, split: str) -> SplitArrays:
    root = os.path.join(cfg.data_dir, split)
    if not os.path.isdir(root):
        raise ConfigError(f"dataset split {split!r} not found at {root}; run 'gen' first")
    return SplitArrays.from_dataset(read_dataset(root))


# ---------------------------------------------------------------------- training
def cmd_train(cfg: RunConfig, resume: str | None = None, grad_check: bool = False,
              max_steps: int | None = None, out=echo) -> dict:
    """Train on ``data_dir/train``; checkpoints and the loss log go to ``out_dir``.

    The best checkpoint is chosen by val AP50 at the end of every epoch
    (skipped when no val split exists). ``grad_check`` only runs a
    finite-difference check of the loss on one batch (of the ``resume``
    checkpoint when given, else of a fresh model) and returns.
    """
    cfg.validate()
    train = load_split(cfg, "train")
    if grad_check:
        net = load_checkpoint(resume, cfg)[1] if resume else DetectorNet(cfg.model, seed=cfg.seed)
        err = grad_check_batch(cfg, net, train)
        _say(out, f"grad_check max_rel_error = {err!r}")
        return {"grad_check": err}
    val_root = os.path.join(cfg.data_dir, "val")
    val = SplitArrays.load(val_root) if os.path.isdir(val_root) else None
    net = opt_state = None
    step = 0
    if resume:
        _, net, opt_state, step = load_checkpoint(resume, cfg)
    trainer = Trainer(cfg, train, net, opt_state, step)
    os.makedirs(cfg.out_dir, exist_ok=True)
    log_path = os.path.join(cfg.out_dir, LOG_FILE)
    if not resume and os.path.exists(log_path):
        os.remove(log_path)
    per = -(-len(train) // cfg.batch_size)
    best = (-1.0, -1)
    best_path = os.path.join(cfg.out_dir, "best")
    t0 = time.time()

    def progress(s, line):
        nonlocal best
        if s % per == 0:
            epoch = s // per - 1
            msg = f"epoch {epoch} done ({s} steps, {time.time() - t0:.0f}s)"
            if val is not None:
                ap50 = evaluate_split(trainer.net, val, cfg.eval_batch).ap50
                msg += f" val ap50={ap50:.4f}"
                if ap50 > best[0]:
                    best = (ap50, epoch)
                    save_checkpoint(best_path, cfg, trainer.net, trainer.opt, s)
            _say(out, msg)

    trainer.run(log_path, max_steps=max_steps, progress=progress)
    final_path = os.path.join(cfg.out_dir, "final")
    save_checkpoint(final_path, cfg, trainer.net, trainer.opt, trainer.step)
    if best[1] >= 0:
        with open(os.path.join(cfg.out_dir, "best.txt"), "w") as fh:
            fh.write(f"epoch = {best[1]}\nap50 = {best[0]!r}\n")
    _say(out, f"final checkpoint -> {final_path}")
    return {"steps": trainer.step, "log": log_path, "final": final_path,
            "best": best_path if best[1] >= 0 else None, "best_ap50": best[0]}


def cmd_eval(cfg: RunConfig, checkpoint: str, split: str = "val", report_path: str | None = None,
             out=echo) -> EvalReport:
    _, net, _, _ = load_checkpoint(checkpoint)
    data = load_split(cfg, split)
    report = evaluate_split(net, data, cfg.eval_batch)
    report.extra.update({"split": split, "checkpoint": checkpoint})
    path = report_path or os.path.join(checkpoint, f"eval_{split}.txt")
    report.write(path)
    for line in report.lines():
        _say(out, line)
    return report


def _image_pair(cfg: RunConfig, split: str, index: int):
    root = os.path.join(cfg.data_dir, split)
    if not os.path.isdir(root):
        raise ConfigError(f"dataset split {split!r} not found at {root}; run 'gen' first")
    ds = read_dataset(root)
    if not 0 <= index < len(ds):
        raise ContractError(f"image index {index} outside [0, {len(ds)})")
    return ds.visible[index], ds.infrared[index]


def cmd_viz_queries(cfg: RunConfig, checkpoint: str, split: str, index: int, out_dir: str,
                    highlight: int = 10, out=echo) -> dict:
    _, net, _, _ = load_checkpoint(checkpoint)
    vis, ir = _image_pair(cfg, split, index)
    drawn = viz_queries(net, vis, ir, out_dir, highlight)
    for name, pts in drawn.items():
        _say(out, f"{name}: {len(pts)} query points -> {os.path.join(out_dir, f'queries_{name}.ppm')}")
    return drawn


def cmd_viz_sampling(cfg: RunConfig, checkpoint: str, split: str, index: int, query: int,
                     out_dir: str, out=echo) -> dict:
    _, net, _, _ = load_checkpoint(checkpoint)
    vis, ir = _image_pair(cfg, split, index)
    drawn = viz_sampling(net, vis, ir, query, out_dir)
    _say(out, f"{len(drawn)} overlays for query {query} -> {out_dir}")
    return drawn


# ---------------------------------------------------------------------- ablation
ABLATION_GRID = {
    "full": {},
    "visible": {"modalities": ("visible",)},
    "infrared": {"modalities": ("infrared",)},
    "add-fusion": {"mcqs": False, "mdca": False},
    "mcqs-only": {"mdca": False},
    "mdca-only": {"mcqs": False},
    "no-cqs": {"cqs": False},
}
DEFAULT_VARIANTS = ("full", "visible", "infrared", "add-fusion")


@dataclass
class AblationResult:
    """AP50 per variant and seed on the val split and its shifted twin."""

    seeds: tuple
    ap50: dict = field(default_factory=dict)        # variant -> [per seed]
    ap50_shift: dict = field(default_factory=dict)  # variant -> [per seed]
    seconds: float = 0.0

    def median(self, variant: str) -> float:
        return statistics.median(self.ap50[variant])

    def degradation(self, variant: str) -> float:
        """Median over seeds of the paired drop from val to shifted val."""
        return statistics.median(a - b for a, b in zip(self.ap50[variant], self.ap50_shift[variant]))

    def margins(self, reference: str = "full") -> dict:
        return {v: self.median(reference) - self.median(v) for v in self.ap50 if v != reference}

    def lines(self) -> list:
        out = [f"seeds = {','.join(str(s) for s in self.seeds)}", f"seconds = {self.seconds:.1f}"]
        for v in self.ap50:
            out.append(f"{v}.ap50 = {','.join(repr(x) for x in self.ap50[v])}")
            out.append(f"{v}.ap50_shift = {','.join(repr(x) for x in self.ap50_shift[v])}")
            out.append(f"{v}.median_ap50 = {self.median(v)!r}")
            out.append(f"{v}.median_degradation = {self.degradation(v)!r}")
        return out

    def write(self, path):
        with open(path, "w") as fh:
            fh.write("\n".join(self.lines()) + "\n")


def run_ablation(cfg: RunConfig, seeds=(0, 1, 2), variants=DEFAULT_VARIANTS, out=echo) -> AblationResult:
    """Train every variant on every seed (data and init follow the seed) and score val AP50."""
    unknown = [v for v in variants if v not in ABLATION_GRID]
    if unknown:
        raise ConfigError(f"unknown ablation variants {unknown}; choose from {sorted(ABLATION_GRID)}")
    res = AblationResult(tuple(seeds), {v: [] for v in variants}, {v: [] for v in variants})
    t0 = time.time()
    for seed in seeds:
        base = cfg.evolve(seed=seed)
        train = build_arrays(base, "train")
        val = build_arrays(base, "val")
        shifted = build_arrays(base, "val_shift")
        for v in variants:
            run_cfg = base.evolve(model=replace(base.model, **ABLATION_GRID[v]))
            trainer = Trainer(run_cfg, train)
            trainer.run()
            a = evaluate_split(trainer.net, val, cfg.eval_batch).ap50
            b = evaluate_split(trainer.net, shifted, cfg.eval_batch).ap50
            res.ap50[v].append(a)
            res.ap50_shift[v].append(b)
            _say(out, f"seed={seed} variant={v} ap50={a:.4f} ap50_shift={b:.4f} ({time.time() - t0:.0f}s)")
    res.seconds = time.time() - t0
    return res


def cmd_ablate(cfg: RunConfig, seeds=(0, 1, 2), variants=DEFAULT_VARIANTS, out=echo) -> AblationResult:
    res = run_ablation(cfg, seeds, variants, out)
    os.makedirs(cfg.out_dir, exist_ok=True)
    path = os.path.join(cfg.out_dir, "ablation.txt")
    res.write(path)
    for line in res.lines():
        _say(out, line)
    if "full" in res.ap50:
        for v, m in res.margins().items():
            _say(out, f"full - {v}: {m * 100:+.2f} AP50 points, degradation full={res.degradation('full'):.4f} "
                      f"{v}={res.degradation(v):.4f}")
    return res
