"""Run configuration as plain ``key = value`` text."""
from __future__ import annotations

from dataclasses import dataclass, field, fields, replace

from ..errors import ConfigError, ParseError
from ..matchloss import LossWeights
from ..msattn import ModelConfig
from ..scenes import SceneParams


@dataclass(frozen=True)
class RunConfig:
    """Everything a run needs; every field has a default.

    Model, loss and scene settings live in their own dataclasses and are
    serialized with ``model.``, ``loss.`` and ``scene.`` prefixes.
    """

    model: ModelConfig = field(default_factory=ModelConfig)
    loss: LossWeights = field(default_factory=LossWeights)
    scene: SceneParams = field(default_factory=SceneParams)
    data_dir: str = "data"
    out_dir: str = "runs/default"
    seed: int = 0
    num_scenes: int = 500
    train_fraction: float = 0.8
    val_shift: float = 0.08
    epochs: int = 30
    batch_size: int = 8
    lr: float = 1e-3
    lr_drop_epoch: int = 24
    lr_drop: float = 0.1
    weight_decay: float = 0.0
    clip_norm: float = 1.0
    dn_groups: int = 1
    dn_box_noise: float = 0.4
    dn_label_flip: float = 0.25
    eval_batch: int = 25

    @property
    def num_train(self) -> int:
        return int(round(self.num_scenes * self.train_fraction))

    @property
    def num_val(self) -> int:
        return self.num_scenes - self.num_train

    def validate(self) -> "RunConfig":
        if not 0.0 < self.train_fraction < 1.0:
            raise ConfigError(f"train_fraction must be in (0, 1), got {self.train_fraction}")
        if self.num_scenes < 2 or self.num_train < 1 or self.num_val < 1:
            raise ConfigError(f"num_scenes={self.num_scenes} leaves an empty split")
        for name in ("epochs", "batch_size", "eval_batch"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1")
        if self.lr <= 0 or self.clip_norm < 0 or self.weight_decay < 0:
            raise ConfigError("lr must be > 0; clip_norm and weight_decay must be >= 0")
        if self.dn_groups < 0 or self.dn_box_noise < 0 or not 0.0 <= self.dn_label_flip <= 1.0:
            raise ConfigError("invalid dn settings")
        if self.val_shift < 0:
            raise ConfigError("val_shift must be >= 0")
        if self.loss.cls_norm not in ("gt", "queries"):
            raise ConfigError(f"loss.cls_norm must be 'gt' or 'queries', got {self.loss.cls_norm!r}")
        self.model.validate()
        self.scene.validate()
        return self

    # -- serialization ----------------------------------------------------------
    def to_dict(self) -> dict:
        out = {}
        for f in fields(self):
            v = getattr(self, f.name)
            if f.name == "model":
                out.update({f"model.{k}": x for k, x in v.to_dict().items()})
            elif f.name == "loss":
                out.update({f"loss.{g.name}": getattr(v, g.name) for g in fields(v)})
            elif f.name == "scene":
                out.update({f"scene.{k}": x for k, x in v.to_dict().items()})
            else:
                out[f.name] = v
        return out

    def to_text(self) -> str:
        lines = []
        for k, v in self.to_dict().items():
            if isinstance(v, (tuple, list)):
                v = ",".join(str(x) for x in v)
            elif isinstance(v, float):
                v = repr(v)
            lines.append(f"{k} = {v}")
        return "\n".join(lines) + "\n"

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        model = {k[6:]: v for k, v in d.items() if k.startswith("model.")}
        loss = {k[5:]: v for k, v in d.items() if k.startswith("loss.")}
        scene = {k[6:]: v for k, v in d.items() if k.startswith("scene.")}
        top = {k: v for k, v in d.items() if "." not in k}
        known = {f.name: f for f in fields(cls)}
        unknown = [k for k in top if k not in known] + [
            f"loss.{k}" for k in loss if k not in {g.name for g in fields(LossWeights)}] + [
            f"model.{k}" for k in model if k not in {g.name for g in fields(ModelConfig)}]
        if unknown:
            raise ConfigError(f"unknown config keys: {', '.join(sorted(unknown))}")
        kw = {}
        for k, v in top.items():
            kw[k] = _coerce(v, type(known[k].default))
        lw = {}
        for g in fields(LossWeights):
            if g.name in loss:
                lw[g.name] = _coerce(loss[g.name], type(g.default))
        try:
            base_scene = SceneParams.from_dict(_scene_values(scene)) if scene else SceneParams()
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"bad scene settings: {exc}") from None
        try:
            return cls(model=ModelConfig.from_dict(model), loss=LossWeights(**lw), scene=base_scene,
                       **kw).validate()
        except (TypeError, ValueError) as exc:
            if isinstance(exc, ConfigError):
                raise
            raise ConfigError(str(exc)) from None

    @classmethod
    def from_text(cls, text: str, path: str = "<config>") -> "RunConfig":
        return cls.from_dict(parse_kv(text, path))

    @classmethod
    def load(cls, path) -> "RunConfig":
        with open(path, "rb") as fh:
            return cls.from_text(fh.read().decode("ascii"), str(path))

    def save(self, path):
        with open(path, "w") as fh:
            fh.write(self.to_text())

    def with_overrides(self, **kw) -> "RunConfig":
        """Copy with top-level fields or dotted ``model.x`` style keys replaced."""
        d = self.to_dict()
        for k, v in kw.items():
            d[k.replace("__", ".")] = v
        return RunConfig.from_dict(d)

    def evolve(self, **kw) -> "RunConfig":
        return replace(self, **kw).validate()


def _scene_values(scene: dict) -> dict:
    defaults = {f.name: f.default for f in fields(SceneParams)}
    out = {}
    for k, v in scene.items():
        if k not in defaults:
            raise ConfigError(f"unknown config key scene.{k}")
        ref = defaults[k]
        if isinstance(ref, tuple):
            parts = v.split(",") if isinstance(v, str) else v
            out[k] = tuple(_coerce(x, type(ref[0])) for x in parts)
        else:
            out[k] = _coerce(v, type(ref))
    return out


def _coerce(v, typ):
    if isinstance(v, typ) and not (typ is int and isinstance(v, bool)):
        return v
    s = str(v).strip()
    try:
        if typ is bool:
            if s.lower() not in ("1", "0", "true", "false", "yes", "no", "on", "off"):
                raise ValueError(s)
            return s.lower() in ("1", "true", "yes", "on")
        if typ is int:
            return int(s)
        if typ is float:
            return float(s)
    except ValueError:
        raise ConfigError(f"cannot read {s!r} as {typ.__name__}") from None
    return s


def parse_kv(text: str, path: str = "<text>") -> dict:
    """Parse ``key = value`` lines; ``#`` starts a comment. Errors carry byte offsets."""
    out = {}
    offset = 0
    for line in text.splitlines(keepends=True):
        body = line.split("#", 1)[0].strip()
        if body:
            if "=" not in body:
                raise ParseError(f"expected 'key = value', got {body!r}", path, offset)
            k, v = body.split("=", 1)
            k = k.strip()
            if not k:
                raise ParseError("empty key", path, offset)
            if k in out:
                raise ParseError(f"duplicate key {k!r}", path, offset)
            out[k] = v.strip()
        offset += len(line.encode())
    return out
