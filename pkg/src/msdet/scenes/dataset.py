"""On-disk dataset: binary PPM/PGM images plus a ``key = value`` manifest.

Manifest keys (one per line, ``#`` starts a comment)::

    format            msdet-scenes/1
    split             split name, e.g. ``train``
    count             number of scenes
    seed              generator seed
    first_index       stream index of scene 0 of this split
    param.<name>      every SceneParams field (tuples comma-separated)
    scene.<i>.visible   relative path of the P6 image
    scene.<i>.infrared  relative path of the P5 image
    scene.<i>.objects   object count
    scene.<i>.obj.<k>   ``class cx cy w h`` (shared annotation, no shifts)

``<i>`` and ``<k>`` are zero-padded decimal; floats are written with
``repr`` so they round-trip exactly. Paths are relative to the manifest.
"""
from __future__ import annotations

import os
from dataclasses import dataclass, field, fields

import numpy as np

from ..errors import ParseError
from .generate import SceneParams, generate_scene
from .render import render_pair

FORMAT = "msdet-scenes/1"
MANIFEST = "manifest.txt"


# ----------------------------------------------------------------- netpbm
def write_pnm(path, img: np.ndarray) -> None:
    img = np.asarray(img, dtype=np.uint8)
    if img.ndim == 3 and img.shape[2] == 3:
        magic = b"P6"
    elif img.ndim == 2 or (img.ndim == 3 and img.shape[2] == 1):
        magic, img = b"P5", img.reshape(img.shape[0], img.shape[1])
    else:
        raise ValueError(f"cannot write image of shape {img.shape}")
    h, w = img.shape[:2]
    with open(path, "wb") as fh:
        fh.write(magic + b"\n" + f"{w} {h}\n255\n".encode() + img.tobytes())


def read_pnm(path) -> np.ndarray:
    """Read binary P5/P6 (maxval 255). P5 returns ``[H, W]``, P6 ``[H, W, 3]``."""
    if not os.path.exists(path):
        raise ParseError("image file not found", path)
    with open(path, "rb") as fh:
        raw = fh.read()
    pos = 0
    tokens = []
    starts = []
    while len(tokens) < 4:
        while pos < len(raw) and raw[pos:pos + 1].isspace():
            pos += 1
        if pos < len(raw) and raw[pos:pos + 1] == b"#":
            while pos < len(raw) and raw[pos:pos + 1] != b"\n":
                pos += 1
            continue
        start = pos
        while pos < len(raw) and not raw[pos:pos + 1].isspace():
            pos += 1
        if start == pos:
            raise ParseError("truncated header", path, start)
        tokens.append(raw[start:pos])
        starts.append(start)
    pos += 1  # single whitespace byte before the raster
    magic = tokens[0]
    if magic not in (b"P5", b"P6"):
        raise ParseError(f"unsupported magic {magic!r}", path, 0)
    try:
        w, h, maxval = (int(t) for t in tokens[1:])
    except ValueError:
        raise ParseError("non-integer header field", path, starts[1]) from None
    if maxval != 255:
        raise ParseError(f"maxval {maxval} unsupported", path, starts[3])
    ch = 3 if magic == b"P6" else 1
    need = w * h * ch
    if len(raw) - pos < need:
        raise ParseError(f"raster truncated: need {need} bytes, have {len(raw) - pos}", path, pos)
    data = np.frombuffer(raw, dtype=np.uint8, count=need, offset=pos)
    return data.reshape(h, w, 3).copy() if ch == 3 else data.reshape(h, w).copy()


# ---------------------------------------------------------------- dataset
@dataclass
class DatasetManifest:
    split: str
    seed: int
    first_index: int
    params: SceneParams
    visible: list = field(default_factory=list)
    infrared: list = field(default_factory=list)
    annotations: list = field(default_factory=list)   # per scene: list of (cls, cx, cy, w, h)

    @property
    def count(self) -> int:
        return len(self.visible)


@dataclass
class Dataset:
    root: str
    manifest: DatasetManifest
    visible: list
    infrared: list

    def __len__(self):
        return len(self.visible)

    def arrays(self):
        """Stacked ``(vis [n,S,S,3], ir [n,S,S], annotations)``."""
        return np.stack(self.visible), np.stack(self.infrared), self.manifest.annotations


def _fmt(v) -> str:
    if isinstance(v, (tuple, list)):
        return ",".join(_fmt(x) for x in v)
    if isinstance(v, float):
        return repr(v)
    return str(v)


def build_split(params: SceneParams, seed: int, split: str, first_index: int, count: int):
    """Generate and render ``count`` scenes; returns (manifest, specs, vis, ir)."""
    params.validate()
    man = DatasetManifest(split, seed, first_index, params)
    specs, vis, ir = [], [], []
    for i in range(count):
        spec = generate_scene(params, seed, first_index + i)
        v, r = render_pair(spec)
        specs.append(spec)
        vis.append(v)
        ir.append(r)
        man.visible.append(f"images/{i:05d}_vis.ppm")
        man.infrared.append(f"images/{i:05d}_ir.pgm")
        man.annotations.append(spec.ground_truth())
    return man, specs, vis, ir


def write_dataset(root, manifest: DatasetManifest, visible, infrared) -> None:
    os.makedirs(os.path.join(root, "images"), exist_ok=True)
    lines = ["# msdet synthetic dual-modality scenes", f"format = {FORMAT}",
             f"split = {manifest.split}", f"count = {manifest.count}",
             f"seed = {manifest.seed}", f"first_index = {manifest.first_index}"]
    for f in fields(SceneParams):
        lines.append(f"param.{f.name} = {_fmt(getattr(manifest.params, f.name))}")
    for i in range(manifest.count):
        lines.append(f"scene.{i:05d}.visible = {manifest.visible[i]}")
        lines.append(f"scene.{i:05d}.infrared = {manifest.infrared[i]}")
        objs = manifest.annotations[i]
        lines.append(f"scene.{i:05d}.objects = {len(objs)}")
        for k, (cls, cx, cy, w, h) in enumerate(objs):
            lines.append(f"scene.{i:05d}.obj.{k:02d} = {int(cls)} {_fmt(float(cx))} {_fmt(float(cy))} "
                         f"{_fmt(float(w))} {_fmt(float(h))}")
        write_pnm(os.path.join(root, manifest.visible[i]), visible[i])
        write_pnm(os.path.join(root, manifest.infrared[i]), infrared[i])
    with open(os.path.join(root, MANIFEST), "w") as fh:
        fh.write("\n".join(lines) + "\n")


def _parse_param(name: str, text: str, default):
    if isinstance(default, tuple):
        return tuple(type(d)(x) for d, x in zip(default, text.split(",")))
    if isinstance(default, bool):
        return text == "True"
    return type(default)(text)


def read_manifest(path) -> DatasetManifest:
    if not os.path.exists(path):
        raise ParseError("manifest not found", path)
    with open(path, "rb") as fh:
        raw = fh.read()
    kv, offsets = {}, {}
    pos = 0
    for line in raw.split(b"\n"):
        off = pos
        pos += len(line) + 1
        text = line.decode("utf-8").strip()
        if not text or text.startswith("#"):
            continue
        if "=" not in text:
            raise ParseError(f"expected 'key = value', got {text!r}", path, off)
        k, v = (s.strip() for s in text.split("=", 1))
        kv[k] = v
        offsets[k] = off

    def get(key):
        if key not in kv:
            raise ParseError(f"missing key {key!r}", path, len(raw))
        return kv[key]

    if get("format") != FORMAT:
        raise ParseError(f"unknown format {kv['format']!r}", path, offsets["format"])
    defaults = SceneParams()
    pkw = {}
    for f in fields(SceneParams):
        key = f"param.{f.name}"
        if key in kv:
            try:
                pkw[f.name] = _parse_param(f.name, kv[key], getattr(defaults, f.name))
            except ValueError:
                raise ParseError(f"bad value for {key}", path, offsets[key]) from None
    try:
        count = int(get("count"))
        man = DatasetManifest(get("split"), int(get("seed")), int(get("first_index")), SceneParams(**pkw))
    except ValueError:
        raise ParseError("bad integer field in header", path, offsets.get("count", 0)) from None
    for i in range(count):
        pre = f"scene.{i:05d}"
        man.visible.append(get(f"{pre}.visible"))
        man.infrared.append(get(f"{pre}.infrared"))
        objs = []
        for k in range(int(get(f"{pre}.objects"))):
            key = f"{pre}.obj.{k:02d}"
            parts = get(key).split()
            try:
                objs.append((int(parts[0]),) + tuple(float(x) for x in parts[1:5]))
                if len(parts) != 5:
                    raise ValueError
            except (ValueError, IndexError):
                raise ParseError(f"bad object record {key}", path, offsets[key]) from None
        man.annotations.append(objs)
    return man


def read_dataset(root) -> Dataset:
    man = read_manifest(os.path.join(root, MANIFEST))
    vis = [read_pnm(os.path.join(root, p)) for p in man.visible]
    ir = [read_pnm(os.path.join(root, p)) for p in man.infrared]
    for i, (v, r) in enumerate(zip(vis, ir)):
        if v.shape[:2] != r.shape[:2]:
            raise ParseError(f"scene {i}: modality extents differ {v.shape} vs {r.shape}",
                             os.path.join(root, man.infrared[i]), 0)
    return Dataset(str(root), man, vis, ir)
