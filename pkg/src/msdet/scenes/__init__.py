"""Deterministic synthetic visible/infrared detection scenes."""
from .dataset import (
    Dataset,
    DatasetManifest,
    build_split,
    read_dataset,
    read_manifest,
    read_pnm,
    write_dataset,
    write_pnm,
)
from .generate import (
    CLASS_NAMES,
    MODALITIES,
    ObjectSpec,
    SceneParams,
    SceneSpec,
    generate_scene,
)
from .render import drawn_box, object_coverage, render_modality, render_pair
from .rng import Xoshiro256, splitmix64

__all__ = [
    "CLASS_NAMES", "Dataset", "DatasetManifest", "MODALITIES", "ObjectSpec", "SceneParams",
    "SceneSpec", "Xoshiro256", "build_split", "drawn_box", "generate_scene", "object_coverage",
    "read_dataset", "read_manifest", "read_pnm", "render_modality", "render_pair",
    "splitmix64", "write_dataset", "write_pnm",
]
