from .forge import (
    TripletSample,
    build_dataset,
    generate_dataset,
    load_dataset,
    make_multiview,
    make_references,
    read_manifest,
    validate_dataset,
    view_poses,
)
from .render import AvatarSpec, composite_augment, render_avatar, render_background, sample_spec

__all__ = [
    "AvatarSpec",
    "TripletSample",
    "build_dataset",
    "composite_augment",
    "generate_dataset",
    "load_dataset",
    "make_multiview",
    "make_references",
    "read_manifest",
    "render_avatar",
    "render_background",
    "sample_spec",
    "validate_dataset",
    "view_poses",
]
