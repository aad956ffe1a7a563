from .dataset import (DatasetError, SceneSample, load_dataset, load_scene, make_sample, read_manifest,
                      save_dataset)
from .render import RenderResult, pixel_rays, render, unproject
from .scene import (FRAMES_MAX, FRAMES_MIN, Intrinsics, Primitive, Scene, SceneGenerationError, SceneSpec,
                    caption_tokens, generate_scene, look_at)

__all__ = [
    "DatasetError", "FRAMES_MAX", "FRAMES_MIN", "Intrinsics", "Primitive", "RenderResult", "Scene",
    "SceneGenerationError", "SceneSample", "SceneSpec", "caption_tokens", "generate_scene", "load_dataset",
    "load_scene", "look_at", "make_sample", "pixel_rays", "read_manifest", "render", "save_dataset", "unproject",
]
