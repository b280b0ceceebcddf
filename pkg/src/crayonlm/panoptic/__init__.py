from .grid import (
    ObjectEntry,
    PanopticGrid,
    assign_numbering,
    downsample,
    dumps_grid,
    extract_objects,
    load_grid,
    loads_grid,
    parse_entries,
    save_grid,
)
from .synth import Scene, SceneConfig, class_palette, synth_generate, synth_scene
from .vocab import (
    CLASS_NAMES,
    NUM_CLASSES,
    NUM_NUMBERS,
    STUFF_IDS,
    THING_IDS,
    UNK_ID,
    class_id,
    class_name,
    is_stuff,
    is_thing,
)

__all__ = [
    "ObjectEntry", "PanopticGrid", "assign_numbering", "downsample", "dumps_grid",
    "extract_objects", "load_grid", "loads_grid", "parse_entries", "save_grid", "Scene",
    "SceneConfig", "class_palette", "synth_generate", "synth_scene", "CLASS_NAMES",
    "NUM_CLASSES", "NUM_NUMBERS", "STUFF_IDS", "THING_IDS", "UNK_ID", "class_id",
    "class_name", "is_stuff", "is_thing",
]
