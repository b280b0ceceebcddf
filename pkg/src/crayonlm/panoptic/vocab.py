"""The 133-class COCO panoptic vocabulary plus the trailing ``unk`` class.

Thing classes come first (ids 0-79), stuff classes next (80-132), and
``unk`` is id 133.
"""

from __future__ import annotations

THING_NAMES = (
    'person', 'bicycle', 'car', 'motorcycle', 'airplane', 'bus', 'train', 'truck', 'boat',
    'traffic light', 'fire hydrant', 'stop sign', 'parking meter', 'bench', 'bird', 'cat',
    'dog', 'horse', 'sheep', 'cow', 'elephant', 'bear', 'zebra', 'giraffe', 'backpack',
    'umbrella', 'handbag', 'tie', 'suitcase', 'frisbee', 'skis', 'snowboard', 'sports ball',
    'kite', 'baseball bat', 'baseball glove', 'skateboard', 'surfboard', 'tennis racket',
    'bottle', 'wine glass', 'cup', 'fork', 'knife', 'spoon', 'bowl', 'banana', 'apple',
    'sandwich', 'orange', 'broccoli', 'carrot', 'hot dog', 'pizza', 'donut', 'cake', 'chair',
    'couch', 'potted plant', 'bed', 'dining table', 'toilet', 'tv', 'laptop', 'mouse',
    'remote', 'keyboard', 'cell phone', 'microwave', 'oven', 'toaster', 'sink', 'refrigerator',
    'book', 'clock', 'vase', 'scissors', 'teddy bear', 'hair drier', 'toothbrush',
)

STUFF_NAMES = (
    'banner', 'blanket', 'bridge', 'cardboard', 'counter', 'curtain', 'door', 'floor-wood',
    'flower', 'fruit', 'gravel', 'house', 'light', 'mirror', 'net', 'pillow', 'platform',
    'playingfield', 'railroad', 'river', 'road', 'roof', 'sand', 'sea', 'shelf', 'snow',
    'stairs', 'tent', 'towel', 'wall-brick', 'wall-stone', 'wall-tile', 'wall-wood', 'water',
    'window-blind', 'window', 'tree', 'fence', 'ceiling', 'sky', 'cabinet', 'table', 'floor',
    'pavement', 'mountain', 'grass', 'dirt', 'paper', 'food', 'building', 'rock', 'wall',
    'rug',
)

UNK_NAME = "unk"
CLASS_NAMES: tuple[str, ...] = THING_NAMES + STUFF_NAMES + (UNK_NAME,)
NUM_CLASSES = len(CLASS_NAMES)  # 134
UNK_ID = NUM_CLASSES - 1
MAX_INSTANCES = 20
NUM_NUMBERS = MAX_INSTANCES + 1  # 0 reserved for unk

THING_IDS: tuple[int, ...] = tuple(range(len(THING_NAMES)))
STUFF_IDS: tuple[int, ...] = tuple(range(len(THING_NAMES), UNK_ID))

_NAME_TO_ID = {name: i for i, name in enumerate(CLASS_NAMES)}


def class_id(name: str) -> int:
    try:
        return _NAME_TO_ID[name]
    except KeyError:
        raise KeyError(f"unknown class name {name!r}") from None


def class_name(cid: int) -> str:
    if not 0 <= cid < NUM_CLASSES:
        raise IndexError(f"class id {cid} out of range")
    return CLASS_NAMES[cid]


def is_thing(cid: int) -> bool:
    return 0 <= cid < len(THING_NAMES)


def is_stuff(cid: int) -> bool:
    return len(THING_NAMES) <= cid < UNK_ID
