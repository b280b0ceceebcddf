from collections import Counter, deque

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from crayonlm.errors import ArgumentError, ArtifactError, GenerationError
from crayonlm.panoptic import (
    CLASS_NAMES,
    NUM_CLASSES,
    STUFF_IDS,
    THING_IDS,
    UNK_ID,
    ObjectEntry,
    PanopticGrid,
    SceneConfig,
    assign_numbering,
    class_id,
    class_name,
    downsample,
    dumps_grid,
    extract_objects,
    is_stuff,
    loads_grid,
    parse_entries,
    synth_generate,
    synth_scene,
)

PERSON, SKY, HORSE = class_id("person"), class_id("sky"), class_id("horse")


def test_vocabulary_shape():
    assert NUM_CLASSES == 134 and len(CLASS_NAMES) == 134
    assert len(set(CLASS_NAMES)) == 134
    assert len(THING_IDS) == 80 and len(STUFF_IDS) == 53
    assert class_name(UNK_ID) == "unk" and UNK_ID == 133
    assert is_stuff(SKY) and not is_stuff(PERSON)


def test_names_round_trip():
    for cid in range(NUM_CLASSES):
        assert class_id(class_name(cid)) == cid


def test_grid_invariants_enforced():
    with pytest.raises(ValueError):
        PanopticGrid(np.array([[UNK_ID]]), np.array([[1]]))
    with pytest.raises(ValueError):
        PanopticGrid(np.array([[PERSON]]), np.array([[0]]))
    with pytest.raises(ValueError):
        PanopticGrid(np.array([[PERSON]]), np.array([[21]]))


# -- numbering -------------------------------------------------------------

def test_two_people_get_one_and_two():
    cls = np.array([[PERSON, SKY, PERSON]])
    raw = np.array([[7, 0, 3]])
    g = assign_numbering(cls, raw)
    assert g.numbers.tolist() == [[1, 1, 2]]


def test_unk_gets_zero():
    g = assign_numbering(np.array([[UNK_ID, SKY]]), np.array([[5, 5]]))
    assert g.numbers.tolist() == [[0, 1]]


def test_overflow_clamps_with_warning():
    cls = np.full((1, 22), PERSON)
    with pytest.warns(UserWarning):
        g = assign_numbering(cls, np.arange(22)[None])
    assert g.numbers.max() == 20 and g.numbers[0, :19].tolist() == list(range(1, 20))


@given(arrays(np.int64, (5, 6), elements=st.integers(0, 3)), arrays(np.int64, (5, 6), elements=st.integers(0, 4)))
def test_assign_numbering_idempotent(cls_small, raw):
    cls = np.array([PERSON, SKY, HORSE, UNK_ID])[cls_small]
    g = assign_numbering(cls, raw)
    assert assign_numbering(g.class_ids, g.numbers) == g


# -- downsample ------------------------------------------------------------

def brute_downsample(grid, h, w):
    H, W = grid.shape
    out_c = np.zeros((h, w), int)
    out_n = np.zeros((h, w), int)
    for i in range(h):
        for j in range(w):
            counts = Counter()
            for r in range(i * H // h, (i + 1) * H // h):
                for c in range(j * W // w, (j + 1) * W // w):
                    counts[(int(grid.class_ids[r, c]), int(grid.numbers[r, c]))] += 1
            best = max(counts.values())
            out_c[i, j], out_n[i, j] = min(k for k, v in counts.items() if v == best)
    return out_c, out_n


def random_grid(r, H, W):
    cls = r.choice([PERSON, SKY, HORSE, UNK_ID], size=(H, W))
    raw = r.integers(0, 3, (H, W))
    return assign_numbering(cls, raw)


def test_downsample_uniform():
    g = PanopticGrid.full(8, 8, SKY)
    assert downsample(g, 2, 4) == PanopticGrid.full(2, 4, SKY)


def test_downsample_majority():
    g = PanopticGrid(np.array([[PERSON, PERSON], [PERSON, SKY]]), np.ones((2, 2), int))
    out = downsample(g, 1, 1)
    assert (out.class_ids[0, 0], out.numbers[0, 0]) == (PERSON, 1)


def test_downsample_tie_goes_to_smallest_ids():
    g = PanopticGrid(np.array([[SKY, PERSON]]), np.array([[1, 2]]))
    out = downsample(g, 1, 1)
    assert (out.class_ids[0, 0], out.numbers[0, 0]) == (PERSON, 2)


@pytest.mark.parametrize("seed", range(20))
def test_downsample_matches_brute_force(seed):
    r = np.random.default_rng(seed)
    H, W = int(r.integers(2, 13)), int(r.integers(2, 13))
    h, w = int(r.integers(1, H + 1)), int(r.integers(1, W + 1))
    g = random_grid(r, H, W)
    out = downsample(g, h, w)
    c, n = brute_downsample(g, h, w)
    np.testing.assert_array_equal(out.class_ids, c)
    np.testing.assert_array_equal(out.numbers, n)


def test_downsample_identity_and_errors(rng):
    g = random_grid(rng, 6, 5)
    assert downsample(g, 6, 5) == g
    for h, w in ((0, 2), (2, 0), (7, 5)):
        with pytest.raises(ArgumentError):
            downsample(g, h, w)


# -- object extraction -----------------------------------------------------

def test_full_grid_box():
    (e,) = extract_objects(PanopticGrid.full(5, 7, SKY))
    assert e.bbox == (0.0, 0.0, 1.0, 1.0) and e.render() == "(#1 sky) [0.00, 0.00, 1.00, 1.00]"


def test_ten_by_ten_box():
    cls = np.full((10, 10), SKY)
    cls[2:6, 3:8] = HORSE
    g = PanopticGrid(cls, np.ones((10, 10), int))
    boxes = {e.class_name: e.bbox for e in extract_objects(g)}
    assert boxes["horse"] == (0.30, 0.20, 0.80, 0.60)


def test_rounding_half_away_from_zero():
    # 1/8 = 0.125 must round up, 3/8 = 0.375 up, 5/8 = 0.625 up
    cls = np.full((8, 8), SKY)
    cls[1:5, 3:5] = HORSE
    g = PanopticGrid(cls, np.ones((8, 8), int))
    box = [e for e in extract_objects(g) if e.class_name == "horse"][0].bbox
    assert box == (0.38, 0.13, 0.63, 0.63)


def test_render_parse_round_trip():
    e = ObjectEntry("horse", 1, (0.06, 0.38, 0.27, 0.91))
    text = e.render()
    assert text == "(#1 horse) [0.06, 0.38, 0.27, 0.91]"
    assert parse_entries(text + ", " + ObjectEntry("traffic light", 2, (0, 0, 1, 1)).render())[0] == e


@pytest.mark.parametrize("seed", range(10))
def test_non_unk_cells_covered_by_exactly_one_box(seed):
    g = random_grid(np.random.default_rng(seed), 7, 9)
    H, W = g.shape
    entries = extract_objects(g)
    for r in range(H):
        for c in range(W):
            cid = int(g.class_ids[r, c])
            if cid == UNK_ID:
                continue
            own = [e for e in entries if e.class_id == cid and e.instance_number == g.numbers[r, c]]
            assert len(own) == 1
            x0, y0, x1, y1 = own[0].bbox
            assert x0 <= c / W + 0.005 + 1e-9 and (c + 1) / W <= x1 + 0.005 + 1e-9
            assert y0 <= r / H + 0.005 + 1e-9 and (r + 1) / H <= y1 + 0.005 + 1e-9
    for e in entries:
        assert e.bbox[0] < e.bbox[2] and e.bbox[1] < e.bbox[3]


# -- synthetic generator -----------------------------------------------------

def flood_fill_regions(grid):
    """Count 4-connected regions of equal (class, number) per class."""
    H, W = grid.shape
    seen = np.zeros((H, W), bool)
    hist = Counter()
    for r0 in range(H):
        for c0 in range(W):
            if seen[r0, c0]:
                continue
            key = (grid.class_ids[r0, c0], grid.numbers[r0, c0])
            hist[int(key[0])] += 1
            q = deque([(r0, c0)])
            seen[r0, c0] = True
            while q:
                r, c = q.popleft()
                for rr, cc in ((r + 1, c), (r - 1, c), (r, c + 1), (r, c - 1)):
                    if 0 <= rr < H and 0 <= cc < W and not seen[rr, cc] and \
                            (grid.class_ids[rr, cc], grid.numbers[rr, cc]) == key:
                        seen[rr, cc] = True
                        q.append((rr, cc))
    return hist


def test_zero_objects_single_background_entry():
    cfg = SceneConfig(min_objects=0, max_objects=0)
    g, img = synth_generate(3, cfg)
    (e,) = extract_objects(g)
    assert is_stuff(e.class_id) and e.bbox == (0.0, 0.0, 1.0, 1.0)
    assert img.shape == (32, 32, 3) and img.dtype == np.float32


def test_same_seed_bit_identical():
    a, b = synth_generate(11), synth_generate(11)
    assert a[0] == b[0] and a[1].tobytes() == b[1].tobytes()
    assert synth_generate(12)[1].tobytes() != a[1].tobytes()


@pytest.mark.parametrize("seed", range(15))
def test_requested_histogram_matches_regions(seed):
    s = synth_scene(seed, SceneConfig(min_objects=1, max_objects=8))
    things = {k: v for k, v in flood_fill_regions(s.grid).items() if k in THING_IDS}
    assert things == s.requested_histogram()
    extracted = Counter(e.class_id for e in extract_objects(s.grid) if e.class_id in THING_IDS)
    assert dict(extracted) == s.requested_histogram()


def test_pixels_encode_class_without_noise():
    cfg = SceneConfig(noise_std=0.0, min_objects=2, max_objects=4)
    g, img = synth_generate(4, cfg)
    flat = img.reshape(-1, 3)
    for cid in g.present_classes():
        colors = flat[(g.class_ids == cid).reshape(-1)]
        assert np.all(colors == colors[0])


def test_placement_exhaustion_raises():
    cfg = SceneConfig(height=8, width=8, min_objects=8, max_objects=8, min_size=2, max_size=2, max_retries=5)
    with pytest.raises(GenerationError):
        synth_generate(0, cfg)


def test_config_bounds():
    with pytest.raises(ArgumentError):
        SceneConfig(max_objects=9)


# -- grid file ---------------------------------------------------------------

def test_grid_file_round_trip(rng):
    g = random_grid(rng, 4, 6)
    text = dumps_grid(g)
    assert text.startswith("PGRID v1 4 6\n") and "\nCLASSES\n" in text
    assert loads_grid(text) == g


@pytest.mark.parametrize("bad", ["", "PGRID v2 1 1\n1:1\nCLASSES\n1 bicycle\n", "PGRID v1 1 2\n1:1\nCLASSES\n1 bicycle\n"])
def test_grid_file_malformed(bad):
    with pytest.raises(ArtifactError):
        loads_grid(bad)
