import numpy as np
import pytest

from coal import container
from coal import tensor as T
from coal.encoders import (
    UNKNOWN,
    FeatureError,
    PrecomputedVisualEncoder,
    SyntheticVisualEncoder,
    WordTable,
    load_precomputed,
    visual_key,
)
from coal.matching import Box
from coal.priors import GTObject, SceneRecord


@pytest.fixture
def table(grammar):
    return WordTable.for_grammar(grammar, 16, seed=3)


def test_single_token_sentence_is_the_word(table):
    emb = table.encode_text("car")
    np.testing.assert_array_equal(emb.sentence.data, emb.words.data[0])
    assert emb.tokens == ["car"]


def test_pooling_is_order_free(table, f64):
    a = table.encode_text("red car moving")
    b = table.encode_text("moving red car")
    np.testing.assert_allclose(a.sentence.data, b.sentence.data, atol=1e-12)
    assert not np.array_equal(a.words.data, b.words.data)


def test_mean_of_lookups(table):
    emb = table.encode_text("Red  CAR")
    want = (table.table[table.index["red"]] + table.table[table.index["car"]]) / 2
    np.testing.assert_allclose(emb.sentence.data, want, atol=1e-6)


def test_unknown_tokens_share_a_vector(table):
    np.testing.assert_array_equal(table.lookup("zeppelin"), table.lookup("bagpipe"))
    np.testing.assert_array_equal(table.lookup("zeppelin"), table.table[-1])
    assert UNKNOWN not in table.index


def test_empty_text_is_rejected(table):
    with pytest.raises(ValueError):
        table.encode_text("   ")


def test_rows_are_stable_under_vocabulary_growth():
    small = WordTable(["car", "red"], 8, seed=1)
    large = WordTable(["car", "red", "van", "blue"], 8, seed=1)
    np.testing.assert_array_equal(small.lookup("car"), large.lookup("car"))


def test_table_is_read_only(table):
    with pytest.raises(ValueError):
        table.table[0, 0] = 1.0


def test_encoder_outputs_receive_no_gradient(table):
    emb = table.encode_text("red car")
    w = T.Parameter(np.ones(16), name="w")
    with T.Tape():
        loss = (emb.sentence * w).sum()
        grads = T.backward(loss, [w])
    assert set(grads) == {"w"}
    assert not emb.words.requires_grad and not emb.sentence.requires_grad


# ---- synthetic visual maps ------------------------------------------------


def _frame(objects):
    return SceneRecord("s", 0, [], objects, {})


def test_empty_scene_without_noise_is_zero():
    enc = SyntheticVisualEncoder(dim=8, height=6, width=10, noise_sigma=0.0)
    assert not enc.encode_frame(_frame([])).features.data.any()


def test_same_frame_same_seed_identical(small_sequence):
    enc = SyntheticVisualEncoder(dim=8, height=6, width=10, noise_sigma=0.1, seed=4)
    a = enc.encode_frame(small_sequence.frames[1]).features.data
    b = enc.encode_frame(small_sequence.frames[1]).features.data
    assert a.tobytes() == b.tobytes()
    other = SyntheticVisualEncoder(dim=8, height=6, width=10, noise_sigma=0.1, seed=5)
    assert not np.array_equal(a, other.encode_frame(small_sequence.frames[1]).features.data)


def test_rasterization_against_per_cell_oracle():
    height, width = 10, 12
    enc = SyntheticVisualEncoder(dim=8, height=height, width=width, noise_sigma=0.0)
    # rows 2..4 and columns 3..6 have their centers inside this box
    box = Box.from_xyxy(3 / width, 2 / height, 7 / width, 5 / height)
    attrs = {"category": "van", "color": "blue", "location": "left", "motion": "parked"}
    out = enc.clean_map(_frame([GTObject(1, box, attrs)]))
    vec = np.zeros(enc.attribute_dim)
    offsets = {"category": 0, "color": 4, "location": 9, "motion": 12}
    for slot, value in attrs.items():
        vec[offsets[slot] + enc.grammar.vocab[slot].index(value)] = 0.5 if slot == "color" else 1.0
    projected = vec @ enc.projection
    for r in range(height):
        for c in range(width):
            inside = 2 <= r <= 4 and 3 <= c <= 6
            np.testing.assert_allclose(out[r, c], projected if inside else 0.0, atol=1e-12)


def test_attribute_vector_is_one_hot_blocks():
    enc = SyntheticVisualEncoder(dim=4, slot_gains={})
    vec = enc.attribute_vector({"category": "car", "color": "red", "location": "left", "motion": "moving"})
    assert enc.attribute_dim == 15 and vec.sum() == 4.0
    assert list(np.flatnonzero(vec)) == [0, 4, 9, 12]


# ---- precomputed features -------------------------------------------------


def test_precomputed_round_trip(tmp_path, rng):
    entries = {visual_key("s", i): rng.normal(size=(3, 4, 8)).astype(np.float32) for i in range(3)}
    path = tmp_path / "features.bin"
    container.save(path, entries)
    assert container.keys(path) == sorted(entries)
    enc = PrecomputedVisualEncoder(path, 8)
    got = enc.encode_frame(SceneRecord("s", 2), dtype=np.float32).features.data
    assert got.tobytes() == entries["s/2/visual"].tobytes()


def test_precomputed_errors(rng):
    entries = {"a": rng.normal(size=(2, 2, 4))}
    with pytest.raises(FeatureError, match="'b'"):
        load_precomputed(entries, "b")
    with pytest.raises(ValueError, match="dimension"):
        load_precomputed(entries, "a", dim=8)
    with pytest.raises(ValueError, match="dtype"):
        load_precomputed(entries, "a", dtype=np.float32)
