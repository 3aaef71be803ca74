import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from detguard.geometry import FeatureBox, PixelBox
from detguard.local_model import (LocalModel, classify_box, crop_logits, extract_local_logits, init_model,
                                  load_model, region_pixels, rch, rch_pa, save_model, train_local_model)
from detguard.synthdata import SceneSpec, generate_dataset

finite = st.floats(-50, 50, allow_nan=False)


def windows(max_side=5, max_k=5):
    shape = st.tuples(st.integers(1, max_side), st.integers(1, max_side), st.integers(2, max_k))
    return shape.flatmap(lambda s: arrays(np.float64, s, elements=finite))


def test_zero_weights_give_bias_everywhere():
    model = LocalModel(9, 4, 2, np.zeros((12, 3)), np.array([0.5, -1.0, 2.0]))
    logits = extract_local_logits(np.zeros((40, 30, 3)), model)
    assert logits.shape == (8, 6, 3)
    assert np.array_equal(logits, np.broadcast_to([0.5, -1.0, 2.0], logits.shape))


def test_constant_image_gives_constant_logits():
    model = init_model(9, 4, 3, seed=3)
    logits = extract_local_logits(np.full((37, 41, 3), 0.25), model)
    assert np.allclose(logits, logits[0, 0], atol=1e-12)
    img = np.full((37, 41, 3), 0.25)
    img[20, 20] = 0.9
    assert not np.allclose(extract_local_logits(img, model), logits[0, 0])


def test_logits_match_per_window_recomputation(rng):
    model = init_model(9, 4, 3, seed=5)
    model.weights[:] = rng.normal(size=model.weights.shape)
    image = rng.random((45, 37, 3))
    logits = extract_local_logits(image, model)
    proj = model.projection
    for i in range(logits.shape[0]):
        for j in range(logits.shape[1]):
            win = image[i * 4:i * 4 + 9, j * 4:j * 4 + 9, :]
            mean = np.array([win[..., c].mean() for c in range(3)])
            std = np.array([win[..., c].std() for c in range(3)])
            centred = np.stack([win[..., c] - mean[c] for c in range(3)])  # (C, r, r)
            feats = [float((p * centred).sum()) for p in proj]
            desc = np.concatenate([mean, std, feats])
            assert np.allclose(logits[i, j], desc @ model.weights + model.bias, atol=1e-10)


def test_region_and_crop_logits_agree_with_full_map(rng):
    model = init_model(9, 4, 3, seed=2)
    model.weights[:] = rng.normal(size=model.weights.shape)
    image = rng.random((64, 64, 3))
    full = extract_local_logits(image, model)
    region = FeatureBox(3, 2, 9, 7)
    assert np.allclose(extract_local_logits(image, model, region), full[region.slices()], atol=1e-12)
    px, py = region_pixels(region, model)
    crops = np.stack([image[px, py], image[px, py]])
    assert np.allclose(crop_logits(crops, model)[1], full[region.slices()], atol=1e-12)
    with pytest.raises(ValueError):
        extract_local_logits(image, model, FeatureBox(3, 3, 3, 5))


def test_image_shape_errors():
    model = init_model(9, 4, 3)
    with pytest.raises(ValueError):
        extract_local_logits(np.zeros((40, 40)), model)
    with pytest.raises(ValueError):
        extract_local_logits(np.zeros((8, 40, 3)), model)


def test_rch_examples():
    label, v = rch(np.zeros((2, 2, 3)))
    assert label == 0 and np.array_equal(v, np.zeros(3))
    label, v = rch(np.array([[[2.0, -1.0, 0.5]]]))
    assert label == 0 and np.array_equal(v, [2.0, 0.0, 0.5])
    w = np.abs(np.arange(12.0).reshape(2, 2, 3))
    assert np.array_equal(rch(w)[1], w.sum(axis=(0, 1)))
    with pytest.raises(ValueError):
        rch(np.zeros((0, 2, 3)))


def test_rch_ties_go_to_lowest_class():
    assert rch(np.array([[[1.0, 3.0, 3.0]]]))[0] == 1


def test_rch_pa_examples(rng):
    w = rng.normal(size=(3, 4, 4))
    assert np.array_equal(rch_pa(w, []).lower, rch(w)[1])
    assert np.array_equal(rch_pa(w, np.ones((3, 4), dtype=bool)).lower, np.zeros(4))
    half = [(i, j) for i in range(3) for j in range(2)]
    rest = np.maximum(w[:, 2:], 0).sum(axis=(0, 1))
    assert np.allclose(rch_pa(w, half).lower, rest)
    assert np.all(np.isinf(rch_pa(w, half).upper))


@settings(max_examples=200, deadline=None)
@given(windows(), st.data())
def test_rch_pa_is_a_lower_bound_for_any_overwrite(window, data):
    X, Y, K = window.shape
    mask = data.draw(arrays(bool, (X, Y)))
    bounds = rch_pa(window, mask)
    assert np.all(bounds.lower <= rch(window)[1])
    assert np.all(bounds.lower >= 0)
    attacked = window.copy()
    attacked[mask] = data.draw(arrays(np.float64, (int(mask.sum()), K), elements=finite))
    assert np.all(rch(attacked)[1] >= bounds.lower)


def test_rch_ignores_cells_outside_its_window(rng):
    fm = rng.normal(size=(6, 6, 3))
    before = rch(fm[1:4, 2:5])
    fm[0] = 99.0
    fm[:, 5] = -99.0
    after = rch(fm[1:4, 2:5])
    assert before[0] == after[0] and np.array_equal(before[1], after[1])


def _separable_set():
    """Two classes of solid squares with distinct colours on a grey background."""
    rng = np.random.default_rng(0)
    items = []
    for k in range(8):
        img = np.full((64, 64, 3), 0.5)
        boxes = []
        for label, colour in ((0, (0.9, 0.1, 0.1)), (1, (0.1, 0.1, 0.9))):
            x = 4 + 30 * label
            y = int(rng.integers(4, 30))
            img[x:x + 26, y:y + 26] = colour
            boxes.append(PixelBox(x, y, x + 26, y + 26, label))
        items.append((img, boxes))
    return items


def test_training_separates_two_classes():
    items = _separable_set()
    model = train_local_model(items, 2, 9, 4, epochs=200)
    correct = total = 0
    for img, boxes in items:
        logits = extract_local_logits(img, model)
        for b in boxes:
            total += 1
            correct += classify_box(logits, b, model.rf_config(64, 64)) == b.label
    assert correct == total


def test_training_loss_never_increases():
    history: list = []
    train_local_model(_separable_set(), 2, 9, 4, epochs=60, history=history)
    assert len(history) == 61
    assert all(b <= a + 1e-9 for a, b in zip(history, history[1:]))


def test_zero_epochs_return_the_initialisation():
    model = train_local_model(_separable_set(), 2, 9, 4, epochs=0, seed=4)
    assert model.equals(init_model(9, 4, 2, seed=4))


def test_training_rejects_bad_input():
    with pytest.raises(ValueError):
        train_local_model([], 2, 9, 4)
    img = np.zeros((32, 32, 3))
    with pytest.raises(ValueError):
        train_local_model([(img, [PixelBox(0, 0, 10, 10, 5)])], 2, 9, 4)


def test_training_is_deterministic(tmp_path):
    items = _separable_set()
    paths = []
    for k in range(2):
        paths.append(tmp_path / f"m{k}.txt")
        save_model(train_local_model(items, 2, 9, 4, epochs=40, seed=7), paths[-1])
    assert paths[0].read_bytes() == paths[1].read_bytes()


def test_model_file_round_trip(tmp_path, rng):
    model = init_model(9, 4, 3, seed=1)
    model.weights[:] = rng.normal(size=model.weights.shape) / 3.0
    path = tmp_path / "model.txt"
    save_model(model, path)
    assert path.read_text().splitlines()[0] == "CGMODEL v1 9 4 3 12"
    back = load_model(path)
    assert back.equals(model)
    assert np.array_equal(back.weights, model.weights)
    path.write_text("CGMODEL v1 9 4 3 12\n1.0\n")
    with pytest.raises(ValueError):
        load_model(path)


def test_trained_model_classifies_synthetic_boxes(small_suite):
    """Box classification on held-out scenes reaches the desk target."""
    data, model = small_suite.dataset, small_suite.model
    hits = total = 0
    for image_id in data.ids:
        logits = small_suite.logits(image_id)
        rf = model.rf_config(*data.images[image_id].shape[:2])
        for box in data.annotations[image_id]:
            total += 1
            hits += classify_box(logits, box, rf) == box.label
    assert hits / total >= 0.95


def test_held_out_accuracy_on_two_hundred_scenes():
    train = generate_dataset(SceneSpec(n_images=60, seed=11))
    model = train_local_model(train.items(), 3, 9, 4, epochs=300)
    held = generate_dataset(SceneSpec(n_images=200, seed=12))
    hits = total = 0
    for image, boxes in held.items():
        logits = extract_local_logits(image, model)
        for box in boxes:
            total += 1
            hits += classify_box(logits, box, model.rf_config(*image.shape[:2])) == box.label
    assert hits / total >= 0.95
