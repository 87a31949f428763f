import json
from pathlib import Path

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from concept_lens.backend import (PLANTED_CONCEPTS, ToyBackend, available_backends, get_backend,
                                  patch_coords)
from concept_lens.errors import InputError, LayerRangeError

from oracles import central_difference, max_relative_error, toy_grey_response, toy_patches

GOLDEN = json.loads((Path(__file__).parent / "golden" / "toy_constants.json").read_text())


def test_describe_matches_frozen_constants(toy):
    assert toy.describe().to_dict() == GOLDEN["descriptor"]


def test_token_table(toy):
    for key, expected in GOLDEN["tokens"].items():
        word, layer = key.split("@")
        got = toy.text_activations(word, int(layer)).numpy()
        np.testing.assert_allclose(got, expected, rtol=0, atol=1e-12)


def test_apple_is_axis_plus_common(toy):
    got = toy.text_activations("apple", 0).numpy()
    planted = toy.concept_axis("apple") + toy.params["common"][0]
    # only the small per-token offset separates them
    assert np.linalg.norm(got - planted) < 0.03


def test_multi_token_text_is_token_mean(toy):
    text = "red apple on table"
    rows = [toy.text_activations(w, 2).numpy() for w in text.split()]
    np.testing.assert_allclose(toy.text_activations(text, 2).numpy(), np.mean(rows, axis=0),
                               atol=1e-12)


def test_text_activation_is_pure(toy):
    a = toy.text_activations("frog", 1)
    b = toy.text_activations("frog", 1)
    assert torch.equal(a, b)


@pytest.mark.parametrize("text", ["", "   "])
def test_empty_text_rejected(toy, text):
    with pytest.raises(InputError):
        toy.text_activations(text, 0)


@pytest.mark.parametrize("layer", [-1, 4, 100])
def test_layer_out_of_range(toy, layer):
    with pytest.raises(LayerRangeError):
        toy.text_activations("apple", layer)
    with pytest.raises(IndexError):
        toy.image_patch_activations(np.full((64, 64, 3), 0.5), layer)


def test_grey_response_closed_form(toy):
    grey = torch.full((64, 64, 3), 0.5, dtype=torch.float64)
    for layer in range(4):
        acts = toy.image_patch_activations(grey, layer).patches.numpy()
        np.testing.assert_allclose(acts, np.broadcast_to(GOLDEN["grey_response"][str(layer)],
                                                         acts.shape), atol=1e-12)
        np.testing.assert_allclose(GOLDEN["grey_response"][str(layer)],
                                   toy_grey_response(toy, layer), atol=1e-12)


def test_forward_matches_loop_oracle(toy, rng):
    img = rng.uniform(size=(64, 64, 3))
    for layer in (0, 3):
        got = toy.image_patch_activations(torch.tensor(img), layer).patches.numpy()
        np.testing.assert_allclose(got, toy_patches(toy, img, layer), atol=1e-10)


def test_shape_contract(toy, rng):
    d = toy.describe()
    acts = toy.image_patch_activations(rng.uniform(size=(64, 64, 3)), 1)
    assert acts.patches.shape == (d.patch_grid[0] * d.patch_grid[1], d.hidden_dim)
    assert acts.num_patches == d.num_patches
    batch = toy.image_patch_activations(rng.uniform(size=(3, 64, 64, 3)), 1)
    assert batch.patches.shape == (3, 64, 16)


def test_patch_coords_cover_grid_once():
    xy = patch_coords((3, 5)).tolist()
    assert len(xy) == 15
    assert sorted(map(tuple, xy)) == sorted((x, y) for y in range(3) for x in range(5))


@pytest.mark.parametrize("shape", [(32, 32, 3), (64, 64), (64, 64, 4)])
def test_wrong_shape_rejected(toy, shape):
    with pytest.raises(InputError):
        toy.image_patch_activations(np.zeros(shape), 0)


@pytest.mark.parametrize("value", [-0.01, 1.01])
def test_out_of_range_pixels_rejected(toy, value):
    img = np.full((64, 64, 3), 0.5)
    img[3, 4, 1] = value
    with pytest.raises(InputError):
        toy.image_patch_activations(img, 0)


def test_image_activations_pure(toy, rng):
    img = torch.tensor(rng.uniform(size=(64, 64, 3)))
    assert torch.equal(toy.image_patch_activations(img, 2).patches,
                       toy.image_patch_activations(img, 2).patches)


@pytest.mark.parametrize("layer", [0, 1])
def test_pixel_gradient_matches_finite_differences(tiny, layer, rng):
    img = rng.uniform(0.2, 0.8, size=(8, 8, 3))
    grad = tiny.pixel_gradient(img, layer, lambda p: p.sum()).numpy()

    def f(x):
        with torch.no_grad():
            return float(tiny.image_patch_activations(torch.tensor(x), layer).patches.sum())

    assert max_relative_error(grad, central_difference(f, img)) < 1e-4


def test_planted_axes_orthonormal(toy):
    axes = np.stack([toy.concept_axis(c) for c in PLANTED_CONCEPTS])
    np.testing.assert_allclose(axes @ axes.T, np.eye(len(PLANTED_CONCEPTS)), atol=1e-12)


def test_registry():
    names = available_backends()
    assert {"toy", "gemma3-4b", "internvl3-8b"} <= set(names)
    assert isinstance(get_backend("toy"), ToyBackend)
    with pytest.raises(InputError):
        get_backend("no-such-model")


@pytest.mark.parametrize("name", ["gemma3-4b", "internvl3-8b"])
def test_real_adapter_descriptor_without_weights(name):
    backend = get_backend(name)
    d = backend.describe()
    assert d.image_resolution == 448
    assert d.patch_grid[0] * d.patch_grid[1] == d.num_patches
    with pytest.raises(InputError, match="model_path"):
        backend.text_activations("apple", 1)


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 3), st.floats(0.0, 1.0))
def test_uniform_images_give_identical_patches(layer, value):
    backend = ToyBackend()
    acts = backend.image_patch_activations(torch.full((64, 64, 3), value, dtype=torch.float64),
                                           layer).patches
    assert torch.allclose(acts, acts[:1].expand_as(acts), atol=1e-12)
    assert torch.isfinite(acts).all()
