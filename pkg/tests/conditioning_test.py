"""
条件構築 (マスクチャネル・背景埋め込み) のテスト
"""

import json

import numpy as np
import pytest
import torch

from src.conditioning.condition import (
    assemble_condition,
    decode_mask_channels,
    encode_background,
    encode_mask,
    load_condition_specs,
    one_hot_planes,
)
from src.conditioning.encoder import BackgroundEncoder
from src.dataio.types import Image2D, SegMask
from src.utils.errors import SchemaError, ShapeError


def _block_mask(size: int = 16) -> SegMask:
    labels = np.zeros((size, size), dtype=np.int64)
    labels[0:4, 0:4] = 1
    labels[8:12, 4:8] = 3
    return SegMask(labels)


def test_one_hot_planes_are_exclusive():
    labels = torch.tensor([[0, 1], [2, 3]])
    planes = one_hot_planes(labels, 3)
    assert planes.shape == (4, 2, 2)
    assert torch.equal(planes.sum(dim=0), torch.ones(2, 2))
    assert planes[3, 1, 1] == 1.0


def test_encode_mask_shape_and_occupancy():
    channels = encode_mask(_block_mask(), f=4)
    assert channels.values.shape == (4, 4, 4)
    assert channels.num_planes == 4
    assert torch.allclose(channels.values.sum(dim=0), torch.ones(4, 4))
    assert channels.values[1, 0, 0] == 1.0
    assert channels.values[3, 2, 1] == 1.0
    assert channels.values[0, 3, 3] == 1.0


def test_half_covered_cell_gives_half_occupancy():
    labels = np.zeros((4, 4), dtype=np.int64)
    labels[:, :2] = 2
    channels = encode_mask(SegMask(labels), f=4)
    assert channels.values[2, 0, 0].item() == pytest.approx(0.5)
    assert channels.values[0, 0, 0].item() == pytest.approx(0.5)


def test_encode_mask_rejects_indivisible_size():
    with pytest.raises(ShapeError):
        encode_mask(SegMask.empty((10, 10)), f=4)


def test_decode_recovers_block_aligned_mask():
    mask = _block_mask()
    restored = decode_mask_channels(encode_mask(mask, f=4))
    assert restored.shape == (4, 4)
    assert restored.labels[0, 0] == 1
    assert restored.labels[2, 1] == 3
    assert restored.labels[3, 3] == 0


def test_background_encoder_width_and_determinism():
    torch.manual_seed(0)
    encoder = BackgroundEncoder(embedding_dim=12, base_channels=4).eval()
    img = Image2D(np.random.default_rng(0).uniform(0, 1, (16, 16)).astype(np.float32), provenance="bg", preprocessed=True)
    a, b = encode_background(encoder, img), encode_background(encoder, img)
    assert a.vector.shape == (12,)
    assert a.source_id == "bg"
    assert torch.equal(a.vector, b.vector)


def test_background_encoder_separates_images():
    torch.manual_seed(0)
    encoder = BackgroundEncoder(embedding_dim=8, base_channels=4).eval()
    flat = Image2D(np.full((16, 16), 0.5, dtype=np.float32), preprocessed=True)
    bright = Image2D(np.full((16, 16), 0.9, dtype=np.float32), preprocessed=True)
    assert not torch.equal(encode_background(encoder, flat).vector, encode_background(encoder, bright).vector)


def test_assemble_unconditional():
    bundle = assemble_condition(None, None, f=4)
    assert bundle.is_empty
    assert bundle.latent_shape is None


def test_assemble_mask_only():
    bundle = assemble_condition(_block_mask(), None, f=4)
    assert not bundle.is_empty
    assert bundle.background is None
    assert bundle.latent_shape == (4, 4)


def test_assemble_full_condition():
    encoder = BackgroundEncoder(embedding_dim=8, base_channels=4).eval()
    bg = Image2D(np.full((16, 16), 0.5, dtype=np.float32), preprocessed=True)
    bundle = assemble_condition(_block_mask(), bg, f=4, background_encoder=encoder)
    assert bundle.mask.num_planes == 4
    assert bundle.background.vector.shape == (8,)


def test_assemble_background_without_encoder_is_ignored():
    bg = Image2D(np.full((16, 16), 0.5, dtype=np.float32), preprocessed=True)
    bundle = assemble_condition(None, bg, f=4)
    assert bundle.background is None
    assert bundle.latent_shape == (4, 4)


def test_load_condition_specs_resolves_relative_paths(tmp_path):
    path = tmp_path / "conditions.json"
    path.write_text(json.dumps([
        {"mask_path": "m0.json", "background_path": None, "seed": 1},
        {"mask_path": "/abs/m1.json", "background_path": "bg.fits", "seed": "2"},
    ]))
    specs = load_condition_specs(str(path))
    assert specs[0].mask_path == str(tmp_path / "m0.json")
    assert specs[0].background_path is None
    assert specs[1].mask_path == "/abs/m1.json"
    assert specs[1].background_path == str(tmp_path / "bg.fits")
    assert specs[1].seed == 2


@pytest.mark.parametrize("content", ["{not json", json.dumps({"mask_path": "a"}), json.dumps([{"seed": 1}])])
def test_load_condition_specs_rejects_bad_files(tmp_path, content):
    path = tmp_path / "conditions.json"
    path.write_text(content)
    with pytest.raises(SchemaError):
        load_condition_specs(str(path))
