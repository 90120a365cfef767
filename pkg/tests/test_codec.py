import numpy as np
import pytest
import torch

from mrir.codec import LatentCode, SpaceToDepthCodec


@pytest.fixture
def codec():
    return SpaceToDepthCodec(8)


def rand_image(seed, size=64, dtype=torch.float64):
    gen = torch.Generator().manual_seed(seed)
    return torch.rand(3, size, size, generator=gen, dtype=dtype)


def test_shape_law(codec):
    code = codec.encode(rand_image(0))
    assert code.z.shape == (192, 8, 8)
    assert code.source_dims == (64, 64)


def test_midgray_maps_to_zero(codec):
    code = codec.encode(torch.full((3, 16, 16), 0.5, dtype=torch.float64))
    assert code.z.abs().max() == 0.0


def test_roundtrip_bit_exact(codec):
    img = rand_image(1)
    assert torch.equal(codec.decode(codec.encode(img)), img)


def test_roundtrip_on_8bit_grid(codec):
    rng = np.random.default_rng(2)
    img8 = rng.integers(0, 256, size=(3, 32, 32), dtype=np.uint8)
    img = torch.from_numpy((img8.astype(np.float32) / 255.0).astype(np.float64))
    assert torch.equal(codec.decode(codec.encode(img)), img)


def test_zero_latent_decodes_to_midgray(codec):
    z = torch.zeros(192, 8, 8, dtype=torch.float64)
    img = codec.decode(LatentCode(z=z, factor=8, source_dims=(64, 64)))
    assert torch.equal(img, torch.full((3, 64, 64), 0.5, dtype=torch.float64))


def test_decode_then_encode_identity(codec):
    gen = torch.Generator().manual_seed(3)
    z = torch.rand(192, 8, 8, generator=gen, dtype=torch.float64) * 2.0 - 1.0
    code = LatentCode(z=z, factor=8, source_dims=(64, 64))
    assert torch.equal(codec.encode(codec.decode(code)).z, z)


def test_decode_clips(codec):
    z = torch.zeros(192, 8, 8, dtype=torch.float64)
    z[0, 0, 0] = 3.0
    z[1, 0, 0] = -2.0
    img = codec.decode(LatentCode(z=z, factor=8, source_dims=(64, 64)))
    assert img.max() == 1.0 and img.min() == 0.0


def test_encode_affine_in_inputs(codec):
    x, y = rand_image(4), rand_image(5)
    mixed = codec.encode_tensor(0.5 * x + 0.5 * y)
    combined = 0.5 * codec.encode_tensor(x) + 0.5 * codec.encode_tensor(y)
    assert (mixed - combined).abs().max() < 1e-12


def test_indivisible_dims_rejected(codec):
    with pytest.raises(ValueError):
        codec.encode(torch.rand(3, 60, 64, dtype=torch.float64))


def test_latent_shape_validation():
    with pytest.raises(ValueError):
        LatentCode(z=torch.zeros(100, 8, 8), factor=8, source_dims=(64, 64))
    with pytest.raises(ValueError):
        LatentCode(z=torch.zeros(192, 8, 8), factor=8, source_dims=(64, 32))


def test_batched_tensors(codec):
    gen = torch.Generator().manual_seed(6)
    batch = torch.rand(2, 3, 16, 16, generator=gen, dtype=torch.float64)
    z = codec.encode_tensor(batch)
    assert z.shape == (2, 192, 2, 2)
    assert torch.equal(codec.decode_tensor(z), batch)
