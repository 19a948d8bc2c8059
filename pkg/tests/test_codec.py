import pytest
import torch
import torch.nn.functional as F

from helper.codec import ToyCodec
from helper.errors import ConfigError
from helper.latent import Extent5, LatentGrid


def pixels(h=4, w=6, c=1, f=2, seed=0):
    g = torch.Generator().manual_seed(seed)
    return LatentGrid(torch.rand(1, c, f, h, w, generator=g, dtype=torch.float64))


def test_encode_stacks_phases():
    x = LatentGrid(torch.tensor([[1.0, 2.0], [3.0, 4.0]]).reshape(1, 1, 1, 2, 2))
    z = ToyCodec().encode(x)
    assert z.extent == Extent5(1, 4, 1, 1, 1)
    assert z.flat().tolist() == [1.0, 2.0, 3.0, 4.0]


def test_encode_extent():
    codec = ToyCodec()
    x = pixels(8, 6, c=3)
    assert codec.encode(x).extent == Extent5(1, 12, 2, 4, 3)
    assert codec.latent_extent(x.extent) == codec.encode(x).extent


def test_decode_encode_is_block_average():
    codec = ToyCodec()
    x = pixels(8, 8, c=2, seed=3)
    out = codec.decode(codec.encode(x))
    e = x.extent
    pooled = F.avg_pool2d(x.values.reshape(e.c * e.f, 1, e.h, e.w), 2)
    expected = pooled.repeat_interleave(2, dim=-2).repeat_interleave(2, dim=-1).reshape(x.values.shape)
    assert out.extent == x.extent
    assert torch.allclose(out.values, expected, rtol=0, atol=1e-15)


def test_decode_keeps_block_constant_video():
    codec = ToyCodec()
    x = LatentGrid(torch.arange(4, dtype=torch.float64).reshape(1, 1, 1, 2, 2).repeat_interleave(2, -1).repeat_interleave(2, -2))
    assert codec.decode(codec.encode(x)).equals(x)


@pytest.mark.parametrize("size", [(5, 4), (4, 3)])
def test_odd_sizes_rejected(size):
    with pytest.raises(ConfigError):
        ToyCodec().encode(pixels(*size))
    with pytest.raises(ConfigError):
        ToyCodec().latent_extent(Extent5(1, 1, 1, *size))


def test_decode_needs_phase_multiple():
    with pytest.raises(ConfigError):
        ToyCodec().decode(LatentGrid.zeros(Extent5(1, 3, 1, 2, 2)))
