"""Fixed parameter-free codec between pixel videos and latents.

encode stacks the four 2x2 spatial phases of every frame into channels
(c -> 4c, h -> h/2, w -> w/2). decode averages the phases back into one
channel group and repeats each latent cell over its 2x2 block, so
decode(encode(x)) is the 2x2 block average of x.
"""

from einops import rearrange, reduce, repeat

from .errors import ConfigError
from .latent import Extent5, LatentGrid


class ToyCodec:
    factor = 2

    def _check(self, z: LatentGrid):
        e = z.extent
        if e.h % self.factor or e.w % self.factor:
            raise ConfigError(f"codec needs height and width divisible by {self.factor}, got {e.h}x{e.w}")

    def encode(self, pixels: LatentGrid) -> LatentGrid:
        self._check(pixels)
        return LatentGrid(rearrange(
            pixels.values, "b c f (h p1) (w p2) -> b (c p1 p2) f h w", p1=self.factor, p2=self.factor,
        ))

    def decode(self, latent: LatentGrid) -> LatentGrid:
        phases = self.factor * self.factor
        if latent.extent.c % phases:
            raise ConfigError(f"latent channels {latent.extent.c} are not a multiple of {phases}")
        mean = reduce(latent.values, "b (c q) f h w -> b c f h w", "mean", q=phases)
        return LatentGrid(repeat(mean, "b c f h w -> b c f (h p1) (w p2)", p1=self.factor, p2=self.factor))

    def latent_extent(self, e: Extent5) -> Extent5:
        if e.h % self.factor or e.w % self.factor:
            raise ConfigError(f"codec needs height and width divisible by {self.factor}, got {e.h}x{e.w}")
        return Extent5(e.b, e.c * self.factor ** 2, e.f, e.h // self.factor, e.w // self.factor)
