"""ResNet-style graph builders with a configurable bottleneck ratio."""
from __future__ import annotations

import enum

from chipneck.engine import Precision
from chipneck.errors import ConfigError
from chipneck.graph import GlobalAvgPool, GraphBuilder, LinearHead, NetworkGraph, ResidualAdd

DEFAULT_RATIOS = (1, 2, 4, 8, 16, 32)


class Variant(str, enum.Enum):
    R18 = "R18"
    R34 = "R34"
    R50 = "R50"
    R101 = "R101"
    R152 = "R152"
    TINY = "Tiny"

    @classmethod
    def parse(cls, name) -> "Variant":
        if isinstance(name, Variant):
            return name
        key = str(name).strip().lower().replace("resnet", "r").replace("-", "")
        for v in cls:
            if v.value.lower() == key:
                return v
        raise ConfigError(f"unknown model variant {name!r}; choose one of {[v.value for v in cls]}")


# (block type, blocks per stage, stage output widths)
STAGINGS = {
    Variant.R18: ("basic", (2, 2, 2, 2), (64, 128, 256, 512)),
    Variant.R34: ("basic", (3, 4, 6, 3), (64, 128, 256, 512)),
    Variant.R50: ("bottleneck", (3, 4, 6, 3), (256, 512, 1024, 2048)),
    Variant.R101: ("bottleneck", (3, 4, 23, 3), (256, 512, 1024, 2048)),
    Variant.R152: ("bottleneck", (3, 8, 36, 3), (256, 512, 1024, 2048)),
    Variant.TINY: ("basic", (1, 1), (16, 32)),
}
FULL_INPUT = (1, 3, 224, 224)
TINY_INPUT = (1, 3, 8, 8)


def mid_channels(c: int, r: int) -> int:
    """Channels left after dividing ``c`` by ratio ``r``, never below one."""
    if int(c) != c or c < 1:
        raise ConfigError(f"channel count must be a positive integer, got {c}")
    if int(r) != r or r < 1:
        raise ConfigError(f"bottleneck ratio must be a positive integer, got {r}")
    return max(1, int(c) // int(r))


def _shortcut(b: GraphBuilder, src: int, c_out: int, stride: int, prefix: str) -> int:
    if stride == 1 and b.channels(src) == c_out:
        return src
    sc = b.conv(src, c_out, 1, stride, 0, f"{prefix}.shortcut.conv")
    return b.bn(sc, f"{prefix}.shortcut.bn")


def _merge(b: GraphBuilder, main: int, sc: int, prefix: str) -> int:
    h = b.add(ResidualAdd(), (main, sc), f"{prefix}.add")
    h = b.bn(h, f"{prefix}.bn_out")
    return b.relu(h, f"{prefix}.relu_out")


def basic_block(b: GraphBuilder, src: int, c_out: int, r: int, stride: int, prefix: str) -> int:
    c_mid = mid_channels(c_out, r)
    h = b.conv(src, c_mid, 3, stride, 1, f"{prefix}.conv1")
    h = b.relu(b.bn(h, f"{prefix}.bn1"), f"{prefix}.relu1")
    h = b.conv(h, c_out, 3, 1, 1, f"{prefix}.conv2")
    return _merge(b, h, _shortcut(b, src, c_out, stride, prefix), prefix)


def bottleneck_block(b: GraphBuilder, src: int, c_out: int, r: int, stride: int, prefix: str) -> int:
    c_mid = mid_channels(c_out, r)
    h = b.conv(src, c_mid, 1, 1, 0, f"{prefix}.conv1")
    h = b.relu(b.bn(h, f"{prefix}.bn1"), f"{prefix}.relu1")
    h = b.conv(h, c_mid, 3, stride, 1, f"{prefix}.conv2")
    h = b.relu(b.bn(h, f"{prefix}.bn2"), f"{prefix}.relu2")
    h = b.conv(h, c_out, 1, 1, 0, f"{prefix}.conv3")
    return _merge(b, h, _shortcut(b, src, c_out, stride, prefix), prefix)


def _fragment(block, c_in, c_out, r, stride, hw, seed, precision) -> NetworkGraph:
    if c_in < 1 or c_out < 1:
        raise ConfigError(f"block channels must be >= 1, got {c_in}->{c_out}")
    b = GraphBuilder((1, c_in, *hw), seed, precision)
    block(b, b.input, c_out, r, stride, "block")
    return b.build()


def build_basic_block(c_in: int, c_out: int, r: int = 1, stride: int = 1, hw=(8, 8), seed: int = 0,
                      precision=Precision.SINGLE) -> NetworkGraph:
    return _fragment(basic_block, c_in, c_out, r, stride, hw, seed, precision)


def build_bottleneck_block(c_in: int, c_out: int, r: int = 1, stride: int = 1, hw=(8, 8), seed: int = 0,
                           precision=Precision.SINGLE) -> NetworkGraph:
    return _fragment(bottleneck_block, c_in, c_out, r, stride, hw, seed, precision)


def build_resnet(variant, r: int = 1, classes: int = 100, input_shape=None, seed: int = 0,
                 precision=Precision.SINGLE) -> NetworkGraph:
    """Build one of the ResNet variants with block middles divided by ``r``.

    Full-size variants replace the 7x7 stem and max-pool with two stride-2
    3x3 convs so that every stage output matches the standard shape table.
    """
    variant = Variant.parse(variant)
    if classes < 2:
        raise ConfigError(f"classes must be >= 2, got {classes}")
    mid_channels(1, r)
    block_type, counts, widths = STAGINGS[variant]
    block = basic_block if block_type == "basic" else bottleneck_block
    if input_shape is None:
        input_shape = TINY_INPUT if variant is Variant.TINY else FULL_INPUT
    b = GraphBuilder(tuple(input_shape), seed, precision)

    if variant is Variant.TINY:
        h = b.conv(b.input, 16, 3, 1, 1, "stem.conv1")
        h = b.relu(b.bn(h, "stem.bn1"), "stem.relu1")
    else:
        h = b.conv(b.input, 64, 3, 2, 1, "stem.conv1")
        h = b.relu(b.bn(h, "stem.bn1"), "stem.relu1")
        h = b.conv(h, 64, 3, 2, 1, "stem.conv2")
        h = b.relu(b.bn(h, "stem.bn2"), "stem.relu2")

    for stage, (count, width) in enumerate(zip(counts, widths), start=1):
        for i in range(count):
            stride = 2 if (i == 0 and stage > 1) else 1
            h = block(b, h, width, r, stride, f"layer{stage}.{i}")

    h = b.add(GlobalAvgPool(), (h,), "pool")
    b.add(LinearHead(b.channels(h), classes), (h,), "fc")
    return b.build()
