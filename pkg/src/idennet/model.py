"""The four network variants, pretraining networks, weight sharing and freezing."""
from __future__ import annotations

import enum
from dataclasses import dataclass

import numpy as np

from .autodiff import (
    ShapeError,
    Tensor,
    avg_pool_2x2,
    concat_channels,
    global_avg_pool,
)
from .blocks import Conv, DenseBlock, Layer, Linear, Parameter, Stream, copy_layer_state
from .config import BackboneConfig

INPUT_SIZE = 48


class Variant(str, enum.Enum):
    ORIGINAL = "original"
    I = "i"  # noqa: E741
    F = "f"
    IF = "if"

    @property
    def has_identity_stream(self) -> bool:
        return self in (Variant.F, Variant.IF)

    @property
    def has_identity_head(self) -> bool:
        return self in (Variant.I, Variant.IF)

    @classmethod
    def parse(cls, value: "str | Variant") -> "Variant":
        if isinstance(value, Variant):
            return value
        key = value.strip().lower().replace("idennet_", "").replace("idennet", "")
        return cls(key)


@dataclass
class ModelOutput:
    emo_logits: Tensor
    id_logits: Tensor | None
    fusion_maps: Tensor
    expression_features: Tensor | None = None
    identity_features: Tensor | None = None
    fusion_input: Tensor | None = None


class PretrainNet(Layer):
    """A single stream with block 3, GAP and one classifier, trained on one task."""

    def __init__(self, task: str, backbone: BackboneConfig, num_classes: int, rng: np.random.Generator):
        if task not in ("emotion", "identity"):
            raise ValueError(f"task must be emotion or identity, got {task!r}")
        self.task = task
        self.backbone = backbone
        self.num_classes = num_classes
        self.stream = Stream("stream", backbone, rng, with_block3=True)
        self.fc = Linear("fc", backbone.head_channels, num_classes, rng)

    def children(self):
        return iter((self.stream, self.fc))

    def __call__(self, images: Tensor, mode: str = "train", rng: np.random.Generator | None = None,
                 drop: float = 0.0) -> Tensor:
        _check_images(images)
        return self.fc(global_avg_pool(self.stream(images, mode, rng, drop)))


def _check_images(images: Tensor) -> None:
    if images.data.ndim != 4 or images.shape[1:] != (INPUT_SIZE, INPUT_SIZE, 1):
        raise ShapeError(f"expected images of shape [B,{INPUT_SIZE},{INPUT_SIZE},1], got {images.shape}")


class IdenNet(Layer):
    """Fine-tuning network.

    Streams stop after block 2. Their outputs (one or two) are concatenated,
    mixed by a 1x1 convolution back to the stream width, pooled and passed
    through the fusion dense block, GAP and the classification heads.
    """

    def __init__(self, variant: Variant, backbone: BackboneConfig, num_expressions: int,
                 num_identities: int | None, rng: np.random.Generator):
        variant = Variant.parse(variant)
        if num_expressions < 2:
            raise ValueError("need at least 2 expression classes")
        if variant.has_identity_head and (num_identities is None or num_identities < 2):
            raise ValueError(f"variant {variant.value} needs num_identities >= 2")
        self.variant = variant
        self.backbone = backbone
        self.num_expressions = num_expressions
        self.num_identities = num_identities if variant.has_identity_head else None
        d = backbone.stream_channels

        self.emotion = Stream("emotion", backbone, rng, with_block3=False)
        self.identity = Stream("identity", backbone, rng, with_block3=False) if variant.has_identity_stream else None
        fused_in = 2 * d if self.identity is not None else d
        self.fusion_conv = Conv("fusion_conv", 1, fused_in, d, rng)
        self.fusion_block = DenseBlock("fusion_block", d, backbone.layers_per_block, backbone.growth_rate, rng)
        self.fc_emo = Linear("fc_emo", backbone.head_channels, num_expressions, rng)
        self.fc_id = Linear("fc_id", backbone.head_channels, self.num_identities, rng) \
            if variant.has_identity_head else None
        self.frozen_set: set[str] = set()
        names = [p.name for p in self.parameters()]
        assert len(names) == len(set(names)), "duplicate parameter names"

    def children(self):
        parts = [self.emotion]
        if self.identity is not None:
            parts.append(self.identity)
        parts += [self.fusion_conv, self.fusion_block, self.fc_emo]
        if self.fc_id is not None:
            parts.append(self.fc_id)
        return iter(parts)

    def streams(self) -> list[Stream]:
        return [s for s in (self.emotion, self.identity) if s is not None]

    def trainable_parameters(self) -> list[Parameter]:
        return [p for p in self.parameters() if not p.frozen]

    def extract(self, images: Tensor, mode: str = "train", rng: np.random.Generator | None = None,
                drop: float = 0.0) -> tuple[Tensor, Tensor | None]:
        """Stream outputs (expression features, identity features or None)."""
        _check_images(images)
        xe = self.emotion.features(images, mode, rng, drop)
        xi = self.identity.features(images, mode, rng, drop) if self.identity is not None else None
        return xe, xi

    def head(self, xe: Tensor, xi: Tensor | None, mode: str = "train",
             rng: np.random.Generator | None = None, drop: float = 0.0) -> ModelOutput:
        """Everything after the streams: fusion, fusion block and classifiers."""
        fused_in = concat_channels(xe, xi) if xi is not None else xe
        h = avg_pool_2x2(self.fusion_conv(fused_in))
        maps = self.fusion_block(h, mode, rng, drop)
        pooled = global_avg_pool(maps)
        emo = self.fc_emo(pooled)
        ident = self.fc_id(pooled) if self.fc_id is not None else None
        return ModelOutput(emo, ident, maps, xe, xi, fused_in)

    def head_pooled(self, pe: Tensor, pi: Tensor | None, mode: str = "train",
                    rng: np.random.Generator | None = None, drop: float = 0.0) -> ModelOutput:
        """Same function as :meth:`head`, fed with already-pooled stream outputs.

        A 1x1 convolution commutes with 2x2 average pooling, so pooling
        first gives the same result (up to rounding) at a quarter of the
        cost. Used when stream outputs are precomputed.
        """
        fused_in = concat_channels(pe, pi) if pi is not None else pe
        maps = self.fusion_block(self.fusion_conv(fused_in), mode, rng, drop)
        pooled = global_avg_pool(maps)
        emo = self.fc_emo(pooled)
        ident = self.fc_id(pooled) if self.fc_id is not None else None
        return ModelOutput(emo, ident, maps, None, None, fused_in)

    def __call__(self, images: Tensor, mode: str = "train", rng: np.random.Generator | None = None,
                 drop: float = 0.0) -> ModelOutput:
        xe, xi = self.extract(images, mode, rng, drop)
        return self.head(xe, xi, mode, rng, drop)


def build_model(variant, backbone: BackboneConfig, num_expressions: int, num_identities: int | None,
                rng: np.random.Generator) -> IdenNet:
    return IdenNet(Variant.parse(variant), backbone, num_expressions, num_identities, rng)


def forward(model: IdenNet, images: Tensor, mode: str = "eval", rng=None, drop: float = 0.0) -> ModelOutput:
    return model(images, mode, rng, drop)


def load_pretrained_and_share(model: IdenNet, emotion_net: PretrainNet,
                              identity_net: PretrainNet | None = None) -> IdenNet:
    """Initialise the streams from pretrained networks and copy block 3 into the fusion block.

    The fusion block receives a one-time copy of the emotion network's
    block 3; the two are not tied afterwards.
    """
    if emotion_net.backbone != model.backbone:
        raise ShapeError(f"emotion checkpoint backbone {emotion_net.backbone} != model {model.backbone}")
    _copy_extractor(emotion_net.stream, model.emotion)
    if emotion_net.stream.block3 is None:
        raise ValueError("emotion checkpoint has no block 3 to share")
    copy_layer_state(emotion_net.stream.block3, model.fusion_block)
    if model.identity is not None:
        if identity_net is None:
            raise ValueError(f"variant {model.variant.value} needs an identity checkpoint")
        if identity_net.backbone != model.backbone:
            raise ShapeError(f"identity checkpoint backbone {identity_net.backbone} != model {model.backbone}")
        _copy_extractor(identity_net.stream, model.identity)
    return model


def _copy_extractor(src: Stream, dst: Stream) -> None:
    for a, b in ((src.stem, dst.stem), (src.block1, dst.block1), (src.block2, dst.block2)):
        copy_layer_state(a, b)


def freeze_feature_extractors(model: IdenNet) -> IdenNet:
    """Freeze stem and blocks 1-2 of every stream."""
    for stream in model.streams():
        for p in stream.extractor_parameters():
            p.freeze()
            model.frozen_set.add(p.name)
    return model


def extract_heatmap(fusion_maps, size: int = INPUT_SIZE) -> np.ndarray:
    """Channel-mean activation map per image, scaled to [0, 1] at ``size``x``size``.

    Each map is min-max normalised, bilinearly upsampled and stretched to
    [0, 1] again so the peak response reaches exactly 1. A constant map
    yields 0.5 everywhere.
    """
    maps = fusion_maps.data if isinstance(fusion_maps, Tensor) else np.asarray(fusion_maps)
    act = maps.astype(np.float64).mean(axis=-1)
    out = np.empty((act.shape[0], size, size))
    for k, m in enumerate(act):
        lo, hi = m.min(), m.max()
        if hi - lo <= 1e-12 * max(1.0, abs(hi)):
            out[k] = 0.5
            continue
        up = _bilinear((m - lo) / (hi - lo), size)
        ulo, uhi = up.min(), up.max()
        out[k] = (up - ulo) / (uhi - ulo)
    return out


def _bilinear(img: np.ndarray, size: int) -> np.ndarray:
    """Half-pixel-centred bilinear resize of a square map with edge clamping."""
    n = img.shape[0]
    coords = np.clip((np.arange(size) + 0.5) * n / size - 0.5, 0, n - 1)
    i0 = np.floor(coords).astype(int)
    i1 = np.minimum(i0 + 1, n - 1)
    t = coords - i0
    rows = img[i0] * (1 - t)[:, None] + img[i1] * t[:, None]
    return rows[:, i0] * (1 - t)[None, :] + rows[:, i1] * t[None, :]
