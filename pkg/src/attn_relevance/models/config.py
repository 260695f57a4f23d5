from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass
from enum import Enum

from ..errors import ConfigError

# Reserved token ids.  Id 0 is the removal ("mask") token in both vocabularies.
MASK_ID = 0
CLS_ID = 1
SEP_ID = 2


class Architecture(str, Enum):
    PURE_SELF = "PureSelf"
    SELF_PLUS_CO = "SelfPlusCo"
    ENCODER_DECODER = "EncoderDecoder"


class RecordKind(str, Enum):
    SELF_TEXT = "SelfText"
    SELF_IMAGE = "SelfImage"
    SELF_JOINT = "SelfJoint"
    CROSS_TEXT_FROM_IMAGE = "CrossTextFromImage"
    CROSS_IMAGE_FROM_TEXT = "CrossImageFromText"
    ENCODER_SELF = "EncoderSelf"
    DECODER_SELF = "DecoderSelf"
    DECODER_CROSS = "DecoderCross"


# (query domain, key domain) for every record kind.  Domains: t text, i image,
# j joint (text ++ image), e encoder, d decoder.
KIND_DOMAINS: dict[RecordKind, tuple[str, str]] = {
    RecordKind.SELF_TEXT: ("t", "t"),
    RecordKind.SELF_IMAGE: ("i", "i"),
    RecordKind.SELF_JOINT: ("j", "j"),
    RecordKind.CROSS_TEXT_FROM_IMAGE: ("t", "i"),
    RecordKind.CROSS_IMAGE_FROM_TEXT: ("i", "t"),
    RecordKind.ENCODER_SELF: ("e", "e"),
    RecordKind.DECODER_SELF: ("d", "d"),
    RecordKind.DECODER_CROSS: ("d", "e"),
}

ARCH_KINDS: dict[Architecture, tuple[RecordKind, ...]] = {
    Architecture.PURE_SELF: (RecordKind.SELF_JOINT,),
    Architecture.SELF_PLUS_CO: (
        RecordKind.SELF_TEXT,
        RecordKind.SELF_IMAGE,
        RecordKind.CROSS_TEXT_FROM_IMAGE,
        RecordKind.CROSS_IMAGE_FROM_TEXT,
    ),
    Architecture.ENCODER_DECODER: (
        RecordKind.ENCODER_SELF,
        RecordKind.DECODER_SELF,
        RecordKind.DECODER_CROSS,
    ),
}


@dataclass(frozen=True)
class ModelConfig:
    """Shape and seed of one micro-transformer.

    For the classification architectures ``text_tokens`` and ``image_tokens``
    count input slots (the text slots include CLS at position 0).  For
    ``EncoderDecoder`` the encoder runs over ``image_tokens`` grid cells and the
    decoder over ``queries`` learned query slots; query ``j`` is responsible
    for object class ``j`` and the last class index means "no object", so
    ``classes`` must equal ``queries + 1``.

    ``layers`` is the depth of every block type (text self, image self,
    co-attention; or encoder and decoder).
    """

    architecture: Architecture = Architecture.SELF_PLUS_CO
    layers: int = 2
    heads: int = 2
    head_dim: int = 8
    text_tokens: int = 6
    image_tokens: int = 8
    queries: int = 0
    classes: int = 4
    text_vocab: int = 12
    image_vocab: int = 12
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "architecture", Architecture(self.architecture))
        self.validate()

    @property
    def embed_dim(self) -> int:
        return self.heads * self.head_dim

    @property
    def is_detection(self) -> bool:
        return self.architecture is Architecture.ENCODER_DECODER

    def validate(self) -> None:
        if self.heads < 1 or self.head_dim < 1:
            raise ConfigError("heads and head_dim must be >= 1")
        if self.layers < 1:
            raise ConfigError("layers must be >= 1")
        if self.image_tokens < 1:
            raise ConfigError("image_tokens must be >= 1")
        if self.image_vocab < 2:
            raise ConfigError("image_vocab must leave room for the mask id")
        if self.is_detection:
            if self.queries < 1:
                raise ConfigError("EncoderDecoder needs queries >= 1")
            if self.classes != self.queries + 1:
                raise ConfigError("EncoderDecoder needs classes == queries + 1 (last is no-object)")
        else:
            if self.text_tokens < 1:
                raise ConfigError("text_tokens must be >= 1")
            if self.text_vocab < 3:
                raise ConfigError("text_vocab must leave room for mask/CLS/SEP ids")
            if self.classes < 1:
                raise ConfigError("classes must be >= 1")
            if self.queries:
                raise ConfigError(f"{self.architecture.value} does not take decoder queries")

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["architecture"] = self.architecture.value
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown model config keys: {sorted(unknown)}")
        return cls(**d)

    def digest(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]
