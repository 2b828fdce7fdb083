"""Relation-supervised vision-language pretraining on a synthetic shape corpus."""

__version__ = "0.1.0"

from .data import (  # noqa: F401
    CorpusStats,
    DataError,
    EntityBox,
    ImageRecord,
    RelationTriplet,
    RelationVocab,
    build_relation_vocab,
    corpus_stats,
    load_dataset,
    save_dataset,
)
from .model import EncodedPair, ModelConfig, VlmModel, build_model  # noqa: F401
from .patches import PatchGrid, PatchMask, patches_for_bbox, union_mask  # noqa: F401
from .tokenizer import TokenizedText, Tokenizer, mask_for_mlm  # noqa: F401
from .verbalise import (  # noqa: F401
    VerbalisedCaption,
    VerbaliserConfig,
    make_vsg_caption,
    parse_vsg,
    sample_triplets,
    sort_triplets,
    verbalise,
)
