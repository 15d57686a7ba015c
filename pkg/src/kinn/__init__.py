"""Knowledge-infused attention fusion for mental-health text classification."""

from .core import KinnConfig, KinnNet, Variant, forward, load_checkpoint, predict, save_checkpoint, train
from .encoding import AspectSet, HashEncoder, StubCommonsense, embed_sequence, extract_aspects
from .errors import BackendError, ConfigError, DataError, InputError, KinnError, NumericError
from .lexicon import Concept, Lexicon, expand_similar, load_lexicon
from .metrics import MetricReport, Task, evaluate
from .tagging import TaggedDocument, tag_document

__all__ = [
    "AspectSet", "BackendError", "Concept", "ConfigError", "DataError", "HashEncoder", "InputError",
    "KinnConfig", "KinnError", "KinnNet", "Lexicon", "MetricReport", "NumericError", "StubCommonsense",
    "Task", "TaggedDocument", "Variant", "embed_sequence", "evaluate", "expand_similar", "extract_aspects",
    "forward", "load_checkpoint", "load_lexicon", "predict", "save_checkpoint", "tag_document", "train",
]
__version__ = "0.1.0"
