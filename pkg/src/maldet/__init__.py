"""Behaviour-based Windows malware detection from API-call sequences.

The pipeline: parse sandbox JSON reports into ordered API-call sequences,
integer-encode them against a train-split vocabulary, classify with a
CNN-BiGRU network trained from scratch on a small reverse-mode tape, and
explain individual predictions with a perturbation-based local surrogate.
"""

from .errors import MaldetError
from .explain import Explanation, explain, render_html
from .network import (
    ConvBlock,
    ModelBundle,
    ModelConfig,
    forward,
    load_bundle,
    predict_proba,
    save_bundle,
)
from .reports import (
    BehaviorReport,
    LabeledSequence,
    ProcessTrace,
    build_dataset,
    extract_sequence,
    parse_report,
    read_csv,
    write_csv,
)
from .tensor import Rng, Tensor
from .textprep import (
    EncodedDataset,
    Vocabulary,
    decode,
    encode,
    encode_dataset,
    fit_vocabulary,
    train_test_split,
)
from .training import (
    AdamState,
    EvalMetrics,
    TrainHistory,
    adam_step,
    bce_loss,
    evaluate,
    grid_search,
    train,
)

__version__ = "0.1.0"

__all__ = [
    "AdamState", "BehaviorReport", "ConvBlock", "EncodedDataset", "EvalMetrics",
    "Explanation", "LabeledSequence", "MaldetError", "ModelBundle", "ModelConfig",
    "ProcessTrace", "Rng", "Tensor", "TrainHistory", "Vocabulary", "adam_step",
    "bce_loss", "build_dataset", "decode", "encode", "encode_dataset", "evaluate",
    "explain", "extract_sequence", "fit_vocabulary", "forward", "grid_search",
    "load_bundle", "parse_report", "predict_proba", "read_csv", "render_html",
    "save_bundle", "train", "train_test_split", "write_csv",
]
