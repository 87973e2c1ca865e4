"""Multi-layer convolutional sparse coding toolkit.

Layered dictionaries, four pursuit solvers over them, a small reverse-mode
gradient engine, and a trainer that turns unrolled pursuit into an image
classifier.
"""

from .dictionary import (
    ConvDictionary,
    DimensionError,
    NonFiniteError,
    ResourceError,
    SpectralEstimate,
    analyze,
    as_tensor,
    estimate_spectral_bound,
    identity_dictionary,
    materialize,
    random_dictionary,
    synthesize,
)
from .pursuit import (
    AnchorPolicy,
    LayerParams,
    MLCSCModel,
    PursuitResult,
    effective_dictionary_apply,
    lbp_forward,
    lta_forward,
    mlista_forward,
    nmse,
    reconstruct,
    run_pursuit,
    shifted_relu,
    soft_threshold,
    wsebp_forward,
)
from .nets import (
    NetConfig,
    TrainConfig,
    build_mlcsc_net,
    build_wsebp_vgg13,
    evaluate,
    forward_classify,
    init_train_state,
    load_checkpoint,
    param_count,
    save_checkpoint,
    train_epoch,
)
from .data import (
    Dataset,
    FormatError,
    load_cifar,
    read_tensor_file,
    synth_sparse_problem,
    write_cifar_batch,
    write_tensor_file,
)
from .experiments import ConfigError, run_pursuit_bench, run_training

__all__ = [
    "AnchorPolicy",
    "ConfigError",
    "ConvDictionary",
    "Dataset",
    "DimensionError",
    "FormatError",
    "LayerParams",
    "MLCSCModel",
    "NetConfig",
    "NonFiniteError",
    "PursuitResult",
    "ResourceError",
    "SpectralEstimate",
    "TrainConfig",
    "analyze",
    "as_tensor",
    "build_mlcsc_net",
    "build_wsebp_vgg13",
    "effective_dictionary_apply",
    "estimate_spectral_bound",
    "evaluate",
    "forward_classify",
    "identity_dictionary",
    "init_train_state",
    "lbp_forward",
    "load_cifar",
    "load_checkpoint",
    "lta_forward",
    "materialize",
    "mlista_forward",
    "nmse",
    "param_count",
    "random_dictionary",
    "read_tensor_file",
    "reconstruct",
    "run_pursuit",
    "run_pursuit_bench",
    "run_training",
    "save_checkpoint",
    "shifted_relu",
    "soft_threshold",
    "synth_sparse_problem",
    "synthesize",
    "train_epoch",
    "wsebp_forward",
    "write_cifar_batch",
    "write_tensor_file",
]
