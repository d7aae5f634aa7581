"""Deep-network acoustic-model toolkit: PFile I/O, RBM/SdA pre-training,
SGD fine-tuning with dropout and maxout, frequency CNNs and bottleneck
feature extraction."""
from ._kernels import BACKEND
from .errors import (CheckpointError, ContractError, CorruptArchiveError, DataError, DomainError,
                     KpdnnError, ParseError, ShapeError, TrainingError, UnsupportedExportError,
                     ValidationError)
from .finetune import LrSchedule, TrainState, evaluate, fine_tune, next_lr, parse_lrate_spec, sgd_epoch
from .mathops import ActivationKind, affine, apply_activation, softmax_rows
from .network import (ConvLayerSpec, NetSpec, Network, backward, cnn_spec, forward, init_network,
                      parse_nnet_spec, predict)
from .pfile import (DataSpec, FrameRecord, FrameTable, PFileHeader, PFileSource, parse_data_spec,
                    read_partitions, read_pfile, splice, write_pfile)
from .rng import SeededRng

__version__ = "0.1.0"
