"""Class-incremental learning with low-rank adapters and inter-layer relation alignment."""

from .backbone import Backbone, BackboneConfig, pretrain_base
from .config import ExperimentConfig, load_config
from .errors import ConfigError, ContractError, NumericalError, ParseError
from .metrics import AccuracyMatrix, forgetting, margin, summarize, theory_report
from .relation import AlignmentConfig, relation_matrix, sv_align_loss
from .stream import StreamSpec, make_stream
from .trainer import TrainConfig, run_stream, train_task

__version__ = "0.1.0"
