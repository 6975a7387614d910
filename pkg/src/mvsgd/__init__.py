"""Distributed sparse SGD with majority-vote consensus masks: simulator,
wire codecs and communication-load accounting."""

from .accounting import Budget, analytic_budget, render_table
from .codec import (BitStream, QuantizedBlock, decode_mask, dequantize, encode_mask,
                    quantize_values)
from .config import ExperimentConfig, load_config, parse_config, serialize_config
from .errors import (ConfigError, CorruptStream, DegenerateInput, InvalidArgument, MVSGDError,
                     ProtocolViolation)
from .experiment import build_simulation, run_experiment
from .protocol import CommLedger, RoundReport, apply_update, run_round, server_aggregate
from .sparsify import (ErrorAccumulator, SparseMask, SparseUpdate, accumulate, apply_mask,
                       bottom_k_mask, residual, top_k_mask)
from .tensor_core import (LrSchedule, Model, compute_gradient, local_steps, lr_at,
                          make_synthetic_regression, shard_iid)
from .voting import (AddDrop, ad_apply, ad_propose, select_random_weighted, select_topk_mask,
                     tally_votes)

__version__ = "0.1.0"
