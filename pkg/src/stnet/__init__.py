"""Spatial-temporal deformable attention detector, desk-scale and framework-free.

Numpy forward passes with hand-written backward passes throughout; the hot
bilinear sampling kernels are numba-compiled with a pure-numpy fallback
(STNET_BACKEND=numpy|numba|auto).
"""

from .config import NetConfig, RunConfig
from .detection import (GroundTruth, Matching, evaluate_ap, giou,
                        hungarian_match, set_loss, set_loss_backward)
from .inference import (BenchResult, ShufflePlan, bench_compare, full_infer,
                        shuffle_infer)
from .kernels import BACKEND, bilinear_sample
from .numerics import InputError, LinearLayer, grad_check
from .stda import (QueryBatch, StdaParams, init_stda, normalize_to_level,
                   predict_attention_weights, predict_offsets, stda_backward,
                   stda_forward)
from .synthdata import (ClipSample, SyntheticDataset, SyntheticVideo,
                        generate_dataset, generate_video, read_dataset,
                        sample_clip, write_dataset)
from .train import train_run
from .transformer import (Detection, NetParams, PassCounters, decoder_forward,
                          encoder_forward, init_net, load_checkpoint,
                          net_forward, save_checkpoint, self_attention)

__version__ = "0.1.0"
