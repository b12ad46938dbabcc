"""Radar point-cloud distillation against a vision teacher.

Train a point-cloud encoder to mimic a teacher's semantic embedding space
with a contrastive loss, then classify activities zero-shot against text
anchors or few-shot with a gamma-weighted label-text term.
"""

from .classify import (AnchorMatrix, EvalResult, FewShotConfig, TextAnchor,
                       evaluate, few_shot, zero_shot)
from .distill import (Adam, CKDConfig, CorrelationReport, TrainConfig,
                      ckd_loss, correlation_report, cosine_sim, mse_kd_loss,
                      train)
from .encoder import (EncoderConfig, EncoderParams, attention_layer,
                      encoder_backward, encoder_forward, forward_batch,
                      init_params, stn_forward)
from .pipeline import ModelBundle, PairedSample, PreprocessConfig, embed_samples
from .pointcloud import (FrameBatch, PointFrame, RadarPoint, center_frame,
                         doppler_filter, resample_fixed, window_stream)
from .synthetic import OracleTeacher, SyntheticSpec, gen_dataset, oracle_zero_shot_bound

__version__ = "0.1.0"
