"""Unsupervised diffeomorphic motion tracking for tagged image sequences."""

from .diffeo import SSConfig, integrate_svf, invert_svf
from .engine import Mode, TrainConfig, infer_sequence, train
from .grid import (
    bilinear_sample,
    compose_fields,
    count_nonpositive,
    jacobian_determinant,
    spatial_gradient,
    warp_image,
)
from .lagrange import MotionSequence, compose_sequence, track_points
from .losses import LossConfig, PosteriorParams
from .net import NetConfig, PosteriorNet, sample_z
from .synth import PhantomConfig, Sequence, generate

__version__ = "0.1.0"
