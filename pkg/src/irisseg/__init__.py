"""Post-mortem iris segmentation toolkit.

Three segmentation routes share one mask currency: a trainable
encoder-decoder network with pooling-index unpooling, a conventional
circular/Viterbi boundary pipeline, and a seeded synthetic eye generator
that provides ground truth for desk-scale experiments.  Evaluation is
subject-disjoint IoU with split-wise comparison statistics.
"""

from .autodiff import (OptimizerState, PoolIndices, RunningStats, Tensor,
                       batchnorm, conv2d, crop2d, cross_entropy_loss, maxpool2,
                       maxunpool2, pixel_softmax, relu, sgd_momentum_step)
from .baseline import (BaselineConfig, Circle, PolarContour, exclude_reflections,
                       find_iris_circle, find_pupil_circle, segment, viterbi_refine)
from .data import (Manifest, ManifestRecord, Sample, SynthConfig, downsample_image,
                   downsample_mask, generate_synthetic, load_manifest, load_mask,
                   load_sample, render_overlay, save_manifest, save_mask, upscale_mask)
from .errors import (ConfigError, DataError, DivergenceError, IrisSegError,
                     NoBoundaryFound, NumericsError, ShapeError, StateError)
from .evaluation import (BoxplotStats, ComparisonRow, IoUResult, SplitPlan,
                         boxplot_stats, compare, evaluate, iou, make_splits)
from .segnet import (Model, ModelConfig, TrainConfig, build_model,
                     expected_parameter_count, forward, image_to_input,
                     load_model, predict_mask, save_model, train)

__version__ = "0.1.0"
