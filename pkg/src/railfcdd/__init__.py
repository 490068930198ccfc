"""One-class deterioration detection for railway track imagery.

Subpackages:
    model        backbone mappings to receptive-field maps (CNN27 + deeper trunks)
    losses       pseudo-Huber / data-description losses and the training loop
    heatmap      Gaussian upsampling to full-resolution deterioration marks
    scoring      anomaly scores, risk weighting, threshold calibration, histograms
    datapipe     frame extraction, scene filters, sampling plans, synthetic corpus
    evalharness  AUC/F1 metrics and the ablation grids
    clistore     CLI, run records, inspection history, prognostic comparison
"""

from .model import (BackboneSpec, FeatureMap, ModelWeights, ReceptiveFieldGeometry,
                    build_backbone, forward_map, geometry_of)
from .losses import (TrainConfig, TrainingLog, fcdd_loss, fcdd_loss_gradient,
                     pseudo_huber, svdd_objective, train_fcdd)
from .heatmap import GaussianKernelSpec, Heatmap, RenderSpec, batch_heatmaps, gaussian_upsample, render
from .scoring import (RiskWeightTable, ScoredFrame, Threshold, anomaly_score,
                      calibrate_threshold, risk_weighted_score, score_histogram)
from .datapipe import (DatasetManifest, Frame, SyntheticSpec, crop_frame, generate_synthetic,
                       pool_datasets, resize_frame, sample_imbalanced, sample_scaled,
                       split_manifest, subsample_frames)
from .evalharness import AblationGrid, ConfusionCounts, MetricsReport, auc, evaluate, prf1, run_ablation
from .clistore import Config, InspectionHistory, RunRecord, main, prognostic_compare

__version__ = "0.1.0"
