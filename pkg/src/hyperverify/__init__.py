"""Hypernetwork-generated per-user verifiers on a numpy autodiff core."""
from .backbone import BackboneConfig, EmbeddingBackbone, train_reference_backbone
from .config import RunConfig
from .data import DataError, LabeledImageSet, SynthConfig, load_image_dir, split_identities, synth_identity_dataset
from .evaluation import EvalReport, PairList, evaluate_pairs, make_pairs, read_pairs, roc_curve
from .hypernet import HyperNetwork, enroll_multi, generate_weights, generate_weights_batch
from .kcs import BatchSampler, ClusterIndex, TrainingBatch, compute_identity_centroids, kmeans, sample_batch
from .modelio import (deserialize_model, load_backbone, load_system, load_verifier, save_system,
                      save_verifier, serialize_model)
from .tensor import ConfigError, ShapeError, Tensor, backward, no_grad
from .training import (HyperVerifierSystem, Schedule, lambda_factor, norm_loss, target_matrix,
                       total_loss, train, train_direct_baseline, train_step, weighted_bce)
from .verifier import (DESK, LARGER, PAPER_SCALE, VerifierArchitecture, WeightSet, batched_predict,
                       count_flops, count_params, verify)

__version__ = "0.1.0"
