"""Masked-patch transformer image clustering.

Two augmented views of each image are masked, encoded by a shared
transformer, and trained in three stages: masked reconstruction, paired-view
contrastive learning at the instance and cluster level, and a boosting stage
aligning cluster assignments with k-means pseudo-labels.
"""

from .augment import AugmentPolicy, strong_augment, strong_policy, weak_augment, weak_policy
from .crosslevel import KMeansResult, cli_loss, hard_labels, kmeans, match_clusters, modify_pseudo
from .data import Dataset, batches, load_image_folder, synth_blobs
from .errors import (ConfigError, DivergenceError, EmptyClusterError,
                     EmptyDatasetError, InputError, InvalidImage,
                     InvalidProbability, InvalidRatio, InvalidTemperature,
                     PatchGridError, PiciError, ZeroNormError)
from .losses import (LossBreakdown, cluster_entropy, cluster_loss, cosine_sim,
                     instance_loss, pisd_loss, reconstruction_loss)
from .masking import MaskPlan, PatchSequence, mask_count, patchify, sample_mask, unpatchify
from .metrics import Contingency, accuracy, ari, contingency, nmi
from .network import (Network, NetworkConfig, decode, encode, load_checkpoint,
                      load_into_network, preset, save_checkpoint)
from .trainer import TrainConfig, Trainer, derive_seed, predict_dataset

__version__ = "0.1.0"
