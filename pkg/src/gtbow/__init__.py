"""Size-binned, orientation-verified bag-of-words retrieval and localization
for ground texture images."""

from .core import (
    FeatureFileError,
    ImageFeatures,
    Keypoint,
    Pose2D,
    angle_diff,
    hamming_distance,
    read_feature_file,
    write_feature_file,
)
from .bow import BowVector, transform
from .index import InverseIndex, QueryCandidate
from .localize import LocalizeParams, RigidTransform2D, localize, ransac_rigid
from .synth import FeatureWorld, ObservationParams, generate_world, observe, overlap_ratio
from .vocab import (
    SizeBinning,
    Vocabulary,
    assign_hard,
    assign_soft,
    compute_idf,
    fit_size_bins,
    load_vocab,
    save_vocab,
    train_akm,
    train_hkm,
)

__version__ = "0.1.0"
