"""Link social-media accounts through the sensor-noise fingerprints of their cameras."""
__version__ = "0.1.0"

from .clustering import ClusterResult, GroupingOutcome, ImageGroup, estimate_user_fingerprints
from .config import ClusterConfig, DenoiserConfig, RunConfig, SynthConfig
from .errors import CamlinkError
from .fingerprint import CameraFingerprint, correlation, estimate_fingerprint, load_fingerprint, save_fingerprint
from .identity import Account, AccountImage, PairLabel, ScoreMatrix, Scheme, account_similarity, run_scheme
