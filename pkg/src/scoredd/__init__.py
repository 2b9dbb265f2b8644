"""Score-based generative modelling through SDEs and T-scales anomaly detection."""

from .sde import DomainError, SdeSpec, drift_diffusion, marginal_params, perturb, self_score, time_grid
from .oracle import GaussianMixture, OracleScore, reference_mixture
from .nets import ConvScoreNet, MlpScoreNet, TimeEmbedding
from .trainer import TrainConfig, dsm_loss, train
from .integrator import SelfScoreStub, run_pair, generate, reconstruct
from .detector import DetectConfig, detect

__version__ = "0.1.0"
