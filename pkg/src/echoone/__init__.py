"""Multi-plane echocardiography segmentation with prototype-conditioned dense prompts."""

from .atlas import EncoderConfig, LatentEncoder, PriorAtlas, build_atlas, kmeans, train_latent_encoder
from .bundle import ModelBundle
from .config import RunConfig, load_config
from .data import PLANES, STRUCTURES, LabeledImage, Plane
from .evaluate import EvalReport, MetricRecord, evaluate
from .harmonize import DatasetManifest, RemapTable, build_manifest, fill_cavity, harmonize_mask
from .losses import seg_loss
from .metrics import dice, hd95, iou
from .modeling import EchoONE, ModelConfig
from .pcmask import LightUNet, compose_prior, generate_prompt, pcm_loss, similarity_weights
from .train import TrainConfig, Trainer, train

__version__ = "0.1.0"
