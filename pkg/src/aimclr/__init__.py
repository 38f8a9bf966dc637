"""Self-supervised skeleton action representations with extreme augmentations,
energy-based attention drop and nearest-neighbour mining, in plain numpy."""

from .augment import extreme_pipeline, normal_pipeline
from .contrastive import MemoryBank, d3m_loss, info_nce, mine_neighbors, nnm_loss
from .encoder import EncoderConfig, EncoderPair, encode, momentum_update, project
from .evaluation import finetune_eval, fuse_streams, knn_eval, linear_eval
from .skeleton import SkeletonGraph, default_graph, generate_synthetic, load_manifest
from .training import TrainConfig, baseline_config, init_state, run_pretraining

__version__ = "0.1.0"
