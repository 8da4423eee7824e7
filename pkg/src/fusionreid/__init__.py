"""fusionreid: a desk-scale image-text fusion transformer for person
retrieval, with masked pretraining, supervised finetuning, mAP/CMC
evaluation and Grad-CAM export, all on a hand-rolled float64 autodiff
core."""

__version__ = "0.1.0"

from .autodiff import Tensor, backward, no_grad, parameter  # noqa: F401
from .datagen import (PKBatch, Sample, SyntheticDataset,  # noqa: F401
                      generate_dataset, load_dataset, pk_batches,
                      save_dataset, split_dataset)
from .evaluation import EvalResult, distance_matrix, evaluate, extract_features  # noqa: F401
from .gradcam import Heatmap, grad_cam  # noqa: F401
from .model import EncoderConfig, Model, ModelConfig  # noqa: F401
from .train import TrainConfig, TrainState, finetune_step, lr_at, pretrain_step, sgd_step  # noqa: F401
