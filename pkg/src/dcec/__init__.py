"""Deep convolutional embedded clustering for image collections."""

from .autoencoder import CaeArchitecture, CaeModel, build_model, decode, encode, pretrain
from .checkpoint import load_checkpoint, save_checkpoint
from .clustering import ClusterHead, cae_kmeans, dec_train, joint_train
from .config import TrainConfig
from .dataset import Dataset, load_dataset
from .metrics import calinski_harabasz, silhouette, unsupervised_accuracy

__version__ = "0.1.0"
