"""Random forest and LSTM models plus their on-disk container."""

from .container import ContainerError, read_container, write_container
from .forest import Forest, ForestConfig, ModelError, Tree, train_forest, train_tree
from .lstm import LstmConfig, LstmModel, LstmParams, NumericError, gradient_check, train_lstm

__all__ = ["ContainerError", "read_container", "write_container", "Forest", "ForestConfig", "ModelError", "Tree",
           "train_forest", "train_tree", "LstmConfig", "LstmModel", "LstmParams", "NumericError",
           "gradient_check", "train_lstm"]
