"""Semi-supervised GAN toolkit for encrypted traffic classification.

Pipeline: pcap captures -> fixed-length Packet Byte Vectors (pbv) ->
labeled/unlabeled/test pools (dataset) -> GAN or CNN training (models,
losses, training) -> metrics and experiment grids (evaluation), all wired
together by the command line (cli).
"""

__version__ = "0.1.0"

from .dataset import ClassSchema, SplitSpec, TrafficDataset, load_dataset, make_splits
from .errors import (BytesganError, CapacityError, ConfigError, ContractError,
                     FormatError, TrainingDiverged)
from .pbv import FilterPolicy, PacketByteVector, RawPacket, build_dataset, read_capture
from .training import CnnTrainConfig, SganTrainConfig, train_cnn, train_sgan

__all__ = [
    "BytesganError", "CapacityError", "ClassSchema", "CnnTrainConfig",
    "ConfigError", "ContractError", "FilterPolicy", "FormatError",
    "PacketByteVector", "RawPacket", "SganTrainConfig", "SplitSpec",
    "TrafficDataset", "TrainingDiverged", "build_dataset", "load_dataset",
    "make_splits", "read_capture", "train_cnn", "train_sgan",
]
