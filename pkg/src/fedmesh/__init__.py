"""fedmesh: aggregator/party federated learning with pluggable fusion and transports."""

from .data import Dataset, Schema, load_csv, partition, play_tennis, synth_blobs, train_test_split
from .fusion import coord_median_fuse, fedavg_fuse, iter_avg_fuse, run_fusion_session
from .model import (
    DecisionTree,
    LinearModel,
    ModelUpdate,
    evaluate_model,
    fit_model,
    get_model_update,
    load_model,
    predict,
    save_model,
    update_model,
)

__version__ = "0.1.0"
