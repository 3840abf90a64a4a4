from modality_forge.training.checkpoint import (Checkpoint, CheckpointError, load_checkpoint,
                                                save_checkpoint, state_hash)
from modality_forge.training.config import ConfigError, RunConfig, TrainConfig
from modality_forge.training.segmentation import (evaluate_segmentation, predict_labels,
                                                  train_segmentation)
from modality_forge.training.translation import (TrainingDivergedError, TrainingError,
                                                 impute_modalities, train_translation,
                                                 translate_batch)

__all__ = ["Checkpoint", "CheckpointError", "ConfigError", "RunConfig", "TrainConfig",
           "TrainingDivergedError", "TrainingError", "evaluate_segmentation", "impute_modalities",
           "load_checkpoint", "predict_labels", "save_checkpoint", "state_hash",
           "train_segmentation", "train_translation", "translate_batch"]
