"""Multi-task speech emotion recognition on a numpy autodiff engine."""
from .autodiff import NumericError, Parameter, ShapeError, Tape, Tensor, backward
from .data import (Corpus, CorpusError, FoldPlan, GenerationConfig, generate_corpus,
                   make_speaker_independent_folds, read_corpus, tdsa_speed_perturb, write_corpus)
from .encoder import Encoder, EncoderConfig, apply_freeze, load_checkpoint, save_checkpoint
from .fusion import AriFusion, CoAttention, WeightedSumFusion, ari_fuse, weighted_sum_fuse
from .metrics import cer, edit_distance, unweighted_accuracy, weighted_accuracy, wer
from .model import MultiTaskModel
from .optim import Optimizer, sgd_adam_step
from .tasks import InfeasibleTargetError, cross_entropy, ctc_loss, stage1_loss, stage2_loss
from .train import (ExperimentConfig, RunResult, TrainingDiverged, evaluate, run_ablation,
                    run_kfold, train_two_stage)

__version__ = "0.1.0"
