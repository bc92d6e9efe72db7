"""Convolutional model of four-voice counterpoint: masked training over pianorolls,
ancestral and blocked-Gibbs generation, and framewise likelihood evaluation."""

from .pianoroll import (ContextMask, Dataset, DatasetError, Pianoroll, apply_mask,
                        load_dataset, random_crop, serialize_dataset)
from .midiio import midi_to_roll, to_midi
from .model import (DESK_SCALE, FULL_SCALE, ModelConfig, ModelParameters,
                    conditionals, forward, init_parameters, load_checkpoint,
                    save_checkpoint)
from .training import (AdamState, TrainConfig, TrainingDiverged, estimate_joint_nll,
                       loss, sample_context, train)
from .sampling import (AnnealSchedule, SamplerRun, ancestral_sample, anneal_alpha,
                       default_schedule, gibbs_ancestral, gibbs_independent, inpaint)
from .evaluation import EvalConfig, EvalReport, corpus_nll, framewise_nll, sample_nll

__version__ = "0.1.0"
