"""Desk-scale lab for compressing speech encoders by hidden-state
distillation, with syllable-splicing augmentation, layer-jumping checkpoint
surgery, CTC fine-tuning, and CKA layer-similarity analysis."""

__version__ = "0.1.0"

from .checkpoint import (Checkpoint, continuous_init, continuous_mapping,
                         jump_mapping, layer_jump_init, load_checkpoint,
                         load_model, save_checkpoint)
from .cka import (CKAMatrix, export_heatmap, interlayer_matrix, linear_cka,
                  read_heatmap_csv)
from .distill import (DistillConfig, DistillResult, default_pairs,
                      distill_loss, init_student, mse, read_trace,
                      train_distill, write_trace)
from .errors import (ArgumentError, DegenerateInputError, DepthError,
                     DistillabError, FormatError, GraphError,
                     InfeasibleTargetError, InputTooShortError, NumericError,
                     ParseError, ShapeError, TrainingDiverged)
from .finetune import (CtcHead, FinetuneConfig, FinetuneResult, MaskSpec,
                       TriStageSchedule, build_vocab, ctc_greedy_decode,
                       ctc_loss, edit_distance, evaluate_ctc, finetune,
                       load_head, mask_features, read_report,
                       token_error_rate, tri_stage_lr, write_hyps,
                       write_report)
from .model import PRESETS, AcousticModel, HiddenStates, ModelConfig, init_params
from .optim import Adam, AdamState, adam_step, grad_check
from .splice import (Corpus, LexiconEntry, SplicedUtterance, SyllableSpan,
                     Utterance, batch_mix, generate_synthetic_corpus,
                     load_corpus, maybe_shuffle, mix_pair, parse_alignment,
                     parse_lexicon, parse_transcripts, read_wav,
                     shuffle_splice, syllable_inventory, write_alignment,
                     write_transcripts, write_wav)
from .tensor import Graph, Tensor, no_grad, record
