"""aatn: attention classifiers with per-head query/key distribution matching."""

from .alignment import (AlignmentConfig, AlignmentNets, CriticParams,
                        DiscriminatorParams, NavigatorParams,
                        adversarial_alignment_loss, batch_alignment_loss,
                        ct_alignment_loss, ct_navigator, discriminator_forward,
                        ot_alignment_loss, pairwise_cost, sinkhorn)
from .attention import (AttentionLayerParams, EmpiricalPair, attend_and_merge,
                        attention_weights, empirical_pairs, project_qkv)
from .checkpoint import load_checkpoint, save_checkpoint
from .data import (Dataset, Example, NoiseSpec, gen_pair_matching,
                   inject_noise, iter_batches, load_jsonl, save_jsonl)
from .metrics import (MmdReport, PredictionRecord, accuracy, ece,
                      export_diagnostics, mmd_gaussian, qk_mmd_report)
from .model import (Model, ModelConfig, ModelParams, RunReport, TrainConfig,
                    cross_entropy, encoder_forward, evaluate, fit, load_model,
                    save_model, total_loss, train_step)
from .optim import AdamState, adam_step, clip_grads, global_grad_norm
from .tensor import (Tape, Tensor, apply_unary, backward, gradient_reversal,
                     matmul, softmax)

__version__ = "0.1.0"
