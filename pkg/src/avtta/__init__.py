"""Audio-assisted test-time adaptation for small video classifiers."""

from .autodiff import (NonFiniteError, ShapeError, Tape, Tensor, add, backward,
                       channel_mean, channel_var, concat, constant, cross_entropy,
                       l1_distance, linear, mean_var, parameter, permute, relu,
                       reshape, rms_norm, scale, softmax, tsum)
from .model import (ForwardRecord, ModelConfig, VideoClassifier, VideoClip, ViewSet,
                    deterministic_view, load_checkpoint, predict, predict_probs,
                    sample_views, save_checkpoint, train_source)
from .stats import (TestStatsTracker, TrainStats, align_loss, compute_train_stats,
                    load_train_stats, save_train_stats)
from .audiomap import (AudioTopK, FixtureClient, HttpChatClient, LLMClientConfig,
                       MappingCache, MappingResult, PromptBundle, VideoLabelSpace,
                       build_prompt, load_audio_predictions, load_mapping_examples,
                       map_via_lexical, map_via_llm, resolve_label,
                       save_audio_predictions, synth_audio_oracle)
from .adapt import (AdaptConfig, AdaptationRecord, CycleState, RunResult, StepLosses,
                    adapt_sample, adapt_step, cls_loss, cons_loss, derive_rng,
                    ensemble_predict, run_delayed, run_online, select_filter,
                    should_continue, total_loss)
from .databench import (CORRUPTION_KINDS, CorruptionSpec, DatasetSpec, GeneratedDataset,
                        IntegrityError, corrupt, default_audio_vocab, gen_dataset,
                        load_dataset, save_dataset)
from .experiment import (Bench, ConfigError, ExperimentConfig, VariantSpec, build_bench,
                         config_echo, load_config, make_mapper, make_stream,
                         parse_config, report_metrics, run_experiment, run_variant)

__version__ = "0.1.0"
