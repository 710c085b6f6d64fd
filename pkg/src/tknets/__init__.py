"""Temporal domain generalisation with Koopman operators."""

from .domains import (Domain, DomainSequence, SplitSpec, gen_evolcircle, gen_linear_drift,
                      gen_rotated_images, gen_rplate, load_idx, load_sequence, save_sequence,
                      split_sequence, split_sorted_tabular)
from .episodic import (Episode, SearchSpace, TrainConfig, episode_loss, random_search,
                       sample_episode, train_erm, train_tknets)
from .evalx import (EvalReport, estimate_bound, estimate_lambda, evaluate, evaluate_target,
                    kl_proxy, rollout_multistep)
from .tknet import (EncoderSpec, MeasurementSpec, TKNetParams, centroids_from_support, classify,
                    embed, forecast, init_params)

__version__ = "0.1.0"
