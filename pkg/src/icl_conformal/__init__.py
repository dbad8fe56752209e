"""Conformal prediction with in-context learning on synthetic regression tasks.

Pre-trains a linear self-attention model on noisy linear-regression
prompts, builds distribution-free prediction intervals by full conformal
prediction from the model's in-context predictions, benchmarks them
against exact ridge oracles, and fits compute scaling laws.
"""

__version__ = "0.1.0"

from .taskgen import GenConfig, TaskSample, rng_from_seed, sample_batch, sample_task, spawn_rngs, tokenize
from .lsa import (
    AdamState,
    LsaLayer,
    LsaParams,
    TrainConfig,
    TrainReport,
    adam_step,
    count_flops_per_step,
    grad_pretrain_loss,
    init_adam_state,
    init_params,
    load_checkpoint,
    lsa_forward,
    predict_labels,
    pretrain_loss,
    save_checkpoint,
    train,
)
from .ridge import RidgeModel, bayes_lambda, ridge_fit, ridge_fit_augmented, ridge_predict
from .conformal import (
    Grid,
    IclPredictor,
    PredictionSet,
    Predictor,
    RidgeOraclePredictor,
    SplitInterval,
    build_grid,
    conformity_scores,
    full_cp,
    max_accepted_rank,
    split_cp,
    typicalness,
)
from .evaluation import (
    EvalResult,
    ExperimentConfig,
    OodSweep,
    benchmark_time,
    pi_value_distance,
    predictive_pmf,
    run_coverage_experiment,
    run_ood_experiment,
    run_wdist_experiment,
    wasserstein_1d,
)
from .scaling import (
    ScalingDatapoint,
    ScalingFit,
    asymmetric_mae,
    collect_scaling_data,
    fit_scaling_law,
    isoflop_contour,
    make_flops_model,
    optimal_allocation,
    predict_loss,
    training_flops,
)
