"""Prune-and-repair toolkit: masks, channel repair, layerwise sparsity
allocation, and transition detection for small CNN graphs."""

from .allocation import (ErkResult, InfeasibleBudgetError, ProjectionForcedResult,
                         ScoreTable, allocation_objective, conv_shapes,
                         erk_allocate, greedy_allocate, lamp_allocate, lamp_scores,
                         projection_forced_erk, score_tables, uniform_allocate)
from .container import (ContainerError, batches_fingerprint, load_batches,
                        load_labels, load_masks, load_network, read_container,
                        save_batches, save_labels, save_masks, save_network,
                        write_container)
from .diagnostics import (DEFAULT_GRID, CurveBuilder, DiagnosticCurves,
                          DiagnosticPoint, distortion, raw_shift, repair_residual,
                          rr_ratio)
from .engine import (Add, BatchNorm, ChannelStats, Conv2d, GlobalAvgPool,
                     GraphError, LayerNode, Linear, MaxPool, NetworkSpec, ReLU,
                     StatsAccumulator, batchnorm_forward, bn_after,
                     channel_stats, conv2d_forward, conv_nodes, forward,
                     freeze_params, linear_forward, maxpool_forward,
                     replace_conv_weights, validate_network)
from .harness import (DEFAULT_TARGETS, RULES, CurveCache, ExperimentConfig,
                      SweepRow, calib_sensitivity, choose_calibration,
                      evaluate_topk, run_sweep)
from .masking import (allocation_from_masks, apply_masks, global_magnitude_mask,
                      global_sparsity, magnitude_mask, mask_sparsity,
                      masks_from_allocation, prunable_counts)
from .repair import (EPSILON, RepairConfig, RepairScales, bn_recalibrate,
                     channelwise_repair, collect_tap_stats, cr_bn, direct_scale,
                     estimate_tau, make_bn_stream, shrinkage_scale)
from .toynet import gen_batches, gen_labels, gen_toynet, init_bn_stats
from .transition import (ALPHA_BROAD, ALPHA_CORE, S_HIGH, S_LOW, Band, CtsProfile,
                         average_ranks, compute_cts_profile, cts_score,
                         detect_band, kendall, repair_stress, rr_objective_gap,
                         smooth3, spearman)

__version__ = "0.1.0"
