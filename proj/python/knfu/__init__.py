"""Python bindings for the knfu federated distillation core."""

from ._knfu import (
    ConfigError,
    Error,
    InputError,
    IoError,
    ParseError,
    PartitionError,
    PhaseError,
    compute_epd,
    config_fingerprint,
    default_entropy_threshold,
    dirichlet_partition,
    fedmd_fuse,
    kl_loss,
    knfu_fuse,
    largest_remainder,
    mlp_gradient_check,
    pairwise_kl,
    render_table,
    run_experiment,
    selective_fd_fuse,
    synth_dataset,
    weight_matrix,
)

__all__ = [name for name in dir() if not name.startswith("_")]
