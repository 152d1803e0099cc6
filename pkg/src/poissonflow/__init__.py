"""Generative sampling by electrostatic flow in an augmented space.

Data points act as charges on the z = 0 hyperplane of R^(N+1); integrating
the induced field backward from an analytic prior on a high hyperplane turns
far-field noise into data.  The package provides the exact N-body field, a
tree-code accelerator, a small trainable approximator, anchored ODE solvers,
exact likelihoods, and a statistical verification suite.
"""

__version__ = "0.1.0"

from .data import Dataset, DatasetStats, center, generate_toy, load_csv, save_csv, stats
from .field import (
    AugmentedPoint,
    FieldEstimate,
    discrete_charge_field,
    empirical_field,
    empirical_field_batch,
    normalized_field,
    normalized_field_batch,
    unnormalized_field_sum,
)
from .geometry import (
    Dim,
    DomainError,
    SingularityError,
    greens_gradient,
    greens_potential,
    log_surface_area_unit_sphere,
    sample_gaussian,
    sample_unit_sphere,
    sample_unit_vector,
    surface_area_unit_sphere,
)
from .likelihood import LikelihoodResult, drift_divergence, log_likelihood, log_likelihood_batch
from .model import (
    Adam,
    ExactEmpiricalField,
    Mlp,
    NeuralField,
    TrainConfig,
    TrainState,
    load_checkpoint,
    save_checkpoint,
    train,
)
from .ode import (
    BatchResult,
    DegenerateFieldError,
    HitReport,
    OdeConfig,
    OdeRun,
    drift,
    escape_to_radius_batch,
    forward_latents_batch,
    hit_particles,
    integrate_backward,
    integrate_forward,
    sample_backward_batch,
    substitute_z_direction,
)
from .perturb import (
    DerivedSchedule,
    PerturbConfig,
    perturb,
    perturb_batch,
    rule_of_thumb_M,
    rule_of_thumb_schedule,
)
from .prior import PriorSpec, prior_log_density, sample_beta, sample_prior
from .rng import RngState
from .tree import TreeCode, build_tree, tree_field, tree_field_batch
from .verify import (
    TestReport,
    backward_recovery,
    energy_distance,
    hit_probability_report,
    interpolate,
    kappa,
    kappa_zone,
    ks_statistic,
    norm_z_diagnostic,
    theorem1_uniformity,
    w2_1d,
)
