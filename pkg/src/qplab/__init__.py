"""Numerical laboratory for long-range quasi-periodic lattice operators.

The package assembles finite restrictions of operators whose diagonal
samples a cosine-type potential along a torus rotation and whose hopping
decays like ``exp(-alpha log^rho(1 + ||n||))``, then checks the inequalities
that control them: Green's function norms and entry decay, multi-scale
resonance bookkeeping with root tracking, Combes-Thomas bounds off the
spectrum, and transport-moment ceilings.  Every check is an explicit
inequality with its constants in the open, reported pass or fail.
"""

from .errors import (
    ASingular,
    AsymmetricBox,
    BoxTooLarge,
    BracketViolated,
    ConfigInvalid,
    DecayViolation,
    DegenerateRatio,
    DenominatorNonpositive,
    DiophantineViolation,
    IoFailure,
    NoRootInWindow,
    NonConvergence,
    NotContractive,
    NotHermitian,
    OutOfStrip,
    PreconditionViolated,
    QplabError,
    QuadratureDisagreement,
    ScheduleOverflow,
    SeparationViolated,
    Singular,
    SizeOverflow,
    SpectrumEscapes,
    TailNotSmall,
    WindingMismatch,
    WindowTooSmall,
)
from .torus import (
    frac_dist,
    log_torus_norm,
    torus_norm,
    wrap_to_symmetric,
    wrap_to_unit,
)
from .lattice import (
    DeformationLevel,
    DeformationReport,
    KernelSum,
    LatticeBox,
    QuasiMetricCert,
    box_around,
    deformation_level,
    extract_lower_bound,
    is_regular,
    kernel_sum,
    pairwise_sup_dist,
    quasi_metric_certify,
    quasi_metric_defects,
    regular_deformation,
    regularity_witness,
    set_contains,
    set_diameter,
    sets_intersect,
    sup_dist_sets,
    symmetric_about_origin,
)
from .model import (
    DiophantineCertificate,
    EnergyPoint,
    FrequencyVector,
    HoppingKernel,
    ModelSpec,
    MorseCertificate,
    OperatorRestriction,
    PhasePoint,
    PotentialSpec,
    SpectrumReport,
    assemble_restriction,
    assemble_t_matrix,
    certified,
    certify_diophantine,
    certify_morse,
    decay_envelope,
    eval_potential,
    hopping_weight,
    kernel_weights,
    log_decay_envelope,
    solve_phase_for_energy,
    spectrum_bounds,
    toeplitz_block,
)
from .greens import (
    CombesThomasReport,
    DecayFit,
    DetPerturbReport,
    EvennessReport,
    GreenMatrix,
    HadamardReport,
    NeumannData,
    SandwichReport,
    SchurData,
    adjugate,
    combes_thomas_check,
    decay_scan,
    det_perturbation_check,
    determinant_evenness_check,
    green_solve,
    hadamard_adjugate_check,
    neumann_inverse,
    sandwich_check,
    schur_complement,
    two_norm,
)
from .msa import (
    BlockCheckReport,
    BlockFamily,
    CaseData,
    EstimateReport,
    GoodSetReport,
    MsaRun,
    ResonanceStructure,
    ScaleSchedule,
    ThetaStep,
    advance_resonances,
    build_schedule,
    canonical_root,
    check_good,
    classify_case,
    construct_blocks,
    deformation_levels,
    detect_resonances,
    run_induction,
    track_theta,
    verify_block,
    verify_block_family,
    verify_good_set,
)
from .dynamics import (
    ArithmeticReport,
    EigenProfile,
    EvolutionData,
    GreenMomentBound,
    MomentCeilingReport,
    MomentValue,
    OffAxisReport,
    TimeAvgMoment,
    amplitudes,
    arithmetic_phase_test,
    evolve_amplitudes,
    green_moment_bound,
    localization_profile,
    moment_ceiling_check,
    moment_p,
    offaxis_green_decay,
    time_avg_moment,
)
from .cli import ReportBundle, cache_key, emit, main, parse_config, run

__version__ = "0.1.0"
