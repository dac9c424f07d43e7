"""Total-variability speaker embedding toolkit."""

from ._linalg import NumericError
from .gmm import (
    BaumWelchStats,
    GmmDiag,
    GmmFull,
    SparseAlignment,
    accumulate_bw_stats,
    align_frames,
    select_top_k,
    train_gmm_diag,
    train_gmm_full,
)
from .tvm import (
    AUGMENTED,
    STANDARD,
    EmAccumulators,
    LatentPosterior,
    MinDivTransforms,
    TvModel,
    apply_min_div,
    aux_objective,
    compute_min_div,
    em_accumulate,
    extract_ivector,
    householder_to_e1,
    init_model,
    latent_posterior,
    model_covariance,
    update_mean_standard,
    update_sigma,
    update_T,
    update_ubm_means_augmented,
)
from .io_formats import (
    FormatError,
    TrialList,
    load_model,
    read_alignment,
    read_matrix,
    read_trials,
    save_model,
    write_alignment,
    write_matrix,
    write_trials,
)
from .backend import (
    GaussianizerChain,
    LdaModel,
    PldaModel,
    compute_eer,
    det_points,
    fit_chain,
    fit_lda,
    fit_plda,
    length_normalize,
    score_cosine,
    score_plda,
    score_plda_trials,
)
from .pipeline import (
    DirectoryFeatureStore,
    EvalProtocol,
    InMemoryFeatureStore,
    PipelineError,
    RunMetrics,
    TrainConfig,
    align_corpus,
    ensemble_run,
    evaluate_model,
    extract_corpus,
    train_extractor,
)
from .synth import SynthCorpus, SynthSpec, make_trials, sample_corpus, subspace_angles

__version__ = "0.1.0"
