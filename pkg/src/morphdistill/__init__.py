"""Two-stage toolkit: multi-teacher relational distillation of embedding
sources into one student encoder, then gated attention-MIL over patch-
embedding bags for five-year survival prediction, with a survival-analysis
evaluation engine (AUC, C-index, Cox, Kaplan-Meier, log-rank).
"""

from .contrastive import (
    LabeledBatch,
    LossBreakdown,
    STRATEGIES,
    SupConResult,
    supcon_loss,
    total_stage1_loss,
    unsup_contrastive_loss,
)
from .mil import (
    AttentionMILClassifier,
    AttentionParams,
    Bag,
    GatedAttentionPooler,
    SlidePrediction,
    Stage2Config,
    attention_weights,
    bag_pool,
    predict_slide,
    stage2_loss,
    train_stage2,
)
from .relational import (
    DistillationLoss,
    EmbeddingMatrix,
    RelationalDistribution,
    SimilarityMatrix,
    cosine_similarity_matrix,
    distillation_loss,
    l2_normalize,
    oracle_distillation_loss,
    relational_distribution,
)
from .student import (
    DistillationEncoder,
    EncoderConfig,
    Stage1Config,
    build_encoder,
    embed,
    eval_knn,
    eval_linear_probe,
    train_stage1,
)
from .survival import (
    CoxResult,
    KMCurve,
    SurvivalRecord,
    concordance_index,
    confusion_metrics,
    cox_fit,
    evaluate_stratified,
    km_estimate,
    logrank_test,
    roc_auc,
    stratify_risk,
)
from .teachers import (
    TeacherEnsemble,
    TeacherSpec,
    batch_teacher_views,
    load_ensemble,
    load_teacher_embeddings,
    read_embedding_file,
    synth_teacher_ensemble,
    write_embedding_file,
)
from .cohort import (
    FoldAssignment,
    PatientRecord,
    SynthCohortConfig,
    stratified_kfold,
    synth_cohort,
)

__version__ = "0.1.0"
