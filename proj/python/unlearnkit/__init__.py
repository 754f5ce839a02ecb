"""Instance-wise machine unlearning toolkit (C++ core)."""

from ._core import (
    AdversarialSet,
    ArgumentError,
    ClassifierState,
    ContractError,
    Dataset,
    DegenerateInputError,
    Error,
    ForgetManifest,
    ImportanceMap,
    IoError,
    ManifestError,
    NumericError,
    accuracy,
    cka_linear,
    cli,
    confusion_prepost,
    evaluate,
    forward,
    generate_adversarial_set,
    init_state,
    layerwise_cka,
    make_synthetic,
    make_synthetic_images,
    mas_importance,
    pgd_l2_targeted,
    predict,
    pretrain,
    run_unlearning,
    select_forget_set,
    split_remaining,
)

__version__ = "0.1.0"
