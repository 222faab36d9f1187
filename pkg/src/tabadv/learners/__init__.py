from tabadv.learners.nn import (
    AeNet,
    Adam,
    Dense,
    Scaler,
    SurrogateModel,
    TrainConfig,
    TrainingDiverged,
    adv_objective,
    build_surrogate,
    fit_autoencoder,
    forward_embed,
    grad_input,
    reconstruction_error,
    train_surrogate,
)
from tabadv.learners.trees import (
    Tree,
    TreeEnsemble,
    build_tree,
    fit_gradient_boosting,
    fit_random_forest,
    fit_regression_gbm,
    predict,
    predict_proba,
    staged_logloss,
)

__all__ = [
    "AeNet", "Adam", "Dense", "Scaler", "SurrogateModel", "TrainConfig", "TrainingDiverged",
    "adv_objective", "build_surrogate", "fit_autoencoder", "forward_embed", "grad_input",
    "reconstruction_error", "train_surrogate", "Tree", "TreeEnsemble", "build_tree",
    "fit_gradient_boosting", "fit_random_forest", "fit_regression_gbm", "predict",
    "predict_proba", "staged_logloss",
]
