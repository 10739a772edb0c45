"""Permutation tests of feature association and nonlinearity for neural networks.

The tests summarise the partial derivatives of a trained feed-forward network
with respect to one input and calibrate that summary against networks retrained
on permuted data.
"""

__version__ = "0.1.0"

from .errors import (
    DivergenceError,
    GradpermError,
    InvalidConfigError,
    InvalidInputError,
    RankError,
    ShapeError,
    UnsupportedArchitectureError,
    UnsupportedOutcomeError,
)
from .nn_core import (
    Dataset,
    Network,
    NetworkConfig,
    fit_network,
    forward,
    init_network,
    input_gradient_backprop,
    input_gradient_closed_form,
    input_gradients,
    train,
)
from .permtests import (
    CombinedResult,
    CorrelatedPredictorWarning,
    TestConfig,
    TestResult,
    assoc_statistic,
    association_test,
    combined_protocol,
    nonlin_statistic,
    nonlinearity_test,
    p_value,
    permute_column,
    permute_residual_response,
)
from .simgen import (
    SimSetting,
    StudyReport,
    gen_assoc,
    gen_correlated,
    gen_nonlin5,
    lm_t_test,
    run_study,
)
from .splines import AdditiveFit, SmoothFit, fit_additive, fit_smooth, make_basis, predict_additive
