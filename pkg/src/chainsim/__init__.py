"""Simulate chains of small trainable models: explanation-fidelity decay,
compounding-error bound verification, and upstream-fairness footprints."""

from .explain import (
    Explanation,
    LimeConfig,
    cosine_similarity,
    end_to_end_explanation,
    explanation_mse,
    fit_local_linear,
    recourse_distance,
    recourse_error,
    supply_chain_explanation,
)
from .fairness import (
    FairnessKind,
    ModelOutcome,
    evaluate_outcome,
    fairness_regularizer,
    fine_tune_head,
    frontier_area,
    generate_group_data,
    pareto_frontier,
    reversibility_report,
    train_base_fair,
)
from .graph import (
    CycleError,
    NodeKind,
    NodeRecord,
    SupplyChainGraph,
    UnknownNodeError,
)
from .models import (
    BasisModel,
    Dataset,
    MlpModel,
    TreeSpec,
    build_tree_chain,
    eval_basis,
    forward_composed,
    generate_features,
    generate_labels,
    train_node,
    train_tree_models,
)
from .theory import (
    TheoremOneInstance,
    TheoremTwoInstance,
    bound_rhs,
    conditional_derivative,
    eigen_ratio_growth,
    simulate_error_recursion,
    theorem2_check,
    tightness_check,
)

__version__ = "0.1.0"

__all__ = [name for name in dir() if not name.startswith("_")]
