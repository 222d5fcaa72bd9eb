from ._pemvc import (
    cmaf_match,
    confusion,
    evaluate,
    generate,
    gradcheck,
    gradcheck_names,
    make_views,
    mvcs_forward,
    roc_auc,
    softmax_rows,
    train,
    unfold_view,
)

__all__ = [
    "cmaf_match",
    "confusion",
    "evaluate",
    "generate",
    "gradcheck",
    "gradcheck_names",
    "make_views",
    "mvcs_forward",
    "roc_auc",
    "softmax_rows",
    "train",
    "unfold_view",
]
