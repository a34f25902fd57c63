"""Statistical inference with the Morse-Smale complex."""

__version__ = "0.1.0"

from .kernel import (  # noqa: E402
    FarFromDataError,
    KdeField,
    KernelRegressionField,
    KernelSpec,
    Sample,
    kernel_value,
    silverman_bandwidth,
    standardization_scale,
)
from .flow import FlowConfig, FlowStatus, ascend, descend, find_critical_set  # noqa: E402
from .decomposition import (  # noqa: E402
    DIVERGED,
    boundary_nodes,
    build_mesh,
    cell_stats,
    decompose,
    hausdorff,
)
