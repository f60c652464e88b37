"""Python surface for the segkd C++ core.

Everything is re-exported from the compiled module `segkd_core`; this
package exists so `import segkd` works both from an installed wheel and
from a build tree put on PYTHONPATH next to the extension.
"""

from segkd_core import (  # noqa: F401
    CapacityReport,
    CheckpointError,
    Network,
    NetworkPlan,
    NiftiError,
    capacity,
    conv3d,
    evaluate,
    generate_dataset,
    kd_loss,
    load_checkpoint,
    load_checkpoint_bytes,
    predict,
    read_labelmap,
    read_volume,
    seg_loss,
    softmax,
    total_loss,
    write_labelmap,
    write_volume,
)

__all__ = [
    "CapacityReport",
    "CheckpointError",
    "Network",
    "NetworkPlan",
    "NiftiError",
    "capacity",
    "conv3d",
    "evaluate",
    "generate_dataset",
    "kd_loss",
    "load_checkpoint",
    "load_checkpoint_bytes",
    "predict",
    "read_labelmap",
    "read_volume",
    "seg_loss",
    "softmax",
    "total_loss",
    "write_labelmap",
    "write_volume",
]
