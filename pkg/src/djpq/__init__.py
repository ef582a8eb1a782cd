"""Compression workbench: joint structured pruning and learned quantization.

Subpackage map:

- ``autodiff``   minimal reverse-mode tensor engine (conv/dense/bn/pool/CE)
- ``quantizer``  learnable nonlinear-mapping uniform quantizer
- ``gates``      variational-information-bottleneck channel gates
- ``metrics``    MAC/BOP accounting and compression reports
- ``network``    layer graph: construction, forward, shape inference, pruning
- ``trainer``    joint loss, training loops, two-stage baseline, export
- ``config``     run configuration and named presets
- ``datasets``   MNIST-IDX / CIFAR-10-binary ingestion and batch streams
- ``checkpoint`` versioned binary checkpoints
- ``report``     JSON/CSV report emission
- ``figures``    per-layer matplotlib charts rendered next to reports
- ``cli``        train / report / audit / compare entry points
"""

__version__ = "0.1.0"

from .autodiff import Tensor, backward, no_grad, sgd_step  # noqa: F401
