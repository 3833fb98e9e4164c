"""Large-vocabulary video tracking toolkit.

Deterministic, framework-free building blocks for training and
evaluating large-vocabulary video trackers: tracking-pair synthesis
from still images, teacher-student distillation with soft pseudo
labels, semantic-consistency regularization, bi-softmax association,
Track-AP / oracle evaluation, and a desk-scale forgetting demo.
"""

__version__ = "0.1.0"
