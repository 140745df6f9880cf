"""Meta-pruning toolkit: pruned-model zoos over a synthetic task universe and
vote-based sub-network initialization for new tasks."""

from .tensor import Tensor, backward, forward_primitive, no_grad
from .optim import LrSchedule, OptimizerState, cosine_lr, optimizer_step

__version__ = "0.1.0"
