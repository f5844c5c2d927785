import logging

import numpy as np

from config import ADAM_BETA1, ADAM_BETA2, ADAM_EPS, GRAD_CLIP_NORM, LEARNING_RATE, WEIGHT_DECAY
from numerics.tensor_ops import Tensor, as_tensor

logger = logging.getLogger(__name__)


def clip_by_global_norm(grad: Tensor, clip_norm: float) -> tuple[Tensor, float]:
    """Rescales ``grad`` so its norm is at most ``clip_norm`` (0 disables). Returns the norm before clipping."""
    norm = float(np.linalg.norm(grad))
    if clip_norm > 0 and norm > clip_norm:
        return grad * (clip_norm / norm), norm
    return grad, norm


class AdamW:
    """Adam with decoupled weight decay over one flat parameter vector."""

    def __init__(
        self,
        size: int,
        lr: float = LEARNING_RATE,
        beta1: float = ADAM_BETA1,
        beta2: float = ADAM_BETA2,
        eps: float = ADAM_EPS,
        weight_decay: float = WEIGHT_DECAY,
        clip_norm: float = GRAD_CLIP_NORM,
    ):
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.weight_decay = weight_decay
        self.clip_norm = clip_norm
        self.m = np.zeros(size)
        self.v = np.zeros(size)
        self.t = 0

    def step(self, theta: Tensor, grad: Tensor) -> Tensor:
        """Returns the updated parameters; ``theta`` itself is not modified."""
        grad, norm = clip_by_global_norm(as_tensor(grad), self.clip_norm)
        self.t += 1
        self.m = self.beta1 * self.m + (1.0 - self.beta1) * grad
        self.v = self.beta2 * self.v + (1.0 - self.beta2) * grad * grad
        m_hat = self.m / (1.0 - self.beta1 ** self.t)
        v_hat = self.v / (1.0 - self.beta2 ** self.t)
        update = m_hat / (np.sqrt(v_hat) + self.eps) + self.weight_decay * theta
        logger.debug(f"AdamW step {self.t}: grad norm {norm:.3e}")
        return theta - self.lr * update
