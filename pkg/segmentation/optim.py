"""
Optimizers over named tensors. State is keyed by tensor name so the same
optimizer can step theta alone (phase 1) and theta + phi (phase 2).
"""
import numpy as np

from utils.exceptions import ConfigurationError


class Optimizer:

    def __init__(self, lr):
        self.lr = float(lr)
        self.state = {}

    def step(self, tensors):
        """Update every tensor in the name -> Tensor mapping, then zero its grad."""
        for name, tensor in tensors.items():
            if tensor.grad is None:
                raise ConfigurationError(f"tensor {name!r} has no gradient to step on")
        for name, tensor in tensors.items():
            self._update(name, tensor)
            tensor.zero_grad()

    def _update(self, name, tensor):
        raise NotImplementedError


class SGDMomentum(Optimizer):

    def __init__(self, lr, momentum=0.9):
        super().__init__(lr)
        self.momentum = float(momentum)

    def _update(self, name, tensor):
        velocity = self.state.get(name)
        velocity = tensor.grad.copy() if velocity is None else self.momentum * velocity + tensor.grad
        self.state[name] = velocity
        tensor.data -= (self.lr * velocity).astype(tensor.dtype)


class Adam(Optimizer):

    def __init__(self, lr, beta1=0.9, beta2=0.999, eps=1e-8):
        super().__init__(lr)
        self.beta1 = float(beta1)
        self.beta2 = float(beta2)
        self.eps = float(eps)

    def _update(self, name, tensor):
        m, v, t = self.state.get(name, (np.zeros_like(tensor.data), np.zeros_like(tensor.data), 0))
        grad = tensor.grad
        t += 1
        m = self.beta1 * m + (1.0 - self.beta1) * grad
        v = self.beta2 * v + (1.0 - self.beta2) * grad * grad
        self.state[name] = (m, v, t)
        m_hat = m / (1.0 - self.beta1 ** t)
        v_hat = v / (1.0 - self.beta2 ** t)
        tensor.data -= (self.lr * m_hat / (np.sqrt(v_hat) + self.eps)).astype(tensor.dtype)


def make_optimizer(cfg):
    if cfg.optimizer == "sgd":
        return SGDMomentum(cfg.lr, cfg.momentum)
    return Adam(cfg.lr, cfg.beta1, cfg.beta2, cfg.adam_eps)


def clip_grad_norm(tensors, max_norm):
    """Rescale grads in place so their global L2 norm is at most max_norm (0 = off)."""
    grads = [t.grad for t in tensors.values() if t.grad is not None]
    total = float(np.sqrt(sum(float((g.astype(np.float64) ** 2).sum()) for g in grads)))
    if max_norm and total > max_norm:
        factor = max_norm / (total + 1e-6)
        for grad in grads:
            grad *= factor
    return total
