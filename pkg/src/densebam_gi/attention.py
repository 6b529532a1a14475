"""Coverage-based additive attention over the encoder feature grid."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .encoder import FeatureGrid
from .nn import Module, glorot
from .tensor import ContractError, Parameter, Tensor


@dataclass
class AttentionState:
    """Running attention sum and the most recent attention output.

    ``beta`` is N x 1 x H x W and equals the sum of every alpha emitted so far.
    """

    beta: Tensor
    last_alpha: Tensor | None = None
    last_context: Tensor | None = None

    @classmethod
    def initial(cls, grid: FeatureGrid) -> AttentionState:
        n = grid.features.shape[0]
        return cls(T.zeros((n, 1, grid.height, grid.width)))


class CoverageAttention(Module):
    def __init__(self, hidden: int, feat: int, attn_dim: int, cov_channels: int, kernel: int,
                 rng: np.random.Generator):
        if kernel % 2 == 0:
            raise ContractError("coverage kernel size must be odd so the map keeps its size")
        self.nu = Parameter(rng.uniform(-0.1, 0.1, size=attn_dim))
        self.w_h = Parameter(glorot(rng, (attn_dim, hidden)))
        self.w_a = Parameter(glorot(rng, (attn_dim, feat)))
        self.w_f = Parameter(glorot(rng, (attn_dim, cov_channels)))
        self.b = Parameter(np.zeros(attn_dim), decay=False)
        self.cov_kernel = Parameter(rng.normal(0.0, 0.1, size=(cov_channels, 1, kernel, kernel)))

    def coverage_filter(self) -> Tensor:
        """W_f composed with the coverage kernel: a d' x 1 x k x k filter over the attention sum.

        Convolving beta with it equals applying W_f to every position of Q * beta.
        """
        q, _, k, _ = self.cov_kernel.shape
        flat = T.matmul(self.w_f, T.reshape(self.cov_kernel, (q, k * k)))
        return T.reshape(flat, (self.w_f.shape[0], 1, k, k))

    def project_grid(self, grid: FeatureGrid) -> tuple[Tensor, Tensor, Tensor]:
        """Step-invariant terms: (N x L x C features, N x L x d' keys, composed coverage filter)."""
        seq = grid.as_sequence()
        return seq, T.linear(seq, self.w_a), self.coverage_filter()

    def attend(self, h_prime: Tensor, grid: FeatureGrid, state: AttentionState,
               projected: tuple[Tensor, Tensor, Tensor] | None = None):
        """Return (context, alpha, new_state).

        ``h_prime`` is N x n (or a single n-vector, in which case outputs drop the batch axis).
        """
        single = h_prime.ndim == 1
        if single:
            h_prime = T.reshape(h_prime, (1, -1))
        beta = state.beta
        n = h_prime.shape[0]
        if beta.shape != (n, 1, grid.height, grid.width):
            raise ContractError(
                f"coverage map {beta.shape} does not match grid {(n, 1, grid.height, grid.width)}")
        seq, keys, cov_filter = projected if projected is not None else self.project_grid(grid)
        k = self.cov_kernel.shape[-1]
        cov = T.conv2d(beta, cov_filter, padding=k // 2)
        cov_seq = T.reshape(T.transpose(cov, (0, 2, 3, 1)), (n, grid.positions, cov.shape[1]))
        query = T.reshape(T.linear(h_prime, self.w_h, self.b), (n, 1, -1))
        energy_in = T.tanh(T.add(T.add(keys, cov_seq), query))
        energies = T.matmul(energy_in, self.nu)
        alpha = T.softmax(energies, axis=-1)
        context = T.reshape(T.matmul(T.reshape(alpha, (n, 1, -1)), seq), (n, grid.channels))
        new_beta = T.add(beta, T.reshape(alpha, beta.shape))
        if single:
            context, alpha_out = T.reshape(context, (-1,)), T.reshape(alpha, (-1,))
        else:
            alpha_out = alpha
        return context, alpha_out, AttentionState(new_beta, alpha_out, context)
