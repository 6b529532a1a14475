"""Two-level stacked GRU / gated-input GRU decoder with coverage attention."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .attention import AttentionState, CoverageAttention
from .encoder import FeatureGrid
from .nn import Module, glorot, orthogonal
from .tensor import ContractError, Parameter, Tensor

CELL_KINDS = ("gru", "gi_gru")


class GiGruCell(Module):
    """GRU cell with an optional auxiliary input term.

    The auxiliary state ``v = s * W_yv x`` is added to the update gate, the
    reset gate and (inside the reset product) the candidate state.  With
    ``gated_input=False`` the cell is the plain GRU.  A zero ``in_dim`` or
    ``ctx_dim`` drops the corresponding input matrices entirely.
    """

    def __init__(self, in_dim: int, hidden: int, ctx_dim: int, rng: np.random.Generator,
                 step_size: float = 1.0, gated_input: bool = True, learnable_step: bool = False,
                 aux_rng: np.random.Generator | None = None):
        self.in_dim, self.hidden, self.ctx_dim = in_dim, hidden, ctx_dim
        if in_dim:
            self.W_yz = Parameter(glorot(rng, (hidden, in_dim)))
            self.W_yr = Parameter(glorot(rng, (hidden, in_dim)))
            self.W_yh = Parameter(glorot(rng, (hidden, in_dim)))
        self.U_hz = Parameter(orthogonal(rng, hidden))
        self.U_hr = Parameter(orthogonal(rng, hidden))
        self.U_hh = Parameter(orthogonal(rng, hidden))
        if ctx_dim:
            self.C_cz = Parameter(glorot(rng, (hidden, ctx_dim)))
            self.C_cr = Parameter(glorot(rng, (hidden, ctx_dim)))
            self.C_ch = Parameter(glorot(rng, (hidden, ctx_dim)))
        self.b_z = Parameter(np.zeros(hidden), decay=False)
        self.b_r = Parameter(np.zeros(hidden), decay=False)
        self.b_h = Parameter(np.zeros(hidden), decay=False)
        self.gated_input = gated_input
        if gated_input:
            if step_size < 0:
                raise ContractError("step size must be nonnegative")
            # the auxiliary projection reads x when present, otherwise the context
            self.W_yv = Parameter(glorot(aux_rng or rng, (hidden, in_dim or ctx_dim)))
            self.step_size = Parameter(np.array([step_size]), decay=False) if learnable_step else float(step_size)

    def _check(self, x, h_prev, c):
        if h_prev.shape[-1] != self.hidden:
            raise ContractError(f"hidden state width {h_prev.shape[-1]} != {self.hidden}")
        if x is not None and x.shape[-1] != self.in_dim:
            raise ContractError(f"cell input width {x.shape[-1]} != {self.in_dim}")
        if c is not None and c.shape[-1] != self.ctx_dim:
            raise ContractError(f"context width {c.shape[-1]} != {self.ctx_dim}")

    def fuse(self) -> FusedGates:
        """Stack the (z, r, h) matrices so each input needs one product per step."""
        return FusedGates(
            T.concat([self.W_yz, self.W_yr, self.W_yh]) if self.in_dim else None,
            T.concat([self.U_hz, self.U_hr, self.U_hh]),
            T.concat([self.C_cz, self.C_cr, self.C_ch]) if self.ctx_dim else None,
            T.concat([self.b_z, self.b_r, self.b_h]),
        )

    def input_terms(self, x: Tensor | None, c: Tensor | None, fused: FusedGates) -> Tensor:
        """Gate pre-activations from x, c and the biases, stacked as ... x 3n."""
        acc = fused.b
        if x is not None:
            acc = T.linear(x, fused.w_y, fused.b)
        if c is not None:
            acc = T.add(acc, T.linear(c, fused.c_c))
        return acc

    def auxiliary(self, x: Tensor | None, c: Tensor | None = None) -> Tensor:
        src = x if x is not None else c
        return T.mul(T.linear(src, self.W_yv), self.step_size)

    def step(self, inputs: Tensor, h_prev: Tensor, v: Tensor | None, fused: FusedGates) -> Tensor:
        """One update from precomputed ``input_terms``; ``v`` of None gives the plain GRU."""
        n = self.hidden
        hu = T.linear(h_prev, fused.u)
        zr = T.add(inputs[..., :2 * n], hu[..., :2 * n])
        zr = T.reshape(zr, zr.shape[:-1] + (2, n))
        recur = hu[..., 2 * n:]
        if v is not None:
            zr = T.add(zr, T.reshape(v, v.shape[:-1] + (1, n)))
            recur = T.add(recur, v)
        zr = T.sigmoid(zr)
        z, r = zr[..., 0, :], zr[..., 1, :]
        h_tilde = T.tanh(T.add(inputs[..., 2 * n:], T.mul(r, recur)))
        return T.add(h_prev, T.mul(z, T.sub(h_tilde, h_prev)))

    def gru(self, x: Tensor | None, h_prev: Tensor, c: Tensor | None = None) -> Tensor:
        """Plain GRU update, ignoring any auxiliary weights."""
        self._check(x, h_prev, c)
        fused = self.fuse()
        return self.step(self.input_terms(x, c, fused), h_prev, None, fused)

    def __call__(self, x: Tensor | None, h_prev: Tensor, c: Tensor | None = None,
                 v_in: Tensor | None = None) -> tuple[Tensor, Tensor | None]:
        """Return (h, v_out); ``v_out`` is ``v_in`` when given, else ``s * W_yv x``."""
        self._check(x, h_prev, c)
        fused = self.fuse()
        inputs = self.input_terms(x, c, fused)
        if not self.gated_input:
            return self.step(inputs, h_prev, None, fused), v_in
        v = v_in if v_in is not None else self.auxiliary(x, c)
        return self.step(inputs, h_prev, v, fused), v


@dataclass
class FusedGates:
    w_y: Tensor | None
    u: Tensor
    c_c: Tensor | None
    b: Tensor


def gru_cell(x, h_prev, c, weights: GiGruCell) -> Tensor:
    return weights.gru(x, h_prev, c)


def gi_gru_cell(x, h_prev, v_in, c, weights: GiGruCell) -> tuple[Tensor, Tensor]:
    return weights(x, h_prev, c, v_in=v_in)


class OutputProjection(Module):
    """Token distribution logits: W_o (V_h h + W_c c + W_y y_emb)."""

    def __init__(self, vocab: int, embed: int, hidden: int, feat: int, width: int, rng: np.random.Generator):
        self.embedding = Parameter(rng.normal(0.0, 0.1, size=(vocab, embed)))
        self.W_o = Parameter(glorot(rng, (vocab, width)))
        self.V_h = Parameter(glorot(rng, (width, hidden)))
        self.W_c = Parameter(glorot(rng, (width, feat)))
        self.W_y = Parameter(glorot(rng, (width, embed)))

    def embed(self, ids) -> Tensor:
        return T.embedding(self.embedding, ids)

    def __call__(self, h: Tensor, c: Tensor, y_emb: Tensor) -> Tensor:
        o = T.add(T.add(T.linear(h, self.V_h), T.linear(c, self.W_c)), T.linear(y_emb, self.W_y))
        return T.linear(o, self.W_o)


@dataclass
class DecoderConfig:
    cell: str = "gi_gru"
    hidden: int = 256
    embed: int = 128
    width: int = 128
    step_size: float = 1.0
    learnable_step: bool = False
    # where the second level takes its auxiliary state from: "level1" passes v' through,
    # "recompute" projects the context with the level-2 cell's own W_yv
    level2_aux: str = "level1"
    attn_dim: int = 128
    cov_channels: int = 64
    cov_kernel: int = 5

    def __post_init__(self):
        if self.cell not in CELL_KINDS:
            raise ContractError(f"decoder cell must be one of {CELL_KINDS}, got {self.cell!r}")
        if self.level2_aux not in ("level1", "recompute"):
            raise ContractError(f"unknown level2_aux {self.level2_aux!r}")
        if self.step_size < 0:
            raise ContractError("step_size must be nonnegative")
        if min(self.hidden, self.embed, self.width, self.attn_dim, self.cov_channels, self.cov_kernel) < 1:
            raise ContractError("decoder dimensions must be positive")


@dataclass
class DecoderState:
    h1: Tensor
    h2: Tensor
    v: Tensor | None = None


@dataclass
class StepOutput:
    probabilities: Tensor
    state: DecoderState
    attention: AttentionState
    alpha: Tensor


@dataclass
class SequenceCache:
    projected: tuple[Tensor, Tensor, Tensor]
    fused1: FusedGates
    fused2: FusedGates


@dataclass
class DecodeResult:
    tokens: list[list[int]]
    alphas: list[list[np.ndarray]]
    truncated: list[bool]
    probabilities: list[Tensor] = field(default_factory=list)


class Decoder(Module):
    def __init__(self, config: DecoderConfig, vocab_size: int, feat: int, rng: np.random.Generator,
                 sos_id: int = 1, eos_id: int = 2):
        self.config = config
        self.vocab_size, self.sos_id, self.eos_id = vocab_size, sos_id, eos_id
        gated = config.cell == "gi_gru"
        n = config.hidden
        # drawn for every cell kind so shared weights match between gru and gi_gru at equal seeds
        aux_rng = np.random.default_rng(rng.integers(2**63))
        self.level1 = GiGruCell(config.embed, n, 0, rng, config.step_size, gated, config.learnable_step, aux_rng)
        self.level2 = GiGruCell(0, n, feat, rng, config.step_size, gated, config.learnable_step, aux_rng)
        if gated and config.level2_aux == "level1":
            # level 2 consumes v' from level 1, so its own projection and step would be dead weight
            del self.level2.W_yv
            self.level2.step_size = 0.0
        self.attention = CoverageAttention(n, feat, config.attn_dim, config.cov_channels, config.cov_kernel, rng)
        self.output = OutputProjection(vocab_size, config.embed, n, feat, config.width, rng)
        self.W_init = Parameter(glorot(rng, (n, feat)))
        self.b_init = Parameter(np.zeros(n), decay=False)

    # ------------------------------------------------------------------ single step

    def initial_state(self, grid: FeatureGrid) -> DecoderState:
        mean_feat = T.reshape(T.global_avg_pool(grid.features), (grid.features.shape[0], grid.channels))
        h0 = T.tanh(T.linear(mean_feat, self.W_init, self.b_init))
        return DecoderState(h0, h0, None)

    def prepare(self, grid: FeatureGrid) -> SequenceCache:
        return SequenceCache(self.attention.project_grid(grid), self.level1.fuse(), self.level2.fuse())

    def embed_terms(self, ids: np.ndarray, cache: SequenceCache):
        """Everything that depends only on the previous token: (y_emb, level-1 gate inputs, v, W_y y_emb)."""
        if ids.size and (ids.min() < 0 or ids.max() >= self.vocab_size):
            raise ContractError(f"token id outside vocabulary of size {self.vocab_size}")
        y_emb = self.output.embed(ids)
        inputs1 = self.level1.input_terms(y_emb, None, cache.fused1)
        v1 = self.level1.auxiliary(y_emb) if self.level1.gated_input else None
        return y_emb, inputs1, v1, T.linear(y_emb, self.output.W_y)

    def _advance(self, terms, state: DecoderState, grid: FeatureGrid, attn: AttentionState,
                 cache: SequenceCache, return_logits: bool = False) -> StepOutput:
        _, inputs1, v1, y_out = terms
        h1 = self.level1.step(inputs1, state.h2, v1, cache.fused1)
        context, alpha, attn = self.attention.attend(h1, grid, attn, cache.projected)
        inputs2 = self.level2.input_terms(None, context, cache.fused2)
        if not self.level2.gated_input:
            v2 = None
        elif self.config.level2_aux == "level1":
            v2 = v1
        else:
            v2 = self.level2.auxiliary(None, context)
        h2 = self.level2.step(inputs2, h1, v2, cache.fused2)
        o = T.add(T.add(T.linear(h2, self.output.V_h), T.linear(context, self.output.W_c)), y_out)
        logits = T.linear(o, self.output.W_o)
        out = logits if return_logits else T.softmax(logits, axis=-1)
        return StepOutput(out, DecoderState(h1, h2, v1), attn, alpha)

    def decode_step(self, y_prev, state: DecoderState, grid: FeatureGrid, attn: AttentionState,
                    cache: SequenceCache | None = None, return_logits: bool = False) -> StepOutput:
        """Advance both levels by one token and return the next-token distribution."""
        ids = np.atleast_1d(np.asarray(y_prev, dtype=np.int64))
        cache = cache or self.prepare(grid)
        return self._advance(self.embed_terms(ids, cache), state, grid, attn, cache, return_logits)

    # ------------------------------------------------------------------ sequences

    def teacher_forced(self, grid: FeatureGrid, labels: np.ndarray) -> list[Tensor]:
        """Per-step N x K probabilities when the ground truth is fed back.

        ``labels`` is N x S of target ids (ending in EOS, padded with anything
        valid); step t is conditioned on SOS followed by ``labels[:, :t]``.
        """
        labels = np.atleast_2d(np.asarray(labels, dtype=np.int64))
        n, steps = labels.shape
        prev = np.concatenate([np.full((n, 1), self.sos_id), labels[:, :-1]], axis=1)
        state, attn = self.initial_state(grid), AttentionState.initial(grid)
        cache = self.prepare(grid)
        # previous-token terms for every step in one batch of products
        all_terms = self.embed_terms(prev, cache)
        probs = []
        for t in range(steps):
            terms = tuple(None if a is None else a[:, t] for a in all_terms)
            out = self._advance(terms, state, grid, attn, cache)
            state, attn = out.state, out.attention
            probs.append(out.probabilities)
        return probs

    def greedy(self, grid: FeatureGrid, max_len: int) -> DecodeResult:
        if max_len < 1:
            raise ContractError("max_len must be >= 1")
        n = grid.features.shape[0]
        with T.no_grad():
            state, attn = self.initial_state(grid), AttentionState.initial(grid)
            cache = self.prepare(grid)
            prev = np.full(n, self.sos_id)
            tokens: list[list[int]] = [[] for _ in range(n)]
            alphas: list[list[np.ndarray]] = [[] for _ in range(n)]
            done = np.zeros(n, dtype=bool)
            for _ in range(max_len):
                out = self.decode_step(prev, state, grid, attn, cache)
                state, attn = out.state, out.attention
                nxt = out.probabilities.data.argmax(axis=-1)
                for i in np.flatnonzero(~done):
                    alphas[i].append(out.alpha.data[i].reshape(grid.height, grid.width).copy())
                    if nxt[i] == self.eos_id:
                        done[i] = True
                    else:
                        tokens[i].append(int(nxt[i]))
                prev = nxt
                if done.all():
                    break
        return DecodeResult(tokens, alphas, [not d for d in done])

    def beam(self, grid: FeatureGrid, max_len: int, width: int = 5) -> DecodeResult:
        """Beam search, one image at a time; hypotheses scored by summed log-probability."""
        if max_len < 1:
            raise ContractError("max_len must be >= 1")
        results = DecodeResult([], [], [])
        for i in range(grid.features.shape[0]):
            sub = FeatureGrid(T.Tensor(grid.features.data[i:i + 1]))
            toks, al, trunc = self._beam_one(sub, max_len, width)
            results.tokens.append(toks)
            results.alphas.append(al)
            results.truncated.append(trunc)
        return results

    def _beam_one(self, grid: FeatureGrid, max_len: int, width: int):
        with T.no_grad():
            cache = self.prepare(grid)
            beams = [(0.0, [], [], self.initial_state(grid), AttentionState.initial(grid))]
            finished = []
            for _ in range(max_len):
                cands = []
                for score, toks, als, state, attn in beams:
                    prev = toks[-1] if toks else self.sos_id
                    out = self.decode_step([prev], state, grid, attn, cache)
                    logp = np.log(out.probabilities.data[0] + 1e-12)
                    alpha = out.alpha.data[0].reshape(grid.height, grid.width)
                    for k in np.argsort(-logp, kind="stable")[:width]:
                        cands.append((score + logp[k], toks + [int(k)], als + [alpha], out.state, out.attention))
                cands.sort(key=lambda c: -c[0])
                beams = []
                for cand in cands[:width]:
                    if cand[1][-1] == self.eos_id:
                        finished.append(cand)
                    else:
                        beams.append(cand)
                if not beams or len(finished) >= width:
                    break
            if finished:
                best = max(finished, key=lambda c: c[0])
                return best[1][:-1], best[2], False
            best = max(beams, key=lambda c: c[0])
            return best[1], best[2], True

    def decode_sequence(self, grid: FeatureGrid, mode: str = "greedy", max_len: int = 40,
                        labels=None, beam_width: int = 5) -> DecodeResult:
        if mode == "greedy":
            return self.greedy(grid, max_len)
        if mode == "beam":
            return self.beam(grid, max_len, beam_width)
        if mode == "teacher_forced":
            if labels is None:
                raise ContractError("teacher_forced decoding needs labels")
            probs = self.teacher_forced(grid, labels)
            lab = np.atleast_2d(labels)
            return DecodeResult([list(map(int, r)) for r in lab], [], [False] * lab.shape[0], probs)
        raise ContractError(f"unknown decode mode {mode!r}")
