"""The full recognizer: DenseBAM encoder feeding the attention decoder."""

from __future__ import annotations

import numpy as np

from . import tensor as T
from .decoder import DecodeResult, Decoder, DecoderConfig
from .encoder import DenseBamEncoder, EncoderConfig, FeatureGrid
from .nn import Module, load_checkpoint, save_checkpoint
from .tensor import Tensor


class DenseBamGI(Module):
    def __init__(self, encoder: EncoderConfig, decoder: DecoderConfig, vocab_size: int, seed: int = 0,
                 sos_id: int = 1, eos_id: int = 2):
        rng = np.random.default_rng([seed, 0xC0DE])
        self.encoder = DenseBamEncoder(encoder, rng)
        self.decoder = Decoder(decoder, vocab_size, encoder.out_channels, rng, sos_id, eos_id)
        self.name_parameters()

    def encode(self, images) -> FeatureGrid:
        return self.encoder(images if isinstance(images, Tensor) else Tensor(images))

    def teacher_forced(self, images, targets: np.ndarray) -> list[Tensor]:
        return self.decoder.teacher_forced(self.encode(images), targets)

    def recognize(self, images, max_len: int = 40, mode: str = "greedy", beam_width: int = 5) -> DecodeResult:
        was_training = self.training
        self.eval()
        try:
            with T.no_grad():
                grid = self.encode(images)
                return self.decoder.decode_sequence(grid, mode, max_len, beam_width=beam_width)
        finally:
            self.train(was_training)

    def weight_parameters(self):
        """Parameters that receive the L2 penalty."""
        return [p for p in self.parameters() if p.decay]

    def save(self, path) -> None:
        save_checkpoint(path, self.state_dict())

    def load(self, path, strict: bool = True) -> list[str]:
        return self.load_state_dict(load_checkpoint(path), strict=strict)

    def warm_start_from(self, path) -> list[str]:
        """Load a plain-GRU checkpoint into a gated-input model; auxiliary projections start at zero."""
        missing = self.load_state_dict(load_checkpoint(path), strict=False)
        for name, p in self.named_parameters():
            if name in missing and name.endswith("W_yv"):
                p.data[...] = 0.0
        return [m for m in missing if not m.endswith("W_yv")]
