"""Text steganography: messages become token ranks, carried by entropy-gated generation."""

from .codec import (
    BitStream,
    Codebook,
    SecretKey,
    build_codebook,
    decode_ranks,
    encode_ranks,
    from_beta_symbols,
    keystream_xor,
    to_beta_symbols,
)
from .errors import CapacityExhaustedError, DesyncError, StegoError
from .lm import Distribution, NgramModel, Vocabulary, next_distribution, reference_model, train_ngram
from .metrics import payload_capacity, perplexity, ppl_window, sweep
from .ranking import compress_message, decompress_ranks, rank_to_token, token_to_rank
from .remote import RemoteModel, remote_next_distribution
from .stego import StegoConfig, embed, extract, norm_entropy, verify_closed_loop

__version__ = "0.1.0"
