from .hashing import parameter_hash
from .logging import log_to_file, setup_logging
from .seeding import derive_seed, rng_state, stream, torch_generator

__all__ = [
    "derive_seed",
    "log_to_file",
    "parameter_hash",
    "rng_state",
    "setup_logging",
    "stream",
    "torch_generator",
]
