"""64-bit mixing helpers shared by sharding, splitting and partitioning."""
import numpy as np

MASK64 = (1 << 64) - 1

# Keys at or above this value are reserved for per-model global biases.
RESERVED_KEY_BASE = (1 << 64) - (1 << 16)


def splitmix64(x: int) -> int:
    x = (x + 0x9E3779B97F4A7C15) & MASK64
    x = ((x ^ (x >> 30)) * 0xBF58476D1CE4E5B9) & MASK64
    x = ((x ^ (x >> 27)) * 0x94D049BB133111EB) & MASK64
    return x ^ (x >> 31)


def splitmix64_array(x: np.ndarray) -> np.ndarray:
    """Vectorised splitmix64 over a uint64 array (wrapping arithmetic)."""
    x = np.asarray(x, dtype=np.uint64)
    with np.errstate(over="ignore"):
        x = x + np.uint64(0x9E3779B97F4A7C15)
        x = (x ^ (x >> np.uint64(30))) * np.uint64(0xBF58476D1CE4E5B9)
        x = (x ^ (x >> np.uint64(27))) * np.uint64(0x94D049BB133111EB)
    return x ^ (x >> np.uint64(31))


def shard_of(key: int, num_shards: int) -> int:
    return splitmix64(key) % num_shards


def shard_array(keys: np.ndarray, num_shards: int) -> np.ndarray:
    return (splitmix64_array(keys) % np.uint64(num_shards)).astype(np.int64)


def global_bias_key(model_index: int) -> int:
    """Reserved parameter-server key holding the global bias of one packed model."""
    return MASK64 - model_index


def is_reserved(key: int) -> bool:
    return key >= RESERVED_KEY_BASE
