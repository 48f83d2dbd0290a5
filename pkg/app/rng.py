"""确定性随机数流.

所有随机性都来自 (run_seed, 用途, 若干整数键) 派生出的独立流，
不依赖调用顺序，因此并行训练客户端时结果仍可逐位复现。
"""

import hashlib

import numpy as np

from errors import InvalidArgumentError


def derive_seed(run_seed: int, purpose: str, *keys: int) -> int:
    """把 (run_seed, purpose, keys...) 映射为稳定的 64 位种子."""
    if not purpose:
        raise InvalidArgumentError("purpose 不能为空")
    text = ":".join([str(int(run_seed)), purpose, *(str(int(k)) for k in keys)])
    digest = hashlib.sha256(text.encode("ascii")).digest()
    return int.from_bytes(digest[:8], "big", signed=False)


def rng_stream(run_seed: int, purpose: str, *keys: int) -> np.random.Generator:
    """返回一个独立的 numpy 随机数发生器."""
    return np.random.default_rng(derive_seed(run_seed, purpose, *keys))
