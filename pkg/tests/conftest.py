import numpy as np
import pytest

from kvcompress import HeadKV, KVCache, LayerCache, ObservationWindow


def make_head(keys, values=None):
    keys = np.asarray(keys, dtype=np.float32)
    if values is None:
        values = np.zeros_like(keys)
    return HeadKV(keys, values)


def random_cache(rng, n_layers=2, n_heads=2, seq_len=12, dim=4, window_len=3):
    layers = []
    for l in range(n_layers):
        heads = [
            HeadKV(rng.standard_normal((seq_len, dim)), rng.standard_normal((seq_len, dim)))
            for _ in range(n_heads)
        ]
        layers.append(LayerCache(tuple(heads), layer_index=l))
    return KVCache(tuple(layers), window_len=window_len)


def random_windows(rng, cache, w_eff=4):
    return {
        (l, h): ObservationWindow(rng.standard_normal((w_eff, cache.dim)), l, h)
        for l in range(cache.n_layers)
        for h in range(cache.n_heads)
    }


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
