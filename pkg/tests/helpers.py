import functools

from conflict_rag.synthetic import synthetic_corpus


@functools.lru_cache(maxsize=None)
def cached_corpus():
    return tuple(synthetic_corpus())
