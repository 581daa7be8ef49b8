from sklearn.utils import murmurhash3_32


def token_bucket(token, dim):
    return murmurhash3_32(token, seed=0, positive=True) % dim


def hashed_ngrams(tokens, dim, orders=(1, 2)):
    """Bucket ids for every n-gram of the given orders, in document order."""
    ids = []
    for order in orders:
        for start in range(len(tokens) - order + 1):
            ids.append(token_bucket(" ".join(tokens[start:start + order]), dim))
    return ids


def stable_index(key, seed, modulo):
    return murmurhash3_32(f"{seed}:{key}", seed=0, positive=True) % modulo
