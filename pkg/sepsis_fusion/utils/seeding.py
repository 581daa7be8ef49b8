from hashlib import sha256
import json

import numpy as np


def derive_seed(*parts):
    """Stable 32-bit seed from any mix of ints and strings."""
    digest = sha256("|".join(str(part) for part in parts).encode("utf-8")).digest()
    return int.from_bytes(digest[:4], "little")


def substream(seed, index):
    # counter-based stream per (seed, index); independent of execution order
    return np.random.Generator(np.random.Philox(np.random.SeedSequence([int(seed), int(index)])))


def canonical_json(payload):
    return json.dumps(payload, sort_keys=True, separators=(",", ":"), allow_nan=False)


def content_hash(payload):
    return sha256(canonical_json(payload).encode("utf-8")).hexdigest()
