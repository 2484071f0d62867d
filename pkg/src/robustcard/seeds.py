import hashlib


def derive_seed(seed: int, component: str) -> int:
    """Stable per-component seed: ``seed`` xor a hash of the component name."""
    digest = hashlib.sha256(component.encode()).digest()
    return (int(seed) ^ int.from_bytes(digest[:8], "little")) % (2**63)
