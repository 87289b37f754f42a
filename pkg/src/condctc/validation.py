"""Input checks shared by the estimators."""
import numpy as np


def check_sequence(x, dim=None, name="features"):
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2 or x.shape[0] < 1 or x.shape[1] < 1:
        raise ValueError(f"{name} must be a non-empty T x D matrix, got shape {x.shape}")
    if dim is not None and x.shape[1] != dim:
        raise ValueError(f"{name} has dimension {x.shape[1]}, expected {dim}")
    if not np.all(np.isfinite(x)):
        raise ValueError(f"{name} contains non-finite values")
    return x


def check_sequences(X, dim=None):
    """Validate a list of ``T_i x D`` matrices sharing one feature dimension."""
    if isinstance(X, np.ndarray) and X.ndim == 2:
        X = [X]
    X = [check_sequence(x, dim, name=f"sequence {i}") for i, x in enumerate(X)]
    if not X:
        raise ValueError("need at least one sequence")
    dims = {x.shape[1] for x in X}
    if len(dims) != 1:
        raise ValueError(f"sequences disagree on feature dimension: {sorted(dims)}")
    return X


def check_labels(y, vocab, allow_null=False):
    y = tuple(int(i) for i in y)
    for i in y:
        if not 0 <= i < len(vocab):
            raise ValueError(f"label {i} outside vocabulary of size {len(vocab)}")
        if i == vocab.blank_id:
            raise ValueError("label sequence contains blank")
        if i == vocab.null_id and not allow_null:
            raise ValueError("label sequence contains <NULL>")
    return y
