"""Training criteria."""

from dne.nncore.tensor import astensor

BCE_CLAMP = 1e-7


def mse_loss(pred, target):
    """Mean of elementwise squared differences."""
    pred = astensor(pred)
    target = astensor(target)
    if pred.shape != target.shape:
        raise ValueError(f"shape mismatch: {pred.shape} vs {target.shape}")
    diff = pred - target
    return (diff * diff).mean()


def bce_loss(prob, label):
    """Mean binary cross-entropy; probabilities clamped to [1e-7, 1-1e-7]."""
    prob = astensor(prob)
    label = astensor(label)
    if prob.shape != label.shape:
        raise ValueError(f"shape mismatch: {prob.shape} vs {label.shape}")
    p = prob.clip(BCE_CLAMP, 1.0 - BCE_CLAMP)
    return -(label * p.log() + (1.0 - label) * (1.0 - p).log()).mean()
