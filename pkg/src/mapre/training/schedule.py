"""Linear warmup to a constant learning rate."""

FULL_SCALE_LR = 3e-5


def lr_schedule(step: int, warmup_steps: int, base_lr: float) -> float:
    """``base_lr * step / warmup_steps`` during warmup, ``base_lr`` afterwards.

    ``step`` counts completed optimizer updates, so the very first update of
    a run with warmup uses a zero learning rate.
    """
    if step < 0:
        raise ValueError("step must be non-negative")
    if warmup_steps <= 0 or step >= warmup_steps:
        return base_lr
    return base_lr * step / warmup_steps
