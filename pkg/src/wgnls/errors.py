class NumericalFailure(RuntimeError):
    """A failsafe tripped: step size too large, blow-up, or a conservation budget exceeded."""
