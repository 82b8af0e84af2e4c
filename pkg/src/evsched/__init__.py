"""EV charging scheduling toolkit: simulator, receding-horizon baseline,
value-based learned policy, and an OOD-aware meta-policy that projects the
learned action onto a TD-error-driven trust region around the baseline."""

__version__ = "0.1.0"
