"""Prefix tuning through the mixture-of-experts lens: exact per-head
equivalences, a non-linear residual gate for prompt scores, a least-squares
estimation testbed with Voronoi losses, and a desk-scale continual-learning
harness, all on a small float64 autodiff engine."""

__version__ = "0.1.0"
