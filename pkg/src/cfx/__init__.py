"""Counterfactual statement detection and antecedent/consequence extraction on a numpy autodiff core."""

__version__ = "0.1.0"
