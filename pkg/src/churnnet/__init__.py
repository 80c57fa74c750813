"""Churn prediction from company-independent user event vectors."""

__version__ = "0.1.0"
