"""
conetest: likelihood ratio tests of variance components in mixed-effects models
"""

__version__ = "0.1.0"
