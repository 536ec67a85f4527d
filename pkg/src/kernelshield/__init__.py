"""Polynomial-kernel transform defense sandbox: autodiff engine, tappable CNN,
attack suite, kernel-transform defense and evaluation harness."""

__version__ = "0.1.0"
