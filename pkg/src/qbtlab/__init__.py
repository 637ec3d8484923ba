"""Desk-scale unsupervised MT lab: encoder NAR back-translation (QBT) on synthetic ciphers."""

__version__ = "0.1.0"
