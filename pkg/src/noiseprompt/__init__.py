"""Desk-scale noise-prompt learning laboratory.

Everything runs against an analytic Gaussian-mixture testbed with exact
noise predictions, so sampling identities, the closed-form re-denoise
delta, pair collection, network training and evaluation can all be
executed and verified end to end without any pretrained model.
"""

__version__ = "0.1.0"
