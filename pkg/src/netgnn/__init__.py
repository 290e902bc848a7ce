"""Network delay/jitter modeling toolkit: packet-level simulation, a
path/link message-passing predictor, and candidate-set routing optimization.
"""

__version__ = "0.1.0"
