"""budsim: a deterministic desk-scale simulator of a dual-earbud sensing platform.

Two simulated earbud nodes and a host exchange bit-exact protocol frames over
virtual links while synthetic sensors feed on-device vitals estimation, audio
DSP pipelines, a quantized CNN interpreter and a dual-device load balancer.
"""

__version__ = "0.1.0"
