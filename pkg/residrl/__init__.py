"""
Residual sim-to-real learning for planar peg-in-hole insertion.

This package contains:
- errors.py / seeding.py: exit-coded exceptions, Philox random streams
- geom.py: planar poses, twists, clamped action deltas
- domain.py: DomainConfig records and the nominal/real/transfer presets
- sim.py: impedance-tracked peg-in-hole simulator (single and vectorized)
- render.py: front and wrist grayscale cameras
- networks.py: torch policies, critics, image encoder, gradient checks
- base_trainer.py: PPO pretraining with disassembly-imitation reward
- replay.py: demo/online buffers, median demo gate, symmetric sampling
- residual_learner.py: demo collection and RLPD residual training
- eval_harness.py: evaluation, robustness sweep, ablations, transfer
- artifacts.py / config.py: files on disk and experiment configuration
"""

__version__ = "0.1.0"
