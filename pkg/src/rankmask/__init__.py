"""Randomized rank-based symmetry breaking at desk scale.

Subpackages:

- ``rng``        counter-based splittable random streams
- ``protocol``   anonymous-broadcast rank protocol + exact/Monte-Carlo analysis
- ``tensor``     minimal float32 tensor library with reverse-mode autodiff
- ``attention``  rank-mask construction, diamond attention blocks, policy net
- ``envs``       generalized XOR game and evaluation harness
- ``trainer``    minimal PPO-clip trainer with shared policy and team reward
- ``cli``        command-line entry point (``rankmask`` console script)
"""

__version__ = "0.1.0"
